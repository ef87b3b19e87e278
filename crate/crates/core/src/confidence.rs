//! Granularity mapping, min-aggregation and routing of methods to the
//! segment, target-word and source-word use cases.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::align::{align, project_to_source, AlignmentMatrix};
use crate::autoenc::{combined_posterior_dec, combined_posterior_enc, recon_distance};
use crate::corpus::SubwordSequence;
use crate::error::{Error, Result};
use crate::seq2seq::{Seq2Seq, StateMatrix};
use crate::shallow::ShallowNet;
use crate::similarity::{sentence_distance, token_distance, Granularity, Method, ScoreSequence};
use crate::statestore::VectorIndex;

/// Word index of every scored subword position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GranularityMap {
    word_map: Vec<usize>,
    words: usize,
}

impl GranularityMap {
    pub fn new(word_map: Vec<usize>) -> Result<Self> {
        let mut expect = 0;
        for (k, &w) in word_map.iter().enumerate() {
            let ok = if k == 0 { w == 0 } else { w == expect || w == expect + 1 };
            if !ok {
                return Err(Error::MalformedSegmentation(format!(
                    "word map {word_map:?} is not non-decreasing and gap-free"
                )));
            }
            expect = w;
        }
        let words = word_map.last().map_or(0, |&w| w + 1);
        Ok(GranularityMap { word_map, words })
    }

    pub fn of(s: &SubwordSequence) -> Self {
        GranularityMap {
            word_map: s.word_map.clone(),
            words: s.word_count(),
        }
    }

    pub fn words(&self) -> usize {
        self.words
    }

    pub fn len(&self) -> usize {
        self.word_map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.word_map.is_empty()
    }
}

/// Least confident subword score of every word.
pub fn to_word_level(scores: &ScoreSequence, m: &GranularityMap) -> Result<ScoreSequence> {
    let granularity = match scores.granularity {
        Granularity::SourceSubword => Granularity::SourceWord,
        Granularity::TargetSubword => Granularity::TargetWord,
        g => {
            return Err(Error::InvalidCombination(format!(
                "{g} scores cannot be mapped to words"
            )))
        }
    };
    if scores.len() != m.len() {
        return Err(Error::LengthMismatch(format!(
            "sentence {}: {} scores for {} subword positions",
            scores.sentence_id,
            scores.len(),
            m.len()
        )));
    }
    let pol = scores.polarity;
    let mut words: Vec<Option<f64>> = vec![None; m.words];
    for (&w, &v) in m.word_map.iter().zip(&scores.scores) {
        words[w] = Some(match words[w] {
            Some(cur) if !pol.worse(v, cur) => cur,
            _ => v,
        });
    }
    let mut out = ScoreSequence::new(
        scores.sentence_id,
        scores.method,
        granularity,
        words.into_iter().map(|w| w.expect("surjective map")).collect(),
    )?;
    out.polarity = pol;
    Ok(out)
}

/// Least confident element as a segment score.
pub fn to_segment(scores: &ScoreSequence) -> Result<ScoreSequence> {
    let worst = scores
        .polarity
        .worst(&scores.scores)
        .ok_or(Error::EmptyInput("score sequence"))?;
    let mut out = ScoreSequence::new(scores.sentence_id, scores.method, Granularity::Segment, vec![worst])?;
    out.polarity = scores.polarity;
    Ok(out)
}

/// Where source-side alignments for target-side methods come from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AlignmentSource {
    Internal,
    Pharaoh(PathBuf),
}

impl FromStr for AlignmentSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "internal" {
            return Ok(AlignmentSource::Internal);
        }
        match s.strip_prefix("pharaoh:") {
            Some(p) if !p.is_empty() => Ok(AlignmentSource::Pharaoh(PathBuf::from(p))),
            _ => Err(Error::Config(format!(
                "unknown alignment {s:?} (expected internal or pharaoh:PATH)"
            ))),
        }
    }
}

impl fmt::Display for AlignmentSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlignmentSource::Internal => f.write_str("internal"),
            AlignmentSource::Pharaoh(p) => write!(f, "pharaoh:{}", p.display()),
        }
    }
}

/// Requested method and output granularity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MethodSpec {
    pub method: Method,
    pub granularity: Granularity,
    pub alignment: Option<AlignmentSource>,
}

fn source_side(m: Method) -> bool {
    matches!(m, Method::EncSentDist | Method::EncDist | Method::EncAuto)
}

impl MethodSpec {
    pub fn new(method: Method, granularity: Granularity, alignment: Option<AlignmentSource>) -> Result<Self> {
        let spec = MethodSpec {
            method,
            granularity,
            alignment,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.method;
        let bad = |why: &str| Err(Error::InvalidCombination(format!("{m} at {}: {why}", self.granularity)));
        match self.granularity {
            Granularity::Segment => Ok(()),
            Granularity::SourceSubword | Granularity::TargetSubword => {
                bad("request segment, target-word or source-word")
            }
            Granularity::TargetWord if source_side(m) => bad("source-side scores do not give target-word confidence"),
            Granularity::TargetWord => Ok(()),
            Granularity::SourceWord if m == Method::EncSentDist => bad("sentence distance only scores segments"),
            Granularity::SourceWord if m == Method::EncAutoProb => {
                bad("the encoder-reconstruction posterior only gives target confidence")
            }
            Granularity::SourceWord if !source_side(m) && self.alignment.is_none() => {
                bad("target-side methods need an alignment to reach source words")
            }
            Granularity::SourceWord => Ok(()),
        }
    }
}

/// Trained artefacts available for scoring. Methods whose artefact is absent
/// fail with a configuration error.
#[derive(Clone, Copy)]
pub struct Scorer<'a> {
    pub model: &'a Seq2Seq,
    pub token_index: Option<&'a VectorIndex>,
    pub sentence_index: Option<&'a VectorIndex>,
    pub enc_ae: Option<&'a ShallowNet>,
    pub dec_ae: Option<&'a ShallowNet>,
    pub aligner: Option<&'a ShallowNet>,
}

/// One sentence to score: the source and the output being judged.
pub struct SentenceInput<'a> {
    pub source: &'a SubwordSequence,
    pub output: &'a SubwordSequence,
    /// Word-level external alignment, when the spec asks for one.
    pub external: Option<&'a AlignmentMatrix>,
}

fn need<'a, T>(x: Option<&'a T>, what: &str, method: Method) -> Result<&'a T> {
    x.ok_or_else(|| Error::Config(format!("method {method} needs {what}")))
}

impl<'a> Scorer<'a> {
    pub fn new(model: &'a Seq2Seq) -> Self {
        Scorer {
            model,
            token_index: None,
            sentence_index: None,
            enc_ae: None,
            dec_ae: None,
            aligner: None,
        }
    }

    fn states(&self, input: &SentenceInput) -> Result<(StateMatrix, Vec<usize>)> {
        let e = self.model.encode(input.source)?;
        Ok((e, self.model.vocab.encode(input.output)))
    }

    /// Scores at the method's native granularity.
    pub fn raw(&self, method: Method, input: &SentenceInput) -> Result<ScoreSequence> {
        let (e, target) = self.states(input)?;
        let id = input.source.sentence_id;
        let mut out = match method {
            Method::Prob => {
                let (_, post) = self.model.decode_forced_ids(&e, id, &target)?;
                ScoreSequence::new(id, Method::Prob, Granularity::TargetSubword, post.probs)?
            }
            Method::EncSentDist => sentence_distance(need(self.sentence_index, "a sentence index", method)?, &e)?,
            Method::EncDist => token_distance(need(self.token_index, "a token index", method)?, &e)?,
            Method::EncAuto => recon_distance(need(self.enc_ae, "an encoder autoencoder", method)?, &e)?,
            Method::DecAuto => {
                let (d, _) = self.model.decode_forced_ids(&e, id, &target)?;
                recon_distance(need(self.dec_ae, "a decoder autoencoder", method)?, &d)?
            }
            Method::EncAutoProb => combined_posterior_enc(
                self.model,
                need(self.enc_ae, "an encoder autoencoder", method)?,
                &e,
                &target,
            )?,
            Method::DecAutoProb => combined_posterior_dec(
                self.model,
                need(self.dec_ae, "a decoder autoencoder", method)?,
                &e,
                &target,
            )?,
        };
        out.sentence_id = id;
        Ok(out)
    }

    /// Internal subword alignment between the source and the judged output.
    pub fn internal_alignment(&self, input: &SentenceInput) -> Result<AlignmentMatrix> {
        let aligner = self
            .aligner
            .ok_or_else(|| Error::Config("internal alignment needs a trained alignment predictor".into()))?;
        let (e, target) = self.states(input)?;
        let (d, _) = self.model.decode_forced_ids(&e, input.source.sentence_id, &target)?;
        align(aligner, &e, &d)
    }

    /// Internal alignment collapsed to links between words.
    pub fn internal_word_alignment(&self, input: &SentenceInput) -> Result<AlignmentMatrix> {
        self.internal_alignment(input)?
            .to_words(&input.source.word_map, &input.output.word_map)
    }

    /// Scores for `spec`. An empty output yields the worst-confidence
    /// sentinel for segment and source-word requests of target-side methods.
    pub fn score(&self, spec: &MethodSpec, input: &SentenceInput) -> Result<ScoreSequence> {
        spec.validate()?;
        let m = spec.method;
        let id = input.source.sentence_id;
        if input.output.is_empty() && !source_side(m) {
            let pol = m.polarity();
            return match spec.granularity {
                Granularity::Segment => ScoreSequence::new(id, m, Granularity::Segment, vec![pol.sentinel()]),
                Granularity::SourceWord => ScoreSequence::new(
                    id,
                    m,
                    Granularity::SourceWord,
                    vec![pol.sentinel(); input.source.word_count()],
                ),
                _ => Err(Error::EmptyInput("hypothesis")),
            };
        }
        let raw = self.raw(m, input)?;
        match spec.granularity {
            Granularity::Segment if raw.granularity == Granularity::Segment => Ok(raw),
            Granularity::Segment => to_segment(&raw),
            Granularity::TargetWord => to_word_level(&raw, &GranularityMap::of(input.output)),
            Granularity::SourceWord if source_side(m) => to_word_level(&raw, &GranularityMap::of(input.source)),
            Granularity::SourceWord => {
                let words = to_word_level(&raw, &GranularityMap::of(input.output))?;
                let a = match spec.alignment {
                    Some(AlignmentSource::Internal) => self.internal_word_alignment(input)?,
                    Some(AlignmentSource::Pharaoh(_)) => input
                        .external
                        .ok_or_else(|| Error::Config(format!("no external alignment for sentence {id}")))?
                        .clone(),
                    None => unreachable!("validated above"),
                };
                Ok(project_to_source(&words, &a)?.0)
            }
            Granularity::SourceSubword | Granularity::TargetSubword => unreachable!("validated above"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(method: Method, g: Granularity, v: &[f64]) -> ScoreSequence {
        ScoreSequence::new(0, method, g, v.to_vec()).unwrap()
    }

    #[test]
    fn word_level_examples() {
        let one_word = GranularityMap::new(vec![0, 0]).unwrap();
        let p = to_word_level(&seq(Method::Prob, Granularity::TargetSubword, &[0.9, 0.3]), &one_word).unwrap();
        assert_eq!(p.scores, vec![0.3]);
        assert_eq!(p.granularity, Granularity::TargetWord);
        let d = to_word_level(
            &seq(Method::EncDist, Granularity::SourceSubword, &[1.0, 7.0]),
            &one_word,
        )
        .unwrap();
        assert_eq!(d.scores, vec![7.0]);
        let ident = GranularityMap::new(vec![0, 1, 2]).unwrap();
        let s = seq(Method::Prob, Granularity::TargetSubword, &[0.4, 0.1, 0.8]);
        assert_eq!(to_word_level(&s, &ident).unwrap().scores, s.scores);
        assert!(to_word_level(&s, &one_word).is_err());
        assert!(GranularityMap::new(vec![0, 2]).is_err());
        assert!(GranularityMap::new(vec![1]).is_err());
    }

    #[test]
    fn segment_examples() {
        let s = to_segment(&seq(Method::Prob, Granularity::TargetSubword, &[0.9, 0.2, 0.5])).unwrap();
        assert_eq!(s.scores, vec![0.2]);
        let s = to_segment(&seq(Method::DecAuto, Granularity::TargetSubword, &[1.0, 7.0])).unwrap();
        assert_eq!(s.scores, vec![7.0]);
        let s = to_segment(&seq(Method::Prob, Granularity::TargetSubword, &[0.6])).unwrap();
        assert_eq!(s.scores, vec![0.6]);
    }

    #[test]
    fn routing_rules() {
        use Granularity::*;
        assert!(MethodSpec::new(Method::Prob, Segment, None).is_ok());
        assert!(MethodSpec::new(Method::EncDist, SourceWord, None).is_ok());
        assert!(MethodSpec::new(Method::EncAuto, SourceWord, None).is_ok());
        let err = MethodSpec::new(Method::EncAutoProb, SourceWord, Some(AlignmentSource::Internal)).unwrap_err();
        assert!(matches!(err, Error::InvalidCombination(_)));
        assert!(MethodSpec::new(Method::Prob, SourceWord, None).is_err());
        assert!(MethodSpec::new(Method::Prob, SourceWord, Some(AlignmentSource::Internal)).is_ok());
        assert!(MethodSpec::new(Method::DecAutoProb, TargetWord, None).is_ok());
        assert!(MethodSpec::new(Method::EncDist, TargetWord, None).is_err());
        assert!(MethodSpec::new(Method::EncSentDist, SourceWord, None).is_err());
        assert!(MethodSpec::new(Method::Prob, TargetSubword, None).is_err());
        assert_eq!(
            "pharaoh:/x/a.txt".parse::<AlignmentSource>().unwrap(),
            AlignmentSource::Pharaoh("/x/a.txt".into())
        );
        assert!("pharaoh:".parse::<AlignmentSource>().is_err());
    }

    fn word_map_strategy() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(any::<bool>(), 1..12).prop_map(|steps| {
            let mut w = 0;
            let mut out = vec![0];
            for s in steps {
                if s {
                    w += 1;
                }
                out.push(w);
            }
            out
        })
    }

    proptest! {
        #[test]
        fn aggregation_laws(map in word_map_strategy(), seed in 0u64..1000, prob in any::<bool>()) {
            use rand::Rng;
            let mut rng = crate::rng::stage_rng(seed, "test/scores");
            let (method, g) = if prob {
                (Method::Prob, Granularity::TargetSubword)
            } else {
                (Method::EncDist, Granularity::SourceSubword)
            };
            let vals: Vec<f64> = map.iter().map(|_| rng.gen_range(0.0..1.0)).collect();
            let s = seq(method, g, &vals);
            let m = GranularityMap::new(map.clone()).unwrap();
            let words = to_word_level(&s, &m).unwrap();
            let seg_sub = to_segment(&s).unwrap();
            let seg_word = to_segment(&words).unwrap();
            prop_assert_eq!(&seg_sub.scores, &seg_word.scores);

            // Reversing subwords inside each word leaves word scores unchanged.
            let mut permuted = vals.clone();
            let mut start = 0;
            while start < map.len() {
                let end = (start..map.len()).find(|&k| map[k] != map[start]).unwrap_or(map.len());
                permuted[start..end].reverse();
                start = end;
            }
            let p = to_word_level(&seq(method, g, &permuted), &m).unwrap();
            prop_assert_eq!(&p.scores, &words.scores);

            // A strictly increasing transform keeps the identity of the worst item.
            let t: Vec<f64> = vals.iter().map(|v| (2.0 * v).exp()).collect();
            let tw = to_word_level(&seq(method, g, &t), &m).unwrap();
            let argworst = |v: &[f64]| {
                let w = s.polarity.worst(v).unwrap();
                v.iter().position(|&x| x == w).unwrap()
            };
            prop_assert_eq!(argworst(&tw.scores), argworst(&words.scores));
        }
    }
}

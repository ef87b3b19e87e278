//! Encoding, teacher-forced decoding and greedy/beam search.
//!
//! Every state handed to the output layer is first rounded to the `f32`
//! storage precision, so scores computed from stored or reconstructed states
//! agree exactly with those computed during search.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::model::{Memory, Seq2Seq, BOS, EOS};
use super::states::{Side, StateMatrix};
use crate::corpus::{desegment, SubwordSequence, WordSequence, CONTINUATION};
use crate::error::{Error, Result};
use crate::tensor::{log_softmax, softmax};

/// Probability of each realized target unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSequence {
    pub token_ids: Vec<usize>,
    pub probs: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeMode::Greedy => f.write_str("greedy"),
            DecodeMode::Beam(w) => write!(f, "beam({w})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Output units, ending with EOS unless `truncated`.
    pub token_ids: Vec<usize>,
    /// Sum of log-probabilities of every emitted token including EOS.
    pub model_score: f64,
    pub mode: DecodeMode,
    pub truncated: bool,
    /// Probability of each emitted token at the step it was chosen.
    pub step_probs: Vec<f64>,
}

impl Hypothesis {
    /// Output units without the end-of-sequence marker.
    pub fn units(&self) -> &[usize] {
        match self.token_ids.last() {
            Some(&EOS) => &self.token_ids[..self.token_ids.len() - 1],
            _ => &self.token_ids,
        }
    }
}

fn storage_round(row: &[f64]) -> Vec<f64> {
    row.iter().map(|&v| f64::from(v as f32)).collect()
}

#[derive(Clone)]
struct Beam {
    tokens: Vec<usize>,
    probs: Vec<f64>,
    score: f64,
    prefix: super::model::DecoderPrefix,
}

impl Seq2Seq {
    /// Top-layer encoder states of a source sentence.
    pub fn encode(&self, source: &SubwordSequence) -> Result<StateMatrix> {
        self.encode_ids_checked(source.sentence_id, &self.vocab.encode(source))
    }

    pub fn encode_ids_checked(&self, sentence_id: u32, ids: &[usize]) -> Result<StateMatrix> {
        if ids.is_empty() {
            return Err(Error::EmptyInput("source sentence"));
        }
        self.check_len(ids.len())?;
        StateMatrix::from_mat(Side::Encoder, sentence_id, &self.encode_ids(ids))
    }

    fn memory_of(&self, e: &StateMatrix) -> Result<Memory> {
        if e.dim() != self.d() {
            return Err(Error::DimensionMismatch {
                expected: self.d(),
                actual: e.dim(),
                context: "encoder states",
            });
        }
        Ok(self.memory(&e.to_mat()))
    }

    /// Teacher-forced decoder states (one row per target unit) and the
    /// posterior of every realized unit.
    pub fn decode_forced(&self, e: &StateMatrix, target: &SubwordSequence) -> Result<(StateMatrix, PosteriorSequence)> {
        self.decode_forced_ids(e, target.sentence_id, &self.vocab.encode(target))
    }

    pub fn decode_forced_ids(
        &self,
        e: &StateMatrix,
        sentence_id: u32,
        target: &[usize],
    ) -> Result<(StateMatrix, PosteriorSequence)> {
        if target.is_empty() {
            return Err(Error::EmptyInput("target sentence"));
        }
        self.check_len(target.len())?;
        let mem = self.memory_of(e)?;
        let mut inputs = vec![BOS];
        inputs.extend_from_slice(&target[..target.len() - 1]);
        let states = self.decoder_states(&inputs, &mem);
        let d = StateMatrix::from_mat(Side::Decoder, sentence_id, &states)?;
        let probs = self.posteriors(&d, target)?;
        Ok((
            d,
            PosteriorSequence {
                token_ids: target.to_vec(),
                probs,
            },
        ))
    }

    /// `softmax(FF(d_i))[y_i]` for every row of `d`.
    pub fn posteriors(&self, d: &StateMatrix, target: &[usize]) -> Result<Vec<f64>> {
        if d.rows() != target.len() {
            return Err(Error::LengthMismatch(format!(
                "{} decoder states for {} target units",
                d.rows(),
                target.len()
            )));
        }
        Ok((0..d.rows())
            .map(|i| self.distribution(&d.row_f64(i))[target[i]])
            .collect())
    }

    /// Output length limit for a source of `src_len` units.
    pub fn decode_limit(&self, src_len: usize) -> usize {
        (2 * src_len + 10).min(self.config.max_len)
    }

    pub fn greedy_decode(&self, source: &SubwordSequence) -> Result<Hypothesis> {
        let e = self.encode(source)?;
        self.search(&e, DecodeMode::Greedy)
    }

    pub fn beam_decode(&self, source: &SubwordSequence, width: usize) -> Result<Hypothesis> {
        let e = self.encode(source)?;
        self.search(&e, DecodeMode::Beam(width))
    }

    pub fn search(&self, e: &StateMatrix, mode: DecodeMode) -> Result<Hypothesis> {
        match mode {
            DecodeMode::Greedy => self.greedy_from_states(e),
            DecodeMode::Beam(w) => self.beam_from_states(e, w),
        }
    }

    fn greedy_from_states(&self, e: &StateMatrix) -> Result<Hypothesis> {
        let mem = self.memory_of(e)?;
        let limit = self.decode_limit(e.rows());
        let mut prefix = self.empty_prefix();
        let mut input = BOS;
        let mut tokens = Vec::new();
        let mut probs = Vec::new();
        let mut score = 0.0;
        for _ in 0..=limit {
            let state = storage_round(&self.decoder_step(&mut prefix, input, &mem));
            let logits = self.logits(&state);
            let lp = log_softmax(&logits);
            // Argmax of the running total, lowest id on ties; the same rule
            // as a width-one beam.
            let mut best = 0;
            let mut best_total = score + lp[0];
            for (t, &l) in lp.iter().enumerate().skip(1) {
                if score + l > best_total {
                    best = t;
                    best_total = score + l;
                }
            }
            score = best_total;
            tokens.push(best);
            probs.push(softmax(&logits)[best]);
            if best == EOS {
                return Ok(Hypothesis {
                    token_ids: tokens,
                    model_score: score,
                    mode: DecodeMode::Greedy,
                    truncated: false,
                    step_probs: probs,
                });
            }
            input = best;
        }
        Ok(Hypothesis {
            token_ids: tokens,
            model_score: score,
            mode: DecodeMode::Greedy,
            truncated: true,
            step_probs: probs,
        })
    }

    fn beam_from_states(&self, e: &StateMatrix, width: usize) -> Result<Hypothesis> {
        if width == 0 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        let mode = DecodeMode::Beam(width);
        let mem = self.memory_of(e)?;
        let limit = self.decode_limit(e.rows());
        let mut live = vec![Beam {
            tokens: Vec::new(),
            probs: Vec::new(),
            score: 0.0,
            prefix: self.empty_prefix(),
        }];
        let mut finished: Vec<Beam> = Vec::new();
        for _ in 0..=limit {
            let mut cands: Vec<(f64, usize, usize, f64)> = Vec::new();
            let mut prefixes = Vec::with_capacity(live.len());
            for (b, beam) in live.iter().enumerate() {
                let mut prefix = beam.prefix.clone();
                let input = beam.tokens.last().copied().unwrap_or(BOS);
                let state = storage_round(&self.decoder_step(&mut prefix, input, &mem));
                let logits = self.logits(&state);
                let lp = log_softmax(&logits);
                let p = softmax(&logits);
                for (t, &l) in lp.iter().enumerate() {
                    cands.push((beam.score + l, b, t, p[t]));
                }
                prefixes.push(prefix);
            }
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut next = Vec::with_capacity(width);
            for &(score, b, t, p) in cands.iter().take(width) {
                let mut tokens = live[b].tokens.clone();
                tokens.push(t);
                let mut probs = live[b].probs.clone();
                probs.push(p);
                let beam = Beam {
                    tokens,
                    probs,
                    score,
                    prefix: prefixes[b].clone(),
                };
                if t == EOS {
                    finished.push(beam);
                } else {
                    next.push(beam);
                }
            }
            live = next;
            let best_finished = finished.iter().map(|b| b.score).fold(f64::NEG_INFINITY, f64::max);
            let best_live = live.first().map_or(f64::NEG_INFINITY, |b| b.score);
            if !finished.is_empty() && best_finished >= best_live {
                break;
            }
        }
        let (beam, truncated) = match finished
            .into_iter()
            .reduce(|a, b| if b.score > a.score { b } else { a })
        {
            Some(b) => (b, false),
            None => (live.swap_remove(0), true),
        };
        Ok(Hypothesis {
            token_ids: beam.tokens,
            model_score: beam.score,
            mode,
            truncated,
            step_probs: beam.probs,
        })
    }

    /// Hypothesis units as a subword sequence. Specials are dropped and a
    /// dangling continuation on the last unit is closed. `None` when nothing
    /// remains.
    pub fn hypothesis_subwords(&self, sentence_id: u32, hyp: &Hypothesis) -> Option<SubwordSequence> {
        let mut units: Vec<String> = hyp
            .units()
            .iter()
            .filter(|&&t| t != BOS && t != EOS)
            .map(|&t| self.vocab.unit(t).to_string())
            .collect();
        if let Some(last) = units.last_mut() {
            if let Some(stem) = last.strip_suffix(CONTINUATION) {
                *last = stem.to_string();
            }
        }
        units.retain(|u| !u.is_empty());
        if units.is_empty() {
            return None;
        }
        SubwordSequence::from_units(sentence_id, units).ok()
    }

    /// Word-level reading of a hypothesis; empty when it has no units.
    pub fn hypothesis_words(&self, sentence_id: u32, hyp: &Hypothesis) -> Vec<String> {
        self.hypothesis_subwords(sentence_id, hyp)
            .and_then(|s| desegment(&s).ok())
            .map(|w: WordSequence| w.words)
            .unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seq2seq::model::{ModelConfig, Vocab};

    fn untrained(vocab: usize) -> Seq2Seq {
        let cfg = ModelConfig {
            d: 16,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            ff_hidden: 24,
            max_len: 20,
            seed: 4,
        };
        Seq2Seq::new(cfg, Vocab::new((0..vocab).map(|i| format!("u{i}")))).unwrap()
    }

    fn src(ids: &[usize]) -> SubwordSequence {
        SubwordSequence::from_units(0, ids.iter().map(|i| format!("u{i}")).collect()).unwrap()
    }

    #[test]
    fn encode_shape_and_errors() {
        let m = untrained(6);
        let e = m.encode(&src(&[1, 2, 3])).unwrap();
        assert_eq!((e.rows(), e.dim()), (3, 16));
        assert_eq!(e, m.encode(&src(&[1, 2, 3])).unwrap());
        assert!(matches!(m.encode_ids_checked(0, &[]), Err(Error::EmptyInput(_))));
        assert!(matches!(m.encode_ids_checked(0, &[3; 21]), Err(Error::TooLong { .. })));
    }

    #[test]
    fn untrained_posteriors_are_near_uniform() {
        let m = untrained(30);
        let s = src(&[1, 2, 3, 4]);
        let e = m.encode(&s).unwrap();
        let (d, post) = m.decode_forced(&e, &s).unwrap();
        assert_eq!(d.rows(), 4);
        let uniform = 1.0 / m.vocab.len() as f64;
        for &p in &post.probs {
            assert!((p - uniform).abs() < 0.5 * uniform, "{p} vs {uniform}");
        }
        for i in 0..d.rows() {
            let s: f64 = m.distribution(&d.row_f64(i)).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn forced_decoding_reproduces_search_probabilities() {
        let m = untrained(8);
        let e = m.encode(&src(&[3, 4, 5, 6])).unwrap();
        for mode in [DecodeMode::Greedy, DecodeMode::Beam(3)] {
            let hyp = m.search(&e, mode).unwrap();
            let (_, post) = m.decode_forced_ids(&e, 0, &hyp.token_ids).unwrap();
            assert_eq!(post.probs, hyp.step_probs);
        }
    }

    #[test]
    fn width_one_beam_is_greedy() {
        let m = untrained(8);
        for k in 0..20 {
            let ids: Vec<usize> = (0..1 + k % 5).map(|i| 3 + (i * 7 + k) % 5).collect();
            let s = src(&ids);
            let g = m.greedy_decode(&s).unwrap();
            let b = m.beam_decode(&s, 1).unwrap();
            assert_eq!(g.token_ids, b.token_ids);
            assert_eq!(g.model_score, b.model_score);
            assert_eq!(g.truncated, b.truncated);
        }
    }

    #[test]
    fn hypothesis_words_tolerate_dangling_units() {
        let m = Seq2Seq::new(
            ModelConfig {
                d: 8,
                heads: 2,
                ..ModelConfig::default()
            },
            Vocab::new(["ab@@".to_string(), "c".to_string()]),
        )
        .unwrap();
        let ab = m.vocab.id("ab@@");
        let c = m.vocab.id("c");
        let hyp = Hypothesis {
            token_ids: vec![ab, c, ab, EOS],
            model_score: 0.0,
            mode: DecodeMode::Greedy,
            truncated: false,
            step_probs: vec![],
        };
        assert_eq!(m.hypothesis_words(0, &hyp), vec!["abc", "ab"]);
        let empty = Hypothesis {
            token_ids: vec![EOS],
            ..hyp
        };
        assert!(m.hypothesis_words(0, &empty).is_empty());
    }
}

//! Confidence score sequences and the train/test distance scores.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seq2seq::StateMatrix;
use crate::statestore::{IndexGranularity, VectorIndex};

/// Which end of a score means low confidence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    /// Larger is less confident.
    Distance,
    /// Smaller is less confident.
    Probability,
}

impl Polarity {
    /// `true` when `a` is strictly less confident than `b`.
    pub fn worse(self, a: f64, b: f64) -> bool {
        match self {
            Polarity::Distance => a > b,
            Polarity::Probability => a < b,
        }
    }

    /// The least confident of a non-empty set of scores.
    pub fn worst(self, scores: &[f64]) -> Option<f64> {
        scores
            .iter()
            .copied()
            .reduce(|a, b| if self.worse(b, a) { b } else { a })
    }

    /// A value no real score is less confident than.
    pub fn sentinel(self) -> f64 {
        match self {
            Polarity::Distance => f64::MAX,
            Polarity::Probability => 0.0,
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Polarity::Distance => "distance",
            Polarity::Probability => "probability",
        })
    }
}

impl FromStr for Polarity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distance" => Ok(Polarity::Distance),
            "probability" => Ok(Polarity::Probability),
            _ => Err(Error::Config(format!("unknown polarity {s:?}"))),
        }
    }
}

/// Confidence estimation methods.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    Prob,
    EncSentDist,
    EncDist,
    EncAuto,
    DecAuto,
    EncAutoProb,
    DecAutoProb,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Prob,
        Method::EncSentDist,
        Method::EncDist,
        Method::EncAuto,
        Method::DecAuto,
        Method::EncAutoProb,
        Method::DecAutoProb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Prob => "prob",
            Method::EncSentDist => "enc-sent-dist",
            Method::EncDist => "enc-dist",
            Method::EncAuto => "enc-auto",
            Method::DecAuto => "dec-auto",
            Method::EncAutoProb => "enc-auto+prob",
            Method::DecAutoProb => "dec-auto+prob",
        }
    }

    pub fn polarity(self) -> Polarity {
        match self {
            Method::Prob | Method::EncAutoProb | Method::DecAutoProb => Polarity::Probability,
            _ => Polarity::Distance,
        }
    }

    /// Granularity the raw scores come out at.
    pub fn native(self) -> Granularity {
        match self {
            Method::EncSentDist => Granularity::Segment,
            Method::EncDist | Method::EncAuto => Granularity::SourceSubword,
            _ => Granularity::TargetSubword,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
            Error::Config(format!("unknown method {s:?} (expected one of {})", names.join(", ")))
        })
    }
}

/// The unit a score sequence is indexed by.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Granularity {
    Segment,
    SourceSubword,
    TargetSubword,
    SourceWord,
    TargetWord,
}

impl Granularity {
    pub const ALL: [Granularity; 5] = [
        Granularity::Segment,
        Granularity::SourceSubword,
        Granularity::TargetSubword,
        Granularity::SourceWord,
        Granularity::TargetWord,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Granularity::Segment => "segment",
            Granularity::SourceSubword => "source-subword",
            Granularity::TargetSubword => "target-subword",
            Granularity::SourceWord => "source-word",
            Granularity::TargetWord => "target-word",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Granularity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Granularity::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown granularity {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSequence {
    pub sentence_id: u32,
    pub method: Method,
    pub granularity: Granularity,
    pub polarity: Polarity,
    pub scores: Vec<f64>,
}

impl ScoreSequence {
    pub fn new(sentence_id: u32, method: Method, granularity: Granularity, scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::EmptyInput("score sequence"));
        }
        if granularity == Granularity::Segment && scores.len() != 1 {
            return Err(Error::LengthMismatch(format!(
                "segment score sequence of length {}",
                scores.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config(format!("non-finite score in sentence {sentence_id}")));
        }
        Ok(ScoreSequence {
            sentence_id,
            method,
            granularity,
            polarity: method.polarity(),
            scores,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Tag written to score files: `method:granularity`.
    pub fn tag(&self) -> String {
        format!("{}:{}", self.method, self.granularity)
    }
}

/// One line per score: sentence id, position (-1 for segments), score,
/// `method:granularity` tag, polarity.
pub fn write_scores(path: &Path, seqs: &[ScoreSequence]) -> Result<()> {
    let mut out = String::new();
    for s in seqs {
        for (i, v) in s.scores.iter().enumerate() {
            let pos = if s.granularity == Granularity::Segment {
                -1
            } else {
                i as i64
            };
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                s.sentence_id,
                pos,
                v,
                s.tag(),
                s.polarity
            ));
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreSequence>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out: Vec<ScoreSequence> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |why: &str| Error::format(path, format!("line {}: {why}", n + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(bad("expected 5 tab-separated fields"));
        }
        let id: u32 = f[0].parse().map_err(|_| bad("bad sentence id"))?;
        let pos: i64 = f[1].parse().map_err(|_| bad("bad position"))?;
        let score: f64 = f[2].parse().map_err(|_| bad("bad score"))?;
        let (m, g) = f[3].split_once(':').ok_or_else(|| bad("bad method tag"))?;
        let method: Method = m.parse()?;
        let granularity: Granularity = g.parse()?;
        let polarity: Polarity = f[4].parse()?;
        if polarity != method.polarity() {
            return Err(bad("polarity disagrees with method"));
        }
        let expected = match out.last() {
            Some(s) if s.sentence_id == id && s.method == method && s.granularity == granularity => s.len() as i64,
            _ => 0,
        };
        let want = if granularity == Granularity::Segment {
            -1
        } else {
            expected
        };
        if pos != want {
            return Err(bad("positions must be consecutive from 0 (or -1 for segments)"));
        }
        if expected == 0 || granularity == Granularity::Segment {
            out.push(ScoreSequence::new(id, method, granularity, vec![score]).map_err(|e| bad(&e.to_string()))?);
        } else {
            out.last_mut().unwrap().scores.push(score);
        }
    }
    Ok(out)
}

/// `s = min_train L2(avg(train), avg(E))` as a segment score.
pub fn sentence_distance(index: &VectorIndex, e: &StateMatrix) -> Result<ScoreSequence> {
    if index.granularity() != IndexGranularity::SentenceAverage {
        return Err(Error::Config("sentence distance needs a sentence-average index".into()));
    }
    let n = index.nearest(&e.average())?;
    ScoreSequence::new(
        e.sentence_id,
        Method::EncSentDist,
        Granularity::Segment,
        vec![n.distance],
    )
}

/// `s_i = min_train L2(train row, e_i)` for every source unit.
pub fn token_distance(index: &VectorIndex, e: &StateMatrix) -> Result<ScoreSequence> {
    if index.granularity() != IndexGranularity::Token {
        return Err(Error::Config("token distance needs a token index".into()));
    }
    let scores = (0..e.rows())
        .map(|i| index.nearest(&e.row_f64(i)).map(|n| n.distance))
        .collect::<Result<Vec<_>>>()?;
    ScoreSequence::new(e.sentence_id, Method::EncDist, Granularity::SourceSubword, scores)
}

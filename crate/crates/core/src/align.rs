//! Internal source-target alignment learned with EM, external Pharaoh
//! alignments, and projection of target scores onto source positions.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stage_rng;
use crate::seq2seq::StateMatrix;
use crate::shallow::{FitConfig, NetTag, ShallowNet};
use crate::similarity::{Granularity, ScoreSequence};
use crate::tensor::{dot, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlignOrigin {
    Internal,
    ExternalPharaoh,
}

/// Alignment of one sentence pair. Positions are 0-based.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentMatrix {
    pub sentence_id: u32,
    pub src_len: usize,
    pub tgt_len: usize,
    /// Cosine scores `a'_ij`, `src_len × tgt_len` (internal only).
    pub soft: Option<Mat>,
    /// Source-target links.
    pub links: Vec<(usize, usize)>,
    pub origin: AlignOrigin,
}

impl AlignmentMatrix {
    /// Internal alignment: soft scores plus the argmax link of every source
    /// position.
    pub fn internal(sentence_id: u32, soft: Mat) -> Self {
        let links = hard_alignment(&soft).into_iter().enumerate().collect();
        AlignmentMatrix {
            sentence_id,
            src_len: soft.rows(),
            tgt_len: soft.cols(),
            soft: Some(soft),
            links,
            origin: AlignOrigin::Internal,
        }
    }

    /// Links between the words containing the linked units; soft scores are
    /// dropped.
    pub fn to_words(&self, src_word_map: &[usize], tgt_word_map: &[usize]) -> Result<AlignmentMatrix> {
        if src_word_map.len() != self.src_len || tgt_word_map.len() != self.tgt_len {
            return Err(Error::LengthMismatch(format!(
                "sentence {}: alignment is {}x{}, word maps cover {}x{}",
                self.sentence_id,
                self.src_len,
                self.tgt_len,
                src_word_map.len(),
                tgt_word_map.len()
            )));
        }
        let words = |m: &[usize]| m.last().map_or(0, |&w| w + 1);
        let mut links: Vec<(usize, usize)> = self
            .links
            .iter()
            .map(|&(i, j)| (src_word_map[i], tgt_word_map[j]))
            .collect();
        links.sort_unstable();
        links.dedup();
        Ok(AlignmentMatrix {
            sentence_id: self.sentence_id,
            src_len: words(src_word_map),
            tgt_len: words(tgt_word_map),
            soft: None,
            links,
            origin: self.origin,
        })
    }

    /// Target position of each source position's first link.
    pub fn hard(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.src_len];
        for &(i, j) in &self.links {
            if out[i].is_none() {
                out[i] = Some(j);
            }
        }
        out
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// `a'_ij = cos(NN(e_i), d_j)`.
pub fn align_scores(nn: &ShallowNet, e: &StateMatrix, d: &StateMatrix) -> Result<Mat> {
    if nn.output() != d.dim() {
        return Err(Error::DimensionMismatch {
            expected: nn.output(),
            actual: d.dim(),
            context: "alignment predictor output vs decoder width",
        });
    }
    let (_, pred) = nn.forward_batch(&e.to_mat())?;
    let dm = d.to_mat();
    let mut soft = Mat::zeros(e.rows(), d.rows());
    for i in 0..e.rows() {
        for j in 0..d.rows() {
            soft.set(i, j, cosine(pred.row(i), dm.row(j)));
        }
    }
    Ok(soft)
}

/// `a(i) = argmax_j a'_ij`, smallest `j` on ties.
pub fn hard_alignment(soft: &Mat) -> Vec<usize> {
    (0..soft.rows())
        .map(|i| {
            let row = soft.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// E-step: negative scores clamped to zero, then every target column
/// normalised over source positions; all-zero columns become uniform.
pub fn responsibilities(soft: &Mat) -> Mat {
    let (rows, cols) = (soft.rows(), soft.cols());
    let mut r = Mat::zeros(rows, cols);
    for j in 0..cols {
        let sum: f64 = (0..rows).map(|i| soft.get(i, j).max(0.0)).sum();
        for i in 0..rows {
            let v = if sum > 0.0 {
                soft.get(i, j).max(0.0) / sum
            } else {
                1.0 / rows as f64
            };
            r.set(i, j, v);
        }
    }
    r
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmInit {
    /// First E-step uses the randomly initialised predictor.
    Random,
    /// First E-step uses uniform responsibilities.
    Uniform,
}

impl FromStr for EmInit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(EmInit::Random),
            "uniform" => Ok(EmInit::Uniform),
            _ => Err(Error::Config(format!("unknown EM init {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub hidden: usize,
    pub iters: usize,
    /// Passes over the data in every M-step.
    pub fit: FitConfig,
    pub init: EmInit,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            hidden: 64,
            iters: 5,
            fit: FitConfig {
                epochs: 3,
                batch: 64,
                lr: 1e-3,
                ..FitConfig::default()
            },
            init: EmInit::Random,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmReport {
    /// Full-data soft MSE after each M-step epoch, per EM iteration.
    pub m_step_loss: Vec<Vec<f64>>,
}

/// Soft targets `Σ_j a_ij d_j` for every source row.
fn soft_targets(resp: &Mat, d: &StateMatrix) -> Mat {
    resp.matmul(&d.to_mat())
}

/// EM training of the alignment predictor over `(E, D)` pairs.
pub fn em_train(pairs: &[(StateMatrix, StateMatrix)], cfg: &EmConfig) -> Result<(ShallowNet, EmReport)> {
    let (e0, d0) = pairs.first().ok_or(Error::EmptyInput("alignment training pairs"))?;
    if cfg.hidden == 0 {
        return Err(Error::Config("hidden size must be at least 1".into()));
    }
    let (de, dd) = (e0.dim(), d0.dim());
    let mut nn = ShallowNet::new(de, cfg.hidden, dd, NetTag::AlignmentPredictor, cfg.seed)?;
    let mut xs = Vec::new();
    for (e, d) in pairs {
        if e.dim() != de || d.dim() != dd {
            return Err(Error::DimensionMismatch {
                expected: de,
                actual: e.dim(),
                context: "alignment training states",
            });
        }
        xs.extend(e.data().iter().map(|&v| f64::from(v)));
    }
    let x = Mat::from_vec(xs.len() / de, de, xs);
    let mut rng = stage_rng(cfg.seed, "align/shuffle");
    let mut report = EmReport {
        m_step_loss: Vec::with_capacity(cfg.iters),
    };
    for iter in 0..cfg.iters {
        let mut ts = Vec::with_capacity(x.rows() * dd);
        for (e, d) in pairs {
            let resp = if iter == 0 && cfg.init == EmInit::Uniform {
                Mat::filled(e.rows(), d.rows(), 1.0 / e.rows() as f64)
            } else {
                responsibilities(&align_scores(&nn, e, d)?)
            };
            ts.extend_from_slice(soft_targets(&resp, d).data());
        }
        let t = Mat::from_vec(x.rows(), dd, ts);
        let mut opt = nn.optimizer(&cfg.fit);
        let losses = (0..cfg.fit.epochs)
            .map(|_| nn.fit_epoch(&x, &t, &cfg.fit, &mut opt, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        report.m_step_loss.push(losses);
    }
    Ok((nn, report))
}

/// Internal alignment of one sentence pair with a trained predictor.
pub fn align(nn: &ShallowNet, e: &StateMatrix, d: &StateMatrix) -> Result<AlignmentMatrix> {
    Ok(AlignmentMatrix::internal(e.sentence_id, align_scores(nn, e, d)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Pairs are `source-target`.
    SourceTarget,
    /// Pairs are `target-source`.
    TargetSource,
}

impl FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "src-tgt" | "source-target" => Ok(Direction::SourceTarget),
            "tgt-src" | "target-source" => Ok(Direction::TargetSource),
            _ => Err(Error::Config(format!("unknown alignment direction {s:?}"))),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::SourceTarget => "src-tgt",
            Direction::TargetSource => "tgt-src",
        })
    }
}

/// Parses one Pharaoh line (`i-j` pairs, 0-based) for a sentence with
/// `src_len` source and `tgt_len` target positions.
pub fn parse_pharaoh_line(
    line_no: usize,
    line: &str,
    sentence_id: u32,
    src_len: usize,
    tgt_len: usize,
    direction: Direction,
) -> Result<AlignmentMatrix> {
    let mut links = Vec::new();
    for tok in line.split_whitespace() {
        let (a, b) = tok.split_once('-').ok_or_else(|| Error::Pharaoh {
            line: line_no,
            reason: format!("malformed link {tok:?}"),
        })?;
        let parse = |s: &str| {
            s.parse::<usize>().map_err(|_| Error::Pharaoh {
                line: line_no,
                reason: format!("malformed link {tok:?}"),
            })
        };
        let (x, y) = (parse(a)?, parse(b)?);
        let (i, j) = match direction {
            Direction::SourceTarget => (x, y),
            Direction::TargetSource => (y, x),
        };
        if i >= src_len || j >= tgt_len {
            return Err(Error::Pharaoh {
                line: line_no,
                reason: format!(
                    "link {tok} out of range for sentence {sentence_id} ({src_len} source, {tgt_len} target positions)"
                ),
            });
        }
        links.push((i, j));
    }
    links.sort_unstable();
    links.dedup();
    Ok(AlignmentMatrix {
        sentence_id,
        src_len,
        tgt_len,
        soft: None,
        links,
        origin: AlignOrigin::ExternalPharaoh,
    })
}

/// Reads a Pharaoh file; `shapes` gives `(sentence_id, src_len, tgt_len)`
/// for each line in order.
pub fn load_pharaoh(path: &Path, direction: Direction, shapes: &[(u32, usize, usize)]) -> Result<Vec<AlignmentMatrix>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() != shapes.len() {
        return Err(Error::format(
            path,
            format!("{} lines for {} sentences", lines.len(), shapes.len()),
        ));
    }
    lines
        .iter()
        .zip(shapes)
        .enumerate()
        .map(|(n, (line, &(id, i, j)))| parse_pharaoh_line(n + 1, line, id, i, j, direction))
        .collect()
}

pub fn pharaoh_line(a: &AlignmentMatrix) -> String {
    a.links
        .iter()
        .map(|(i, j)| format!("{i}-{j}"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn write_pharaoh(path: &Path, alignments: &[AlignmentMatrix]) -> Result<()> {
    let mut out = String::new();
    for a in alignments {
        out.push_str(&pharaoh_line(a));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Each source position gets the least confident score among its linked
/// target positions. Unlinked positions get the polarity's worst-case
/// sentinel and are flagged `true`.
pub fn project_to_source(target: &ScoreSequence, alignment: &AlignmentMatrix) -> Result<(ScoreSequence, Vec<bool>)> {
    let granularity = match target.granularity {
        Granularity::TargetSubword => Granularity::SourceSubword,
        Granularity::TargetWord => Granularity::SourceWord,
        g => {
            return Err(Error::InvalidCombination(format!(
                "cannot project {g} scores to the source side"
            )))
        }
    };
    if target.len() != alignment.tgt_len {
        return Err(Error::LengthMismatch(format!(
            "sentence {}: {} target scores, alignment has {} target positions",
            target.sentence_id,
            target.len(),
            alignment.tgt_len
        )));
    }
    let pol = target.polarity;
    let mut scores: Vec<Option<f64>> = vec![None; alignment.src_len];
    for &(i, j) in &alignment.links {
        let v = target.scores[j];
        scores[i] = Some(match scores[i] {
            Some(cur) if !pol.worse(v, cur) => cur,
            _ => v,
        });
    }
    let unlinked = scores.iter().map(Option::is_none).collect();
    let values = scores.into_iter().map(|s| s.unwrap_or(pol.sentinel())).collect();
    let mut out = ScoreSequence::new(target.sentence_id, target.method, granularity, values)?;
    out.polarity = pol;
    Ok((out, unlinked))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seq2seq::Side;
    use crate::similarity::Method;
    use proptest::prelude::*;

    fn predictor(d: usize) -> ShallowNet {
        ShallowNet::new(d, 4, d, NetTag::AlignmentPredictor, 1).unwrap()
    }

    #[test]
    fn cosine_examples_and_shape() {
        let mut nn = predictor(2);
        nn.w1.fill(0.0);
        nn.w2.fill(0.0);
        nn.b2 = Mat::from_vec(1, 2, vec![2.0, 0.0]);
        let e = StateMatrix::new(Side::Encoder, 0, 2, vec![1.0; 6]).unwrap();
        let d = StateMatrix::new(Side::Decoder, 0, 2, vec![3.0, 0.0, 0.0, 5.0, 0.0, 0.0, -1.0, 0.0]).unwrap();
        let s = align_scores(&nn, &e, &d).unwrap();
        assert_eq!((s.rows(), s.cols()), (3, 4));
        assert_eq!(s.row(0), &[1.0, 0.0, 0.0, -1.0]);
    }

    #[test]
    fn hard_alignment_examples() {
        let s = Mat::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]);
        assert_eq!(hard_alignment(&s), vec![0, 1]);
        let flat = Mat::from_rows(&[vec![0.3, 0.3, 0.3]]);
        assert_eq!(hard_alignment(&flat), vec![0]);
    }

    #[test]
    fn responsibilities_clamp_and_fallback() {
        let s = Mat::from_rows(&[vec![0.5, -0.2], vec![-0.5, -0.1], vec![1.5, -0.3]]);
        let r = responsibilities(&s);
        assert_eq!(r.get(0, 0), 0.25);
        assert_eq!(r.get(1, 0), 0.0);
        assert_eq!(r.get(2, 0), 0.75);
        for i in 0..3 {
            assert_eq!(r.get(i, 1), 1.0 / 3.0);
        }
    }

    #[test]
    fn pharaoh_parsing() {
        let a = parse_pharaoh_line(1, "0-0 1-2", 7, 2, 3, Direction::SourceTarget).unwrap();
        assert_eq!(a.links, vec![(0, 0), (1, 2)]);
        let empty = parse_pharaoh_line(2, "", 7, 2, 3, Direction::SourceTarget).unwrap();
        assert!(empty.links.is_empty());
        match parse_pharaoh_line(5, "1:2", 7, 2, 3, Direction::SourceTarget) {
            Err(Error::Pharaoh { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
        let err = parse_pharaoh_line(3, "2-0", 41, 2, 3, Direction::SourceTarget).unwrap_err();
        assert!(err.to_string().contains("sentence 41"));
        let rev = parse_pharaoh_line(1, "2-1", 0, 2, 3, Direction::TargetSource).unwrap();
        assert_eq!(rev.links, vec![(1, 2)]);
    }

    #[test]
    fn pharaoh_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        let a = parse_pharaoh_line(1, "0-1 1-0", 0, 2, 2, Direction::SourceTarget).unwrap();
        let b = parse_pharaoh_line(2, "", 1, 1, 1, Direction::SourceTarget).unwrap();
        write_pharaoh(&p, &[a.clone(), b.clone()]).unwrap();
        let back = load_pharaoh(&p, Direction::SourceTarget, &[(0, 2, 2), (1, 1, 1)]).unwrap();
        assert_eq!(back, vec![a, b]);
    }

    fn links(src: usize, tgt: usize, l: &[(usize, usize)]) -> AlignmentMatrix {
        AlignmentMatrix {
            sentence_id: 0,
            src_len: src,
            tgt_len: tgt,
            soft: None,
            links: l.to_vec(),
            origin: AlignOrigin::ExternalPharaoh,
        }
    }

    #[test]
    fn projection_examples() {
        let probs = ScoreSequence::new(0, Method::Prob, Granularity::TargetWord, vec![0.9, 0.2]).unwrap();
        let (s, flags) = project_to_source(&probs, &links(2, 2, &[(0, 0), (0, 1)])).unwrap();
        assert_eq!(s.scores, vec![0.2, 0.0]);
        assert_eq!(flags, vec![false, true]);
        assert_eq!(s.granularity, Granularity::SourceWord);
        let dist = ScoreSequence::new(0, Method::DecAuto, Granularity::TargetSubword, vec![1.0, 7.0]).unwrap();
        let (s, _) = project_to_source(&dist, &links(1, 2, &[(0, 0), (0, 1)])).unwrap();
        assert_eq!(s.scores, vec![7.0]);
        let (s, _) = project_to_source(&dist, &links(2, 2, &[(0, 1), (1, 0)])).unwrap();
        assert_eq!(s.scores, vec![7.0, 1.0]);
        assert!(project_to_source(&dist, &links(2, 3, &[])).is_err());
    }

    #[test]
    fn subword_links_collapse_to_words() {
        // source units [a@@ b | c], target units [x | y@@ z]
        let a = links(3, 3, &[(0, 0), (1, 2), (2, 1)]);
        let w = a.to_words(&[0, 0, 1], &[0, 1, 1]).unwrap();
        assert_eq!((w.src_len, w.tgt_len), (2, 2));
        assert_eq!(w.links, vec![(0, 0), (0, 1), (1, 1)]);
        assert!(a.to_words(&[0, 1], &[0, 1, 1]).is_err());
    }

    proptest! {
        #[test]
        fn hard_alignment_is_row_argmax_and_monotone_invariant(
            rows in 1usize..6, cols in 1usize..6, seed in 0u64..1000
        ) {
            use rand::Rng;
            let mut rng = stage_rng(seed, "test/soft");
            let data: Vec<f64> = (0..rows * cols).map(|_| (rng.gen_range(-4i32..4) as f64) / 4.0).collect();
            let s = Mat::from_vec(rows, cols, data);
            let h = hard_alignment(&s);
            for (i, &j) in h.iter().enumerate() {
                let max = s.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let first = s.row(i).iter().position(|&v| v == max).unwrap();
                prop_assert_eq!(j, first);
            }
            let t = Mat::from_vec(rows, cols, s.data().iter().map(|v| (3.0 * v).exp() + 1.0).collect());
            prop_assert_eq!(hard_alignment(&t), h);
            let r = responsibilities(&s);
            for j in 0..cols {
                let sum: f64 = (0..rows).map(|i| r.get(i, j)).sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }
}

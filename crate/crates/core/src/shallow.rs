//! Single-hidden-layer network `W2·sigmoid(W1·x + b1) + b2`, shared by the
//! autoencoders and the alignment predictor.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::stage_rng;
use crate::seq2seq::Side;
use crate::tensor::{sigmoid, Mat};

const NET_MAGIC: &[u8; 4] = b"SNET";
const NET_VERSION: u32 = 1;

/// What a network was trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetTag {
    EncoderStates,
    DecoderStates,
    AlignmentPredictor,
}

impl NetTag {
    pub fn for_side(side: Side) -> Self {
        match side {
            Side::Encoder => NetTag::EncoderStates,
            Side::Decoder => NetTag::DecoderStates,
        }
    }

    pub fn side(self) -> Option<Side> {
        match self {
            NetTag::EncoderStates => Some(Side::Encoder),
            NetTag::DecoderStates => Some(Side::Decoder),
            NetTag::AlignmentPredictor => None,
        }
    }

    fn code(self) -> u8 {
        match self {
            NetTag::EncoderStates => 0,
            NetTag::DecoderStates => 1,
            NetTag::AlignmentPredictor => 2,
        }
    }
}

impl fmt::Display for NetTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NetTag::EncoderStates => "encoder-states",
            NetTag::DecoderStates => "decoder-states",
            NetTag::AlignmentPredictor => "alignment-predictor",
        })
    }
}

impl FromStr for NetTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder-states" => Ok(NetTag::EncoderStates),
            "decoder-states" => Ok(NetTag::DecoderStates),
            "alignment-predictor" => Ok(NetTag::AlignmentPredictor),
            _ => Err(Error::Config(format!("unknown network tag {s:?}"))),
        }
    }
}

/// Parameters are stored input-major: `w1` is `input × hidden` and `w2` is
/// `hidden × output`, so a batch of row vectors maps as `X·W1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShallowNet {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
    pub tag: NetTag,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            epochs: 20,
            batch: 64,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
        }
    }
}

pub struct Grads {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

impl ShallowNet {
    pub fn new(input: usize, hidden: usize, output: usize, tag: NetTag, seed: u64) -> Result<Self> {
        if input == 0 || hidden == 0 || output == 0 {
            return Err(Error::Config("network widths must be positive".into()));
        }
        let mut rng = stage_rng(seed, &format!("shallow/{tag}"));
        let s1 = (6.0 / (input + hidden) as f64).sqrt();
        let s2 = (6.0 / (hidden + output) as f64).sqrt();
        Ok(ShallowNet {
            w1: Mat::uniform(input, hidden, s1, &mut rng),
            b1: Mat::zeros(1, hidden),
            w2: Mat::uniform(hidden, output, s2, &mut rng),
            b2: Mat::zeros(1, output),
            tag,
            seed,
        })
    }

    pub fn input(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn output(&self) -> usize {
        self.w2.cols()
    }

    fn check_width(&self, width: usize) -> Result<()> {
        if width != self.input() {
            return Err(Error::DimensionMismatch {
                expected: self.input(),
                actual: width,
                context: "network input",
            });
        }
        Ok(())
    }

    /// Hidden activations and outputs for a batch of rows.
    pub fn forward_batch(&self, x: &Mat) -> Result<(Mat, Mat)> {
        self.check_width(x.cols())?;
        let mut h = x.matmul(&self.w1);
        h.add_row(&self.b1);
        h.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        let mut y = h.matmul(&self.w2);
        y.add_row(&self.b2);
        Ok((h, y))
    }

    pub fn forward(&self, v: &[f64]) -> Result<Vec<f64>> {
        let x = Mat::from_vec(1, v.len(), v.to_vec());
        Ok(self.forward_batch(&x)?.1.data().to_vec())
    }

    /// `mean_n ||f(x_n) - t_n||²` and its gradient.
    pub fn loss_and_grad(&self, x: &Mat, t: &Mat) -> Result<(f64, Grads)> {
        let (h, y) = self.forward_batch(x)?;
        if t.rows() != x.rows() || t.cols() != self.output() {
            return Err(Error::DimensionMismatch {
                expected: self.output(),
                actual: t.cols(),
                context: "network target",
            });
        }
        let n = x.rows() as f64;
        let mut dy = Mat::zeros(y.rows(), y.cols());
        let mut loss = 0.0;
        for ((d, &a), &b) in dy.data_mut().iter_mut().zip(y.data()).zip(t.data()) {
            let e = a - b;
            loss += e * e;
            *d = 2.0 * e / n;
        }
        let mut g = Grads {
            w1: Mat::zeros(self.w1.rows(), self.w1.cols()),
            b1: Mat::zeros(1, self.hidden()),
            w2: Mat::zeros(self.w2.rows(), self.w2.cols()),
            b2: Mat::zeros(1, self.output()),
        };
        h.t_matmul_into(&dy, &mut g.w2);
        dy.sum_rows_into(&mut g.b2);
        let mut dh = dy.matmul_t(&self.w2);
        for (d, &a) in dh.data_mut().iter_mut().zip(h.data()) {
            *d *= a * (1.0 - a);
        }
        x.t_matmul_into(&dh, &mut g.w1);
        dh.sum_rows_into(&mut g.b1);
        Ok((loss / n, g))
    }

    pub fn mean_loss(&self, x: &Mat, t: &Mat) -> Result<f64> {
        let (_, y) = self.forward_batch(x)?;
        let sq: f64 = y.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(sq / x.rows().max(1) as f64)
    }

    fn params_mut(&mut self) -> Vec<&mut Mat> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn params(&self) -> Vec<&Mat> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|m| m.is_finite())
    }

    pub fn optimizer(&self, cfg: &FitConfig) -> Optimizer {
        Optimizer::new(cfg.optimizer, cfg.lr, &self.params())
    }

    /// One pass of mini-batch descent over `(x, t)` in a shuffled order.
    /// Returns the full-data loss after the pass.
    pub fn fit_epoch(
        &mut self,
        x: &Mat,
        t: &Mat,
        cfg: &FitConfig,
        opt: &mut Optimizer,
        rng: &mut crate::rng::StageRng,
    ) -> Result<f64> {
        let mut order: Vec<usize> = (0..x.rows()).collect();
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch.max(1)) {
            let (_, g) = self.loss_and_grad(&x.select_rows(batch), &t.select_rows(batch))?;
            opt.step(self.params_mut(), &[&g.w1, &g.b1, &g.w2, &g.b2]);
        }
        let loss = self.mean_loss(x, t)?;
        if !loss.is_finite() || !self.is_finite() {
            return Err(Error::Diverged(format!(
                "{} training produced a non-finite loss",
                self.tag
            )));
        }
        Ok(loss)
    }

    /// Trains on `(x, t)` for `cfg.epochs` passes; returns the full-data loss
    /// after each pass.
    pub fn fit(&mut self, x: &Mat, t: &Mat, cfg: &FitConfig, stream: &str) -> Result<Vec<f64>> {
        if x.rows() == 0 {
            return Err(Error::EmptyInput("training rows"));
        }
        let mut rng = stage_rng(self.seed, stream);
        let mut opt = self.optimizer(cfg);
        (0..cfg.epochs)
            .map(|_| self.fit_epoch(x, t, cfg, &mut opt, &mut rng))
            .collect()
    }

    /// Layout: magic `SNET`, `u32` version, `u8` tag, `u32` input, hidden and
    /// output widths, `u64` seed, then `w1, b1, w2, b2` as `f64` LE.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut b = Vec::new();
        b.extend_from_slice(NET_MAGIC);
        b.extend_from_slice(&NET_VERSION.to_le_bytes());
        b.push(self.tag.code());
        for w in [self.input(), self.hidden(), self.output()] {
            b.extend_from_slice(&(w as u32).to_le_bytes());
        }
        b.extend_from_slice(&self.seed.to_le_bytes());
        for m in self.params() {
            for v in m.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, b).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let b = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |why: &str| Error::format(path, why.to_string());
        if b.len() < 29 || &b[..4] != NET_MAGIC {
            return Err(bad("not a network checkpoint"));
        }
        if u32::from_le_bytes(b[4..8].try_into().unwrap()) != NET_VERSION {
            return Err(bad("unsupported network checkpoint version"));
        }
        let tag = match b[8] {
            0 => NetTag::EncoderStates,
            1 => NetTag::DecoderStates,
            2 => NetTag::AlignmentPredictor,
            _ => return Err(bad("unknown network tag")),
        };
        let w = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap()) as usize;
        let (input, hidden, output) = (w(9), w(13), w(17));
        let seed = u64::from_le_bytes(b[21..29].try_into().unwrap());
        let mut net = ShallowNet::new(input, hidden, output, tag, seed)?;
        let mut values = b[29..].chunks_exact(8);
        let expected: usize = net.params().iter().map(|m| m.data().len()).sum();
        if values.len() != expected || !values.remainder().is_empty() {
            return Err(bad("parameter payload has the wrong size"));
        }
        for m in net.params_mut() {
            for v in m.data_mut() {
                *v = f64::from_le_bytes(values.next().unwrap().try_into().unwrap());
            }
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn perturbed(input: usize, hidden: usize, output: usize) -> ShallowNet {
        let mut n = ShallowNet::new(input, hidden, output, NetTag::AlignmentPredictor, 3).unwrap();
        let mut rng = stage_rng(4, "test/perturb");
        for m in n.params_mut() {
            for v in m.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        n
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut net = perturbed(5, 4, 3);
        let mut rng = stage_rng(5, "test/data");
        let x = Mat::uniform(6, 5, 1.0, &mut rng);
        let t = Mat::uniform(6, 3, 1.0, &mut rng);
        let (_, g) = net.loss_and_grad(&x, &t).unwrap();
        let grads = [g.w1, g.b1, g.w2, g.b2];
        let eps = 1e-6;
        for (pi, gm) in grads.iter().enumerate() {
            for k in 0..gm.data().len() {
                let orig = net.params()[pi].data()[k];
                net.params_mut()[pi].data_mut()[k] = orig + eps;
                let lp = net.mean_loss(&x, &t).unwrap();
                net.params_mut()[pi].data_mut()[k] = orig - eps;
                let lm = net.mean_loss(&x, &t).unwrap();
                net.params_mut()[pi].data_mut()[k] = orig;
                let num = (lp - lm) / (2.0 * eps);
                let a = gm.data()[k];
                let rel = (num - a).abs() / num.abs().max(a.abs()).max(1e-8);
                assert!(rel < 1e-4, "param {pi}[{k}]: {num} vs {a}");
            }
        }
    }

    #[test]
    fn forward_matches_straight_line_formula() {
        let net = perturbed(4, 3, 2);
        let mut rng = stage_rng(6, "test/inputs");
        for _ in 0..100 {
            let v: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut expect = vec![0.0; 2];
            for (o, e) in expect.iter_mut().enumerate() {
                let mut acc = net.b2.get(0, o);
                for h in 0..3 {
                    let mut z = net.b1.get(0, h);
                    for (i, &vi) in v.iter().enumerate() {
                        z += net.w1.get(i, h) * vi;
                    }
                    acc += net.w2.get(h, o) / (1.0 + (-z).exp());
                }
                *e = acc;
            }
            let got = net.forward(&v).unwrap();
            for (a, b) in got.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_and_constant_networks() {
        let mut net = ShallowNet::new(3, 2, 3, NetTag::EncoderStates, 1).unwrap();
        net.params_mut().into_iter().for_each(|m| m.fill(0.0));
        assert_eq!(net.forward(&[1.0, -2.0, 5.0]).unwrap(), vec![0.0; 3]);
        net.w2.fill(0.7);
        // sigmoid(0) = 0.5 on both hidden units: 0.7 · (0.5 + 0.5).
        for v in [[1.0, 2.0, 3.0], [-4.0, 0.0, 9.0]] {
            for o in net.forward(&v).unwrap() {
                assert!((o - 0.7).abs() < 1e-12);
            }
        }
        assert!(net.forward(&[1.0]).is_err());
    }

    #[test]
    fn fit_is_deterministic_and_checkpoints_round_trip() {
        let mut rng = stage_rng(7, "test/data");
        let x = Mat::uniform(50, 4, 1.0, &mut rng);
        let cfg = FitConfig {
            epochs: 5,
            batch: 8,
            ..FitConfig::default()
        };
        let mut a = ShallowNet::new(4, 2, 4, NetTag::EncoderStates, 9).unwrap();
        let mut b = a.clone();
        let la = a.fit(&x, &x, &cfg, "fit").unwrap();
        let lb = b.fit(&x, &x, &cfg, "fit").unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.net");
        a.save(&p).unwrap();
        assert_eq!(ShallowNet::load(&p).unwrap(), a);
    }
}

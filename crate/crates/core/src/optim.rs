//! First-order optimisers over flat lists of parameter tensors.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::Config(format!("unknown optimizer {s:?}"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

/// Fixed step size; Adam keeps per-parameter moment estimates.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.98;
const ADAM_EPS: f64 = 1e-9;

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, shapes: &[&Mat]) -> Self {
        let zeros = || shapes.iter().map(|m| Mat::zeros(m.rows(), m.cols())).collect();
        let (m, v) = match kind {
            OptimizerKind::Adam => (zeros(), zeros()),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Optimizer { kind, lr, m, v, t: 0 }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: Vec<&mut Mat>, grads: &[&Mat]) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= self.lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                let c1 = 1.0 - BETA1.powi(self.t);
                let c2 = 1.0 - BETA2.powi(self.t);
                for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
                    let m = self.m[i].data_mut();
                    let v = self.v[i].data_mut();
                    for (k, (w, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[k] = BETA1 * m[k] + (1.0 - BETA1) * d;
                        v[k] = BETA2 * v[k] + (1.0 - BETA2) * d * d;
                        let mh = m[k] / c1;
                        let vh = v[k] / c2;
                        *w -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

/// Rescales the gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: Vec<&mut Mat>, max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            g.scale(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_optimisers_descend_a_quadratic() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut x = Mat::from_vec(1, 2, vec![3.0, -2.0]);
            let mut opt = Optimizer::new(kind, 0.05, &[&x]);
            for _ in 0..500 {
                let g = Mat::from_vec(1, 2, x.data().iter().map(|v| 2.0 * v).collect());
                opt.step(vec![&mut x], &[&g]);
            }
            assert!(x.sq_norm() < 1e-3, "{kind}: {:?}", x.data());
        }
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut a = Mat::from_vec(1, 2, vec![3.0, 4.0]);
        let n = clip_grad_norm(vec![&mut a], 1.0);
        assert_eq!(n, 5.0);
        assert!((a.sq_norm().sqrt() - 1.0).abs() < 1e-12);
    }
}

//! Autoencoders over hidden states: reconstruction distance and posteriors
//! computed from reconstructed states.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seq2seq::{Seq2Seq, Side, StateMatrix};
use crate::shallow::{FitConfig, NetTag, ShallowNet};
use crate::similarity::{Granularity, Method, ScoreSequence};
use crate::tensor::{l2_distance, Mat};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeConfig {
    /// Hidden width; `None` means half the state width.
    pub bottleneck: Option<usize>,
    pub fit: FitConfig,
    pub seed: u64,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig {
            bottleneck: None,
            fit: FitConfig::default(),
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeReport {
    /// Mean squared reconstruction error over all rows after each epoch.
    pub epoch_loss: Vec<f64>,
}

impl AeReport {
    pub fn final_mse(&self) -> f64 {
        self.epoch_loss.last().copied().unwrap_or(f64::NAN)
    }
}

fn stack_rows(states: &[StateMatrix]) -> Result<Mat> {
    let dim = states.first().map_or(0, StateMatrix::dim);
    let mut data = Vec::new();
    for s in states {
        if s.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: s.dim(),
                context: "state record width",
            });
        }
        data.extend(s.data().iter().map(|&v| f64::from(v)));
    }
    if data.is_empty() {
        return Err(Error::EmptyInput("state records"));
    }
    Ok(Mat::from_vec(data.len() / dim, dim, data))
}

/// Trains an autoencoder on every individual row of the given states.
pub fn train_autoencoder(states: &[StateMatrix], cfg: &AeConfig) -> Result<(ShallowNet, AeReport)> {
    let x = stack_rows(states)?;
    let side = states[0].side;
    if states.iter().any(|s| s.side != side) {
        return Err(Error::SideMismatch {
            trained: side.to_string(),
            input: "mixed".into(),
        });
    }
    let bottleneck = cfg.bottleneck.unwrap_or((x.cols() / 2).max(1));
    if bottleneck == 0 {
        return Err(Error::Config("bottleneck must be at least 1".into()));
    }
    let mut net = ShallowNet::new(x.cols(), bottleneck, x.cols(), NetTag::for_side(side), cfg.seed)?;
    let epoch_loss = net.fit(&x, &x, &cfg.fit, "autoenc/shuffle")?;
    Ok((net, AeReport { epoch_loss }))
}

/// Anything that maps a state vector to a same-width reconstruction.
pub trait Reconstructor {
    fn width(&self) -> Option<usize>;
    fn side(&self) -> Option<Side>;
    fn reconstruct(&self, v: &[f64]) -> Result<Vec<f64>>;
}

impl Reconstructor for ShallowNet {
    fn width(&self) -> Option<usize> {
        Some(self.input())
    }

    fn side(&self) -> Option<Side> {
        self.tag.side()
    }

    fn reconstruct(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.forward(v)
    }
}

/// Returns its input unchanged.
pub struct Identity;

impl Reconstructor for Identity {
    fn width(&self) -> Option<usize> {
        None
    }

    fn side(&self) -> Option<Side> {
        None
    }

    fn reconstruct(&self, v: &[f64]) -> Result<Vec<f64>> {
        Ok(v.to_vec())
    }
}

pub fn reconstruct(net: &ShallowNet, v: &[f64]) -> Result<Vec<f64>> {
    net.forward(v)
}

fn check_compatible<R: Reconstructor + ?Sized>(ae: &R, side: Side, width: usize) -> Result<()> {
    if let Some(s) = ae.side() {
        if s != side {
            return Err(Error::SideMismatch {
                trained: s.to_string(),
                input: side.to_string(),
            });
        }
    }
    if let Some(w) = ae.width() {
        if w != width {
            return Err(Error::DimensionMismatch {
                expected: w,
                actual: width,
                context: "autoencoder input",
            });
        }
    }
    Ok(())
}

/// `L2(m_i, Auto(m_i))` per row; encoder rows give source-unit scores and
/// decoder rows target-unit scores.
pub fn recon_distance(net: &ShallowNet, m: &StateMatrix) -> Result<ScoreSequence> {
    check_compatible(net, m.side, m.dim())?;
    let x = m.to_mat();
    let (_, y) = net.forward_batch(&x)?;
    let scores = (0..x.rows()).map(|i| l2_distance(x.row(i), y.row(i))).collect();
    let (method, granularity) = match m.side {
        Side::Encoder => (Method::EncAuto, Granularity::SourceSubword),
        Side::Decoder => (Method::DecAuto, Granularity::TargetSubword),
    };
    ScoreSequence::new(m.sentence_id, method, granularity, scores)
}

/// `softmax(FF(Auto(d_i)))[y_i]` with teacher-forced decoder states.
pub fn combined_posterior_dec<R: Reconstructor + ?Sized>(
    model: &Seq2Seq,
    ae: &R,
    e: &StateMatrix,
    target: &[usize],
) -> Result<ScoreSequence> {
    check_compatible(ae, Side::Decoder, model.d())?;
    let (d, _) = model.decode_forced_ids(e, e.sentence_id, target)?;
    let probs = (0..d.rows())
        .map(|i| Ok(model.distribution(&ae.reconstruct(&d.row_f64(i))?)[target[i]]))
        .collect::<Result<Vec<_>>>()?;
    ScoreSequence::new(e.sentence_id, Method::DecAutoProb, Granularity::TargetSubword, probs)
}

/// Posteriors of the decoder re-run on row-wise reconstructed encoder states.
pub fn combined_posterior_enc<R: Reconstructor + ?Sized>(
    model: &Seq2Seq,
    ae: &R,
    e: &StateMatrix,
    target: &[usize],
) -> Result<ScoreSequence> {
    check_compatible(ae, Side::Encoder, e.dim())?;
    let mut rows = Vec::with_capacity(e.rows() * e.dim());
    for i in 0..e.rows() {
        rows.extend(ae.reconstruct(&e.row_f64(i))?);
    }
    let recon = StateMatrix::from_mat(Side::Encoder, e.sentence_id, &Mat::from_vec(e.rows(), e.dim(), rows))?;
    let (_, post) = model.decode_forced_ids(&recon, e.sentence_id, target)?;
    ScoreSequence::new(
        e.sentence_id,
        Method::EncAutoProb,
        Granularity::TargetSubword,
        post.probs,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seq2seq::{ModelConfig, Vocab};
    use crate::shallow::NetTag;

    fn model() -> Seq2Seq {
        let cfg = ModelConfig {
            d: 16,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            ff_hidden: 16,
            max_len: 20,
            seed: 3,
        };
        Seq2Seq::new(cfg, Vocab::new((0..8).map(|i| format!("u{i}")))).unwrap()
    }

    #[test]
    fn identity_reconstruction_gives_plain_posteriors_exactly() {
        let m = model();
        let e = m.encode_ids_checked(0, &[3, 4, 5, 6]).unwrap();
        let target = [4, 5, 9, 3];
        let (_, plain) = m.decode_forced_ids(&e, 0, &target).unwrap();
        let dec = combined_posterior_dec(&m, &Identity, &e, &target).unwrap();
        let enc = combined_posterior_enc(&m, &Identity, &e, &target).unwrap();
        assert_eq!(dec.scores, plain.probs);
        assert_eq!(enc.scores, plain.probs);
        assert_eq!(enc.len(), target.len());
    }

    #[test]
    fn recon_distance_examples() {
        let mut net = ShallowNet::new(4, 2, 4, NetTag::EncoderStates, 1).unwrap();
        net.w1.fill(0.0);
        net.w2.fill(0.0);
        let m = StateMatrix::new(Side::Encoder, 0, 4, vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        assert_eq!(recon_distance(&net, &m).unwrap().scores, vec![5.0]);
        let dec = StateMatrix::new(Side::Decoder, 0, 4, vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        assert!(matches!(recon_distance(&net, &dec), Err(Error::SideMismatch { .. })));
        let narrow = StateMatrix::new(Side::Encoder, 0, 2, vec![3.0, 4.0]).unwrap();
        assert!(recon_distance(&net, &narrow).is_err());
    }

    #[test]
    fn single_repeated_vector_is_memorised() {
        let v: Vec<f32> = (0..6).map(|i| i as f32 * 0.3 - 0.7).collect();
        let states: Vec<StateMatrix> = (0..64)
            .map(|id| StateMatrix::new(Side::Decoder, id, 6, v.clone()).unwrap())
            .collect();
        let cfg = AeConfig {
            bottleneck: Some(6),
            fit: FitConfig {
                epochs: 300,
                batch: 16,
                lr: 1e-3,
                ..FitConfig::default()
            },
            seed: 2,
        };
        let (net, report) = train_autoencoder(&states, &cfg).unwrap();
        let err = recon_distance(&net, &states[0]).unwrap().scores[0];
        assert!(err < 1e-3, "{err}");
        assert!(report.final_mse() < 1e-6);
        let (again, _) = train_autoencoder(&states, &cfg).unwrap();
        assert_eq!(again, net);
    }

    #[test]
    fn epoch_losses_do_not_increase() {
        let m = model();
        let states: Vec<StateMatrix> = (0..40u32)
            .map(|i| {
                let ids: Vec<usize> = (0..3 + i as usize % 4).map(|k| 3 + (k * 5 + i as usize) % 8).collect();
                m.encode_ids_checked(i, &ids).unwrap()
            })
            .collect();
        let (_, report) = train_autoencoder(&states, &AeConfig::default()).unwrap();
        for w in report.epoch_loss.windows(2) {
            assert!(w[1] <= w[0], "{:?}", report.epoch_loss);
        }
    }
}

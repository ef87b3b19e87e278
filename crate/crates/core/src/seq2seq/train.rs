//! Mini-batch training, checkpoints and state dumps.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, Seq2Seq, Vocab};
use super::states::{write_hsd, Side, StateMatrix};
use crate::config::KvConfig;
use crate::corpus::{segment, ParallelCorpus, SentencePair, SplitName};
use crate::error::{Error, Result};
use crate::optim::{clip_grad_norm, Optimizer, OptimizerKind};
use crate::rng::stage_rng;

const CHECKPOINT_MAGIC: &[u8; 4] = b"S2SM";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub clip: f64,
    /// Decay the step size linearly to zero over the run.
    pub decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            batch: 32,
            lr: 3e-3,
            optimizer: OptimizerKind::Adam,
            clip: 1.0,
            decay: true,
        }
    }
}

impl TrainConfig {
    pub fn from_config(c: &KvConfig) -> Result<Self> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            epochs: c.get_or("epochs", d.epochs)?,
            batch: c.get_or("batch", d.batch)?,
            lr: c.get_or("lr", d.lr)?,
            optimizer: c.get_or("optimizer", d.optimizer)?,
            clip: c.get_or("clip", d.clip)?,
            decay: c.get_or("decay", d.decay)?,
        };
        if cfg.batch == 0 || !(cfg.lr > 0.0) {
            return Err(Error::Config("batch must be positive and lr > 0".into()));
        }
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-token training cross-entropy of each epoch.
    pub epoch_loss: Vec<f64>,
    /// Teacher-forced per-token cross-entropy on the dev split after training.
    pub dev_xent: f64,
    pub steps: usize,
}

/// Source and target unit ids of a sentence pair.
pub fn pair_ids(model: &Seq2Seq, corpus: &ParallelCorpus, pair: &SentencePair) -> (Vec<usize>, Vec<usize>) {
    (
        model.vocab.encode(&segment(&pair.source, &corpus.table)),
        model.vocab.encode(&segment(&pair.target, &corpus.table)),
    )
}

/// Mean per-token teacher-forced cross-entropy.
pub fn cross_entropy(model: &Seq2Seq, data: &[(Vec<usize>, Vec<usize>)]) -> f64 {
    let (mut loss, mut n) = (0.0, 0);
    for (s, t) in data {
        let (l, k) = model.example_loss(s, t, 1.0, None);
        loss += l;
        n += k;
    }
    loss / n.max(1) as f64
}

/// Trains a fresh model on the corpus training split.
pub fn train(corpus: &ParallelCorpus, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<(Seq2Seq, TrainReport)> {
    let model = Seq2Seq::new(model_cfg.clone(), Vocab::new(corpus.unit_inventory()))?;
    let encode = |split: SplitName| -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
        corpus
            .split(split)
            .iter()
            .map(|p| {
                let (s, t) = pair_ids(&model, corpus, p);
                model.check_len(s.len().max(t.len() + 1))?;
                Ok((s, t))
            })
            .collect()
    };
    let train_data = encode(SplitName::Train)?;
    let dev_data = encode(SplitName::Dev)?;
    train_on(model, &train_data, &dev_data, cfg)
}

pub fn train_on(
    mut model: Seq2Seq,
    train_data: &[(Vec<usize>, Vec<usize>)],
    dev_data: &[(Vec<usize>, Vec<usize>)],
    cfg: &TrainConfig,
) -> Result<(Seq2Seq, TrainReport)> {
    if train_data.is_empty() {
        return Err(Error::EmptyInput("training data"));
    }
    let mut rng = stage_rng(model.config.seed, "model/shuffle");
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, &model.weights.tensors());
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    let total_steps = cfg.epochs * train_data.len().div_ceil(cfg.batch);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch) {
            let tokens: usize = batch.iter().map(|&i| train_data[i].1.len() + 1).sum();
            let w = 1.0 / tokens as f64;
            let mut grads = model.weights.zeros_like();
            let mut batch_loss = 0.0;
            for &i in batch {
                let (s, t) = &train_data[i];
                batch_loss += model.example_loss(s, t, w, Some(&mut grads)).0;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss at epoch {epoch}, step {steps}"
                )));
            }
            total += batch_loss;
            count += tokens;
            clip_grad_norm(grads.tensors_mut(), cfg.clip);
            if cfg.decay {
                opt.set_lr(cfg.lr * (1.0 - steps as f64 / total_steps as f64));
            }
            opt.step(model.weights.tensors_mut(), &grads.tensors());
            steps += 1;
        }
        if !model.weights.is_finite() {
            return Err(Error::Diverged(format!("non-finite weights after epoch {epoch}")));
        }
        epoch_loss.push(total / count as f64);
    }
    let dev_xent = cross_entropy(&model, dev_data);
    Ok((
        model,
        TrainReport {
            epoch_loss,
            dev_xent,
            steps,
        },
    ))
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    vocab: Vocab,
    shapes: Vec<(usize, usize)>,
}

impl Seq2Seq {
    /// Layout: magic `S2SM`, `u32` version, `u32` header length, JSON header
    /// (config, vocabulary, tensor shapes), then every parameter as `f64` LE.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            shapes: self.weights.tensors().iter().map(|t| (t.rows(), t.cols())).collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::format(path, e.to_string()))?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(json.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        for t in self.weights.tensors() {
            for v in t.data() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "not a model checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes
            .get(12..12 + hlen)
            .ok_or_else(|| Error::format(path, "truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| Error::format(path, e.to_string()))?;
        let mut model = Seq2Seq::new(header.config, header.vocab.rebuild_index())?;
        let shapes: Vec<(usize, usize)> = model.weights.tensors().iter().map(|t| (t.rows(), t.cols())).collect();
        if shapes != header.shapes {
            return Err(Error::format(path, "tensor shapes disagree with the configuration"));
        }
        let mut values = bytes[12 + hlen..].chunks_exact(8);
        let expected: usize = shapes.iter().map(|(r, c)| r * c).sum();
        if values.len() != expected || !values.remainder().is_empty() {
            return Err(Error::format(path, "parameter payload has the wrong size"));
        }
        for t in model.weights.tensors_mut() {
            for v in t.data_mut() {
                *v = f64::from_le_bytes(values.next().unwrap().try_into().unwrap());
            }
        }
        Ok(model)
    }
}

/// Top-layer states of every sentence of a split, in corpus order. Decoder
/// states come from teacher forcing on the reference target.
pub fn collect_states(
    model: &Seq2Seq,
    corpus: &ParallelCorpus,
    split: SplitName,
    side: Side,
) -> Result<Vec<StateMatrix>> {
    corpus
        .split(split)
        .iter()
        .map(|p| {
            let (s, t) = pair_ids(model, corpus, p);
            let e = model.encode_ids_checked(p.id(), &s)?;
            match side {
                Side::Encoder => Ok(e),
                Side::Decoder => Ok(model.decode_forced_ids(&e, p.id(), &t)?.0),
            }
        })
        .collect()
}

pub fn dump_states(
    model: &Seq2Seq,
    corpus: &ParallelCorpus,
    split: SplitName,
    side: Side,
    path: &Path,
) -> Result<usize> {
    let states = collect_states(model, corpus, split, side)?;
    write_hsd(path, model.d(), &states)?;
    Ok(states.len())
}

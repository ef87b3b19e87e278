//! Encoder-decoder Transformer (pre-LayerNorm) with a manual backward pass.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Attention, AttnCache, FeedForward, FfCache, LayerNorm, Linear, LnCache};
use crate::config::KvConfig;
use crate::corpus::SubwordSequence;
use crate::error::{Error, Result};
use crate::rng::stage_rng;
use crate::tensor::{log_softmax, softmax, Mat};

pub const UNK: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
const SPECIALS: [&str; 3] = ["<unk>", "<s>", "</s>"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            ff_hidden: 128,
            max_len: 64,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn from_config(c: &KvConfig) -> Result<Self> {
        let d = ModelConfig::default();
        let layers: Option<usize> = c.get("layers")?;
        let cfg = ModelConfig {
            d: c.get_or("d", d.d)?,
            enc_layers: c.get_or("enc_layers", layers.unwrap_or(d.enc_layers))?,
            dec_layers: c.get_or("dec_layers", layers.unwrap_or(d.dec_layers))?,
            heads: c.get_or("heads", d.heads)?,
            ff_hidden: c.get_or("ff_hidden", d.ff_hidden)?,
            max_len: c.get_or("max_len", d.max_len)?,
            seed: c.get_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "state width {} must be a positive multiple of the head count {}",
                self.d, self.heads
            )));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 || self.ff_hidden == 0 || self.max_len < 2 {
            return Err(Error::Config(
                "layer counts, ff width and max_len must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Shared source/target vocabulary of subword units.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    units: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(units: impl IntoIterator<Item = String>) -> Self {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for u in units {
            if !all.contains(&u) {
                all.push(u);
            }
        }
        Self::from_full(all)
    }

    fn from_full(units: Vec<String>) -> Self {
        let index = units.iter().enumerate().map(|(i, u)| (u.clone(), i)).collect();
        Vocab { units, index }
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn id(&self, unit: &str) -> usize {
        self.index.get(unit).copied().unwrap_or(UNK)
    }

    pub fn unit(&self, id: usize) -> &str {
        self.units.get(id).map_or(SPECIALS[UNK], String::as_str)
    }

    pub fn encode(&self, s: &SubwordSequence) -> Vec<usize> {
        s.units.iter().map(|u| self.id(u)).collect()
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    pub(crate) fn rebuild_index(self) -> Self {
        Self::from_full(self.units)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub self_attn: Attention,
    pub ln2: LayerNorm,
    pub cross: Attention,
    pub ln3: LayerNorm,
    pub ff: FeedForward,
}

/// All trainable tensors. Gradients and optimiser state reuse this shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub embed: Mat,
    pub enc: Vec<EncoderLayer>,
    pub enc_ln: LayerNorm,
    pub dec: Vec<DecoderLayer>,
    pub dec_ln: LayerNorm,
    /// The output projection `FF`.
    pub out: Linear,
}

impl Weights {
    fn init<R: Rng>(c: &ModelConfig, vocab: usize, rng: &mut R) -> Self {
        let d = c.d;
        let embed = Mat::uniform(vocab, d, (3.0 / d as f64).sqrt(), rng);
        let enc = (0..c.enc_layers)
            .map(|_| EncoderLayer {
                ln1: LayerNorm::new(d),
                attn: Attention::new(d, c.heads, rng),
                ln2: LayerNorm::new(d),
                ff: FeedForward::new(d, c.ff_hidden, rng),
            })
            .collect();
        let dec = (0..c.dec_layers)
            .map(|_| DecoderLayer {
                ln1: LayerNorm::new(d),
                self_attn: Attention::new(d, c.heads, rng),
                ln2: LayerNorm::new(d),
                cross: Attention::new(d, c.heads, rng),
                ln3: LayerNorm::new(d),
                ff: FeedForward::new(d, c.ff_hidden, rng),
            })
            .collect();
        // Small output weights keep the untrained softmax close to uniform.
        let out = Linear::with_scale(d, vocab, 0.02, rng);
        Weights {
            embed,
            enc,
            enc_ln: LayerNorm::new(d),
            dec,
            dec_ln: LayerNorm::new(d),
            out,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Weights {
            embed: Mat::zeros(self.embed.rows(), self.embed.cols()),
            enc: self
                .enc
                .iter()
                .map(|l| EncoderLayer {
                    ln1: l.ln1.zeros_like(),
                    attn: l.attn.zeros_like(),
                    ln2: l.ln2.zeros_like(),
                    ff: l.ff.zeros_like(),
                })
                .collect(),
            enc_ln: self.enc_ln.zeros_like(),
            dec: self
                .dec
                .iter()
                .map(|l| DecoderLayer {
                    ln1: l.ln1.zeros_like(),
                    self_attn: l.self_attn.zeros_like(),
                    ln2: l.ln2.zeros_like(),
                    cross: l.cross.zeros_like(),
                    ln3: l.ln3.zeros_like(),
                    ff: l.ff.zeros_like(),
                })
                .collect(),
            dec_ln: self.dec_ln.zeros_like(),
            out: self.out.zeros_like(),
        }
    }

    /// Every tensor in a fixed order (checkpoint and optimiser order).
    pub fn tensors(&self) -> Vec<&Mat> {
        let mut out = vec![&self.embed];
        for l in &self.enc {
            out.extend(l.ln1.tensors());
            out.extend(l.attn.tensors());
            out.extend(l.ln2.tensors());
            out.extend(l.ff.tensors());
        }
        out.extend(self.enc_ln.tensors());
        for l in &self.dec {
            out.extend(l.ln1.tensors());
            out.extend(l.self_attn.tensors());
            out.extend(l.ln2.tensors());
            out.extend(l.cross.tensors());
            out.extend(l.ln3.tensors());
            out.extend(l.ff.tensors());
        }
        out.extend(self.dec_ln.tensors());
        out.extend(self.out.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = vec![&mut self.embed];
        for l in &mut self.enc {
            out.extend(l.ln1.tensors_mut());
            out.extend(l.attn.tensors_mut());
            out.extend(l.ln2.tensors_mut());
            out.extend(l.ff.tensors_mut());
        }
        out.extend(self.enc_ln.tensors_mut());
        for l in &mut self.dec {
            out.extend(l.ln1.tensors_mut());
            out.extend(l.self_attn.tensors_mut());
            out.extend(l.ln2.tensors_mut());
            out.extend(l.cross.tensors_mut());
            out.extend(l.ln3.tensors_mut());
            out.extend(l.ff.tensors_mut());
        }
        out.extend(self.dec_ln.tensors_mut());
        out.extend(self.out.tensors_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data().len()).sum()
    }

    pub fn add_assign(&mut self, other: &Weights) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.scale(s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// The trained encoder-decoder together with its configuration and vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Seq2Seq {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub weights: Weights,
}

struct EncLayerCache {
    ln1: LnCache,
    attn: AttnCache,
    ln2: LnCache,
    ff: FfCache,
}

pub(crate) struct EncCache {
    tokens: Vec<usize>,
    layers: Vec<EncLayerCache>,
    ln: LnCache,
}

struct DecLayerCache {
    ln1: LnCache,
    self_attn: AttnCache,
    ln2: LnCache,
    cross: AttnCache,
    ln3: LnCache,
    ff: FfCache,
}

pub(crate) struct DecCache {
    tokens: Vec<usize>,
    layers: Vec<DecLayerCache>,
    ln: LnCache,
}

/// Cross-attention keys and values of an encoder memory, one pair per
/// decoder layer.
pub struct Memory {
    kv: Vec<(Mat, Mat)>,
}

/// Self-attention keys and values of an incrementally decoded prefix.
#[derive(Clone, Debug)]
pub struct DecoderPrefix {
    kv: Vec<(Mat, Mat)>,
}

impl DecoderPrefix {
    pub fn len(&self) -> usize {
        self.kv.first().map_or(0, |(k, _)| k.rows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn positional_encoding(len: usize, d: usize) -> Mat {
    let mut pe = Mat::zeros(len, d);
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            pe.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}

impl Seq2Seq {
    pub fn new(config: ModelConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let mut rng = stage_rng(config.seed, "model/init");
        let weights = Weights::init(&config, vocab.len(), &mut rng);
        Ok(Seq2Seq { config, vocab, weights })
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    fn embed(&self, tokens: &[usize]) -> Mat {
        let d = self.config.d;
        let scale = (d as f64).sqrt();
        let mut x = positional_encoding(tokens.len(), d);
        for (i, &t) in tokens.iter().enumerate() {
            let e = self.weights.embed.row(t);
            for (o, &v) in x.row_mut(i).iter_mut().zip(e) {
                *o += v * scale;
            }
        }
        x
    }

    fn embed_backward(&self, tokens: &[usize], dx: &Mat, g: &mut Weights) {
        let scale = (self.config.d as f64).sqrt();
        for (i, &t) in tokens.iter().enumerate() {
            for (o, &v) in g.embed.row_mut(t).iter_mut().zip(dx.row(i)) {
                *o += v * scale;
            }
        }
    }

    pub(crate) fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_len {
            return Err(Error::TooLong {
                len,
                max: self.config.max_len,
            });
        }
        Ok(())
    }

    pub(crate) fn encoder_forward(&self, src: &[usize]) -> (Mat, EncCache) {
        let mut x = self.embed(src);
        let mut layers = Vec::with_capacity(self.weights.enc.len());
        for l in &self.weights.enc {
            let (a, ln1) = l.ln1.forward(&x);
            let (s, attn) = l.attn.forward(&a, &a, false);
            x.add_assign(&s);
            let (b, ln2) = l.ln2.forward(&x);
            let (f, ff) = l.ff.forward(&b);
            x.add_assign(&f);
            layers.push(EncLayerCache { ln1, attn, ln2, ff });
        }
        let (e, ln) = self.weights.enc_ln.forward(&x);
        (
            e,
            EncCache {
                tokens: src.to_vec(),
                layers,
                ln,
            },
        )
    }

    pub(crate) fn encoder_backward(&self, c: &EncCache, de: &Mat, g: &mut Weights) {
        let mut dx = self.weights.enc_ln.backward(&c.ln, de, &mut g.enc_ln);
        for (i, l) in self.weights.enc.iter().enumerate().rev() {
            let lc = &c.layers[i];
            let gl = &mut g.enc[i];
            let db = l.ff.backward(&lc.ff, &dx, &mut gl.ff);
            dx.add_assign(&l.ln2.backward(&lc.ln2, &db, &mut gl.ln2));
            let (daq, dakv) = l.attn.backward(&lc.attn, &dx, &mut gl.attn);
            let mut da = daq;
            da.add_assign(&dakv);
            dx.add_assign(&l.ln1.backward(&lc.ln1, &da, &mut gl.ln1));
        }
        self.embed_backward(&c.tokens, &dx, g);
    }

    pub(crate) fn decoder_forward(&self, inputs: &[usize], mem: &Mat) -> (Mat, DecCache) {
        let mut x = self.embed(inputs);
        let mut layers = Vec::with_capacity(self.weights.dec.len());
        for l in &self.weights.dec {
            let (a, ln1) = l.ln1.forward(&x);
            let (s, self_attn) = l.self_attn.forward(&a, &a, true);
            x.add_assign(&s);
            let (b, ln2) = l.ln2.forward(&x);
            let (cr, cross) = l.cross.forward(&b, mem, false);
            x.add_assign(&cr);
            let (e, ln3) = l.ln3.forward(&x);
            let (f, ff) = l.ff.forward(&e);
            x.add_assign(&f);
            layers.push(DecLayerCache {
                ln1,
                self_attn,
                ln2,
                cross,
                ln3,
                ff,
            });
        }
        let (d, ln) = self.weights.dec_ln.forward(&x);
        (
            d,
            DecCache {
                tokens: inputs.to_vec(),
                layers,
                ln,
            },
        )
    }

    /// Returns the gradient with respect to the encoder memory.
    pub(crate) fn decoder_backward(&self, c: &DecCache, dd: &Mat, mem_rows: usize, g: &mut Weights) -> Mat {
        let mut dmem = Mat::zeros(mem_rows, self.config.d);
        let mut dx = self.weights.dec_ln.backward(&c.ln, dd, &mut g.dec_ln);
        for (i, l) in self.weights.dec.iter().enumerate().rev() {
            let lc = &c.layers[i];
            let gl = &mut g.dec[i];
            let de = l.ff.backward(&lc.ff, &dx, &mut gl.ff);
            dx.add_assign(&l.ln3.backward(&lc.ln3, &de, &mut gl.ln3));
            let (db, dm) = l.cross.backward(&lc.cross, &dx, &mut gl.cross);
            dmem.add_assign(&dm);
            dx.add_assign(&l.ln2.backward(&lc.ln2, &db, &mut gl.ln2));
            let (daq, dakv) = l.self_attn.backward(&lc.self_attn, &dx, &mut gl.self_attn);
            let mut da = daq;
            da.add_assign(&dakv);
            dx.add_assign(&l.ln1.backward(&lc.ln1, &da, &mut gl.ln1));
        }
        self.embed_backward(&c.tokens, &dx, g);
        dmem
    }

    fn teacher_inputs(target: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let mut inputs = Vec::with_capacity(target.len() + 1);
        inputs.push(BOS);
        inputs.extend_from_slice(target);
        let mut gold = target.to_vec();
        gold.push(EOS);
        (inputs, gold)
    }

    /// Summed cross-entropy of one pair (end-of-sequence included) and the
    /// number of predicted tokens. Gradients of `weight * loss` are
    /// accumulated into `g` when given.
    pub fn example_loss(&self, src: &[usize], target: &[usize], weight: f64, g: Option<&mut Weights>) -> (f64, usize) {
        let (e, enc_cache) = self.encoder_forward(src);
        let (inputs, gold) = Self::teacher_inputs(target);
        let (d, dec_cache) = self.decoder_forward(&inputs, &e);
        let logits = self.weights.out.forward(&d);
        let mut loss = 0.0;
        let mut dlogits = Mat::zeros(logits.rows(), logits.cols());
        for (i, &y) in gold.iter().enumerate() {
            let lp = log_softmax(logits.row(i));
            loss -= lp[y];
            let row = dlogits.row_mut(i);
            for (o, l) in row.iter_mut().zip(&lp) {
                *o = l.exp() * weight;
            }
            row[y] -= weight;
        }
        if let Some(g) = g {
            let dd = self.weights.out.backward(&d, &dlogits, &mut g.out);
            let dmem = self.decoder_backward(&dec_cache, &dd, e.rows(), g);
            self.encoder_backward(&enc_cache, &dmem, g);
        }
        (loss, gold.len())
    }

    /// Top-layer encoder states in full precision.
    pub fn encode_ids(&self, src: &[usize]) -> Mat {
        self.encoder_forward(src).0
    }

    pub fn memory(&self, e: &Mat) -> Memory {
        Memory {
            kv: self.weights.dec.iter().map(|l| l.cross.project_kv(e)).collect(),
        }
    }

    /// Top-layer decoder states for every input position. Row `i` depends
    /// only on inputs `0..=i`, bit for bit.
    pub fn decoder_states(&self, inputs: &[usize], mem: &Memory) -> Mat {
        let mut x = self.embed(inputs);
        for (l, (k, v)) in self.weights.dec.iter().zip(&mem.kv) {
            let (a, _) = l.ln1.forward(&x);
            let (sk, sv) = l.self_attn.project_kv(&a);
            x.add_assign(&l.self_attn.forward_kv(&a, &sk, &sv, true));
            let (b, _) = l.ln2.forward(&x);
            x.add_assign(&l.cross.forward_kv(&b, k, v, false));
            let (e, _) = l.ln3.forward(&x);
            x.add_assign(&l.ff.infer(&e));
        }
        self.weights.dec_ln.forward(&x).0
    }

    pub fn empty_prefix(&self) -> DecoderPrefix {
        let d = self.config.d;
        DecoderPrefix {
            kv: (0..self.weights.dec.len())
                .map(|_| (Mat::zeros(0, d), Mat::zeros(0, d)))
                .collect(),
        }
    }

    /// Feeds one more input token and returns its top-layer decoder state.
    /// Identical, bit for bit, to the matching row of [`Self::decoder_states`].
    pub fn decoder_step(&self, prefix: &mut DecoderPrefix, token: usize, mem: &Memory) -> Vec<f64> {
        let d = self.config.d;
        let pos = prefix.len();
        let scale = (d as f64).sqrt();
        let pe = positional_encoding(pos + 1, d);
        let mut x = Mat::from_vec(1, d, pe.row(pos).to_vec());
        for (o, &v) in x.row_mut(0).iter_mut().zip(self.weights.embed.row(token)) {
            *o += v * scale;
        }
        for ((l, (k, v)), (sk, sv)) in self.weights.dec.iter().zip(&mem.kv).zip(&mut prefix.kv) {
            let (a, _) = l.ln1.forward(&x);
            let (nk, nv) = l.self_attn.project_kv(&a);
            sk.push_row(nk.row(0));
            sv.push_row(nv.row(0));
            x.add_assign(&l.self_attn.forward_kv(&a, sk, sv, false));
            let (b, _) = l.ln2.forward(&x);
            x.add_assign(&l.cross.forward_kv(&b, k, v, false));
            let (e, _) = l.ln3.forward(&x);
            x.add_assign(&l.ff.infer(&e));
        }
        self.weights.dec_ln.forward(&x).0.data().to_vec()
    }

    /// `FF(d)` for one decoder state.
    pub fn logits(&self, state: &[f64]) -> Vec<f64> {
        let row = Mat::from_vec(1, state.len(), state.to_vec());
        self.weights.out.forward(&row).data().to_vec()
    }

    /// `softmax(FF(d))`.
    pub fn distribution(&self, state: &[f64]) -> Vec<f64> {
        softmax(&self.logits(state))
    }

    pub fn log_distribution(&self, state: &[f64]) -> Vec<f64> {
        log_softmax(&self.logits(state))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> Seq2Seq {
        let cfg = ModelConfig {
            d: 8,
            enc_layers: 1,
            dec_layers: 2,
            heads: 2,
            ff_hidden: 12,
            max_len: 16,
            seed: 9,
        };
        let vocab = Vocab::new((0..6).map(|i| format!("t{i}")));
        let mut m = Seq2Seq::new(cfg, vocab).unwrap();
        // Perturb norms and biases so the check also covers them.
        let mut rng = stage_rng(3, "test/perturb");
        for t in m.weights.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
        m
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        let mut m = tiny();
        let src = [3, 4, 5, 3];
        let tgt = [5, 4, 3];
        let mut g = m.weights.zeros_like();
        m.example_loss(&src, &tgt, 1.0, Some(&mut g));
        let grads: Vec<Vec<f64>> = g.tensors().iter().map(|t| t.data().to_vec()).collect();
        let eps = 1e-5;
        let n_tensors = grads.len();
        let mut checked = 0;
        for ti in 0..n_tensors {
            let len = grads[ti].len();
            for k in [0, len / 2, len - 1] {
                let orig = m.weights.tensors()[ti].data()[k];
                m.weights.tensors_mut()[ti].data_mut()[k] = orig + eps;
                let lp = m.example_loss(&src, &tgt, 1.0, None).0;
                m.weights.tensors_mut()[ti].data_mut()[k] = orig - eps;
                let lm = m.example_loss(&src, &tgt, 1.0, None).0;
                m.weights.tensors_mut()[ti].data_mut()[k] = orig;
                let num = (lp - lm) / (2.0 * eps);
                let a = grads[ti][k];
                let denom = num.abs().max(a.abs());
                if denom < 1e-7 {
                    continue;
                }
                assert!((num - a).abs() / denom < 1e-4, "tensor {ti}[{k}]: {num} vs {a}");
                checked += 1;
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn inference_path_matches_training_path() {
        let m = tiny();
        let src = [3, 4, 5];
        let (e, _) = m.encoder_forward(&src);
        let inputs = [BOS, 5, 4];
        let (d_train, _) = m.decoder_forward(&inputs, &e);
        let d_inf = m.decoder_states(&inputs, &m.memory(&e));
        for (a, b) in d_train.data().iter().zip(d_inf.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn incremental_steps_match_full_recompute() {
        let m = tiny();
        let e = m.encode_ids(&[3, 4, 5]);
        let mem = m.memory(&e);
        let inputs = [BOS, 5, 4, 3, 3];
        let full = m.decoder_states(&inputs, &mem);
        let mut prefix = m.empty_prefix();
        for (i, &t) in inputs.iter().enumerate() {
            assert_eq!(m.decoder_step(&mut prefix, t, &mem), full.row(i));
        }
    }

    #[test]
    fn decoder_rows_are_prefix_exact() {
        let m = tiny();
        let e = m.encode_ids(&[3, 4]);
        let mem = m.memory(&e);
        let full = m.decoder_states(&[BOS, 5, 4, 3], &mem);
        for t in 1..=4 {
            let part = m.decoder_states(&[BOS, 5, 4, 3][..t], &mem);
            assert_eq!(part.row(t - 1), full.row(t - 1));
        }
    }
}

//! Transformer building blocks with explicit forward caches and backward passes.

use rand::Rng;

use crate::tensor::Mat;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `in × out`
    pub w: Mat,
    /// `1 × out`
    pub b: Mat,
}

impl Linear {
    pub fn new<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let scale = (6.0 / (input + output) as f64).sqrt();
        Linear {
            w: Mat::uniform(input, output, scale, rng),
            b: Mat::zeros(1, output),
        }
    }

    pub fn with_scale<R: Rng>(input: usize, output: usize, scale: f64, rng: &mut R) -> Self {
        Linear {
            w: Mat::uniform(input, output, scale, rng),
            b: Mat::zeros(1, output),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Linear {
            w: Mat::zeros(self.w.rows(), self.w.cols()),
            b: Mat::zeros(1, self.b.cols()),
        }
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        let mut y = x.matmul(&self.w);
        y.add_row(&self.b);
        y
    }

    /// Accumulates parameter gradients into `g` and returns `dL/dx`.
    pub fn backward(&self, x: &Mat, dy: &Mat, g: &mut Linear) -> Mat {
        x.t_matmul_into(dy, &mut g.w);
        dy.sum_rows_into(&mut g.b);
        dy.matmul_t(&self.w)
    }

    pub fn tensors(&self) -> [&Mat; 2] {
        [&self.w, &self.b]
    }

    pub fn tensors_mut(&mut self) -> [&mut Mat; 2] {
        [&mut self.w, &mut self.b]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Mat,
    pub beta: Mat,
}

pub struct LnCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            gamma: Mat::filled(1, d, 1.0),
            beta: Mat::zeros(1, d),
        }
    }

    pub fn zeros_like(&self) -> Self {
        LayerNorm {
            gamma: Mat::zeros(1, self.gamma.cols()),
            beta: Mat::zeros(1, self.beta.cols()),
        }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, LnCache) {
        let d = x.cols();
        let mut y = Mat::zeros(x.rows(), d);
        let mut xhat = Mat::zeros(x.rows(), d);
        let mut inv_std = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(i);
            for (o, &v) in xh.iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            let yr = y.row_mut(i);
            for k in 0..d {
                yr[k] = xhat.get(i, k) * self.gamma.data()[k] + self.beta.data()[k];
            }
        }
        (y, LnCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LnCache, dy: &Mat, g: &mut LayerNorm) -> Mat {
        let d = dy.cols();
        let n = d as f64;
        let mut dx = Mat::zeros(dy.rows(), d);
        let gamma = self.gamma.data();
        for i in 0..dy.rows() {
            let dyr = dy.row(i);
            let xh = cache.xhat.row(i);
            let gg = g.gamma.data_mut();
            for k in 0..d {
                gg[k] += dyr[k] * xh[k];
            }
            let gb = g.beta.data_mut();
            for k in 0..d {
                gb[k] += dyr[k];
            }
            let dxhat: Vec<f64> = dyr.iter().zip(gamma).map(|(a, b)| a * b).collect();
            let sum_dxhat: f64 = dxhat.iter().sum();
            let sum_dxhat_xhat: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
            let is = cache.inv_std[i];
            let dxr = dx.row_mut(i);
            for k in 0..d {
                dxr[k] = is / n * (n * dxhat[k] - sum_dxhat - xh[k] * sum_dxhat_xhat);
            }
        }
        dx
    }

    pub fn tensors(&self) -> [&Mat; 2] {
        [&self.gamma, &self.beta]
    }

    pub fn tensors_mut(&mut self) -> [&mut Mat; 2] {
        [&mut self.gamma, &mut self.beta]
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

pub struct AttnCache {
    xq: Mat,
    xkv: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    /// Per head, `Lq × Lk`.
    probs: Vec<Mat>,
    ctx: Mat,
    causal: bool,
}

/// Core attention over already projected queries, keys and values.
/// With `causal`, query row `i` only sees key rows `0..=i`.
pub fn attend(q: &Mat, k: &Mat, v: &Mat, heads: usize, causal: bool) -> (Mat, Vec<Mat>) {
    let d = q.cols();
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let (lq, lk) = (q.rows(), k.rows());
    let mut ctx = Mat::zeros(lq, d);
    let mut all_probs = Vec::with_capacity(heads);
    let mut scores = vec![0.0; lk];
    for h in 0..heads {
        let off = h * dk;
        let mut probs = Mat::zeros(lq, lk);
        for i in 0..lq {
            let jmax = if causal { (i + 1).min(lk) } else { lk };
            let qi = &q.row(i)[off..off + dk];
            let mut max = f64::NEG_INFINITY;
            for (j, s) in scores.iter_mut().enumerate().take(jmax) {
                let kj = &k.row(j)[off..off + dk];
                let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                *s = dot * scale;
                max = max.max(*s);
            }
            let mut sum = 0.0;
            for s in scores.iter_mut().take(jmax) {
                *s = (*s - max).exp();
                sum += *s;
            }
            let pr = probs.row_mut(i);
            for j in 0..jmax {
                pr[j] = scores[j] / sum;
            }
            let cr = &mut ctx.row_mut(i)[off..off + dk];
            for j in 0..jmax {
                let p = probs.get(i, j);
                let vj = &v.row(j)[off..off + dk];
                for (c, &vv) in cr.iter_mut().zip(vj) {
                    *c += p * vv;
                }
            }
        }
        all_probs.push(probs);
    }
    (ctx, all_probs)
}

impl Attention {
    pub fn new<R: Rng>(d: usize, heads: usize, rng: &mut R) -> Self {
        assert!(d % heads == 0, "state width must divide evenly into heads");
        Attention {
            heads,
            q: Linear::new(d, d, rng),
            k: Linear::new(d, d, rng),
            v: Linear::new(d, d, rng),
            o: Linear::new(d, d, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Attention {
            heads: self.heads,
            q: self.q.zeros_like(),
            k: self.k.zeros_like(),
            v: self.v.zeros_like(),
            o: self.o.zeros_like(),
        }
    }

    /// Key and value projections of a memory, reusable across decoding steps.
    pub fn project_kv(&self, xkv: &Mat) -> (Mat, Mat) {
        (self.k.forward(xkv), self.v.forward(xkv))
    }

    /// Inference-only forward with precomputed keys and values.
    pub fn forward_kv(&self, xq: &Mat, k: &Mat, v: &Mat, causal: bool) -> Mat {
        let q = self.q.forward(xq);
        let (ctx, _) = attend(&q, k, v, self.heads, causal);
        self.o.forward(&ctx)
    }

    pub fn forward(&self, xq: &Mat, xkv: &Mat, causal: bool) -> (Mat, AttnCache) {
        let q = self.q.forward(xq);
        let (k, v) = self.project_kv(xkv);
        let (ctx, probs) = attend(&q, &k, &v, self.heads, causal);
        let out = self.o.forward(&ctx);
        (
            out,
            AttnCache {
                xq: xq.clone(),
                xkv: xkv.clone(),
                q,
                k,
                v,
                probs,
                ctx,
                causal,
            },
        )
    }

    /// Returns `(dL/dxq, dL/dxkv)`.
    pub fn backward(&self, c: &AttnCache, dout: &Mat, g: &mut Attention) -> (Mat, Mat) {
        let dctx = self.o.backward(&c.ctx, dout, &mut g.o);
        let d = c.q.cols();
        let dk = d / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let (lq, lk) = (c.q.rows(), c.k.rows());
        let mut dq = Mat::zeros(lq, d);
        let mut dkm = Mat::zeros(lk, d);
        let mut dv = Mat::zeros(lk, d);
        let mut dp = vec![0.0; lk];
        for h in 0..self.heads {
            let off = h * dk;
            let probs = &c.probs[h];
            for i in 0..lq {
                let jmax = if c.causal { (i + 1).min(lk) } else { lk };
                let dci = &dctx.row(i)[off..off + dk];
                let mut weighted = 0.0;
                for j in 0..jmax {
                    let vj = &c.v.row(j)[off..off + dk];
                    dp[j] = dci.iter().zip(vj).map(|(a, b)| a * b).sum();
                    weighted += probs.get(i, j) * dp[j];
                    let p = probs.get(i, j);
                    let dvj = &mut dv.row_mut(j)[off..off + dk];
                    for (o, &x) in dvj.iter_mut().zip(dci) {
                        *o += p * x;
                    }
                }
                for j in 0..jmax {
                    let ds = probs.get(i, j) * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &c.k.row(j)[off..off + dk];
                    let dqi = &mut dq.row_mut(i)[off..off + dk];
                    for (o, &x) in dqi.iter_mut().zip(kj) {
                        *o += ds * x;
                    }
                    let qi = &c.q.row(i)[off..off + dk];
                    let dkj = &mut dkm.row_mut(j)[off..off + dk];
                    for (o, &x) in dkj.iter_mut().zip(qi) {
                        *o += ds * x;
                    }
                }
            }
        }
        let dxq = self.q.backward(&c.xq, &dq, &mut g.q);
        let mut dxkv = self.k.backward(&c.xkv, &dkm, &mut g.k);
        dxkv.add_assign(&self.v.backward(&c.xkv, &dv, &mut g.v));
        (dxq, dxkv)
    }

    pub fn tensors(&self) -> Vec<&Mat> {
        [&self.q, &self.k, &self.v, &self.o]
            .into_iter()
            .flat_map(Linear::tensors)
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = Vec::with_capacity(8);
        for l in [&mut self.q, &mut self.k, &mut self.v, &mut self.o] {
            out.extend(l.tensors_mut());
        }
        out
    }
}

/// Position-wise ReLU feed-forward block.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

pub struct FfCache {
    x: Mat,
    h: Mat,
}

impl FeedForward {
    pub fn new<R: Rng>(d: usize, hidden: usize, rng: &mut R) -> Self {
        FeedForward {
            l1: Linear::new(d, hidden, rng),
            l2: Linear::new(hidden, d, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        FeedForward {
            l1: self.l1.zeros_like(),
            l2: self.l2.zeros_like(),
        }
    }

    pub fn infer(&self, x: &Mat) -> Mat {
        let mut h = self.l1.forward(x);
        h.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.l2.forward(&h)
    }

    pub fn forward(&self, x: &Mat) -> (Mat, FfCache) {
        let mut h = self.l1.forward(x);
        h.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let y = self.l2.forward(&h);
        (y, FfCache { x: x.clone(), h })
    }

    pub fn backward(&self, c: &FfCache, dy: &Mat, g: &mut FeedForward) -> Mat {
        let mut dh = self.l2.backward(&c.h, dy, &mut g.l2);
        for (d, &h) in dh.data_mut().iter_mut().zip(c.h.data()) {
            if h <= 0.0 {
                *d = 0.0;
            }
        }
        self.l1.backward(&c.x, &dh, &mut g.l1)
    }

    pub fn tensors(&self) -> Vec<&Mat> {
        [&self.l1, &self.l2].into_iter().flat_map(Linear::tensors).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = Vec::with_capacity(4);
        out.extend(self.l1.tensors_mut());
        out.extend(self.l2.tensors_mut());
        out
    }
}

//! Small attention denoiser with a hand-written backward pass.
//!
//! Each grid entry `(i, t)` becomes a `d`-vector from its features
//! `[x_k, x_obs, mask]` plus a node embedding, a time embedding and a
//! projection of the sinusoidal step embedding. Every layer applies
//! residual multi-head attention across time (per node), then across
//! nodes (per time slice), then a residual SiLU feed-forward block. A
//! final linear map gives one noise value per entry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{check_input, ConditioningContext, Denoiser, Prediction};
use crate::diffusion::step_embedding;
use crate::error::{invalid, shape_mismatch, Error, Result};
use crate::grid::{MaskMatrix, TrafficGrid};

const N_FEATURES: usize = 3;
const PER_LAYER: usize = 18;
const HEAD: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub n_nodes: usize,
    pub n_steps: usize,
    pub step_embedding_dim: usize,
}

impl NetConfig {
    /// CPU-sized defaults for an `n_nodes x n_steps` window.
    pub fn desk(n_nodes: usize, n_steps: usize) -> Self {
        Self {
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            n_nodes,
            n_steps,
            step_embedding_dim: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(invalid(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_nodes == 0 || self.n_steps == 0 {
            return Err(invalid("network needs positive node and step counts"));
        }
        if self.step_embedding_dim < 4 || self.step_embedding_dim % 2 != 0 {
            return Err(invalid("step embedding dimension must be even and at least 4"));
        }
        Ok(())
    }

    fn ffn_width(&self) -> usize {
        2 * self.d_model
    }
}

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
}

impl Param {
    fn new(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            value: vec![0.0; n],
        }
    }
}

/// Parameter names and shapes in storage order.
pub fn parameter_layout(cfg: &NetConfig) -> Vec<Param> {
    let d = cfg.d_model;
    let f = cfg.ffn_width();
    let mut p = vec![
        Param::new("in.w", vec![N_FEATURES, d]),
        Param::new("in.b", vec![d]),
        Param::new("node_emb", vec![cfg.n_nodes, d]),
        Param::new("time_emb", vec![cfg.n_steps, d]),
        Param::new("step.w", vec![cfg.step_embedding_dim, d]),
        Param::new("step.b", vec![d]),
    ];
    for l in 0..cfg.n_layers {
        for axis in ["temporal", "spatial"] {
            // Keys carry no bias: it cancels in the softmax.
            for m in ["q", "k", "v", "o"] {
                p.push(Param::new(format!("layer{l}.{axis}.{m}.w"), vec![d, d]));
                if m != "k" {
                    p.push(Param::new(format!("layer{l}.{axis}.{m}.b"), vec![d]));
                }
            }
        }
        p.push(Param::new(format!("layer{l}.ffn.w1"), vec![d, f]));
        p.push(Param::new(format!("layer{l}.ffn.b1"), vec![f]));
        p.push(Param::new(format!("layer{l}.ffn.w2"), vec![f, d]));
        p.push(Param::new(format!("layer{l}.ffn.b2"), vec![d]));
    }
    p.push(Param::new("out.w", vec![d, 1]));
    p.push(Param::new("out.b", vec![1]));
    p
}

/// Row-major dense matrix of activations, one row per grid entry.
#[derive(Debug, Clone)]
struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn add_assign(&mut self, other: &Mat) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `x W + b` with `W` stored `in x out`.
fn linear(x: &Mat, w: &[f64], b: &[f64], out: usize) -> Mat {
    let mut y = Mat::zeros(x.rows, out);
    for r in 0..x.rows {
        let yr = &mut y.data[r * out..(r + 1) * out];
        yr.copy_from_slice(b);
        for (i, &xv) in x.row(r).iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wr = &w[i * out..(i + 1) * out];
            for (yv, wv) in yr.iter_mut().zip(wr) {
                *yv += xv * wv;
            }
        }
    }
    y
}

/// Accumulates `dW += x^T dy`, `db += colsum(dy)` and returns `dy W^T`.
fn linear_back(x: &Mat, w: &[f64], dy: &Mat, dw: &mut [f64], db: &mut [f64]) -> Mat {
    let out = dy.cols;
    let mut dx = Mat::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let dyr = dy.row(r);
        for (g, v) in db.iter_mut().zip(dyr) {
            *g += v;
        }
        for i in 0..x.cols {
            let xv = x.data[r * x.cols + i];
            let wr = &w[i * out..(i + 1) * out];
            let dwr = &mut dw[i * out..(i + 1) * out];
            let mut acc = 0.0;
            for o in 0..out {
                dwr[o] += xv * dyr[o];
                acc += dyr[o] * wr[o];
            }
            dx.data[r * x.cols + i] = acc;
        }
    }
    dx
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

struct AttnCache {
    x: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    /// Softmax weights per (group, head), each `n x n` row-major.
    weights: Vec<Vec<f64>>,
    o: Mat,
}

struct LayerCache {
    temporal: AttnCache,
    spatial: AttnCache,
    h_mid: Mat,
    z: Mat,
    act: Mat,
}

struct ForwardCache {
    features: Mat,
    step_emb: Vec<f64>,
    layers: Vec<LayerCache>,
    h_final: Mat,
}

/// Multi-head self-attention within each group of rows. `p` holds
/// `q.w, q.b, k.w, v.w, v.b, o.w, o.b`.
fn attention_forward(x: &Mat, p: &[Param], groups: &[Vec<usize>], heads: usize) -> (Mat, AttnCache) {
    let d = x.cols;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = linear(x, &p[0].value, &p[1].value, d);
    let k = linear(x, &p[2].value, &vec![0.0; d], d);
    let v = linear(x, &p[3].value, &p[4].value, d);
    let mut o = Mat::zeros(x.rows, d);
    let mut weights = Vec::with_capacity(groups.len() * heads);
    for g in groups {
        let n = g.len();
        for h in 0..heads {
            let off = h * dh;
            let mut a = vec![0.0; n * n];
            for (ai, &ra) in g.iter().enumerate() {
                let qa = &q.row(ra)[off..off + dh];
                let mut mx = f64::NEG_INFINITY;
                for (bi, &rb) in g.iter().enumerate() {
                    let kb = &k.row(rb)[off..off + dh];
                    let s = scale * qa.iter().zip(kb).map(|(x, y)| x * y).sum::<f64>();
                    a[ai * n + bi] = s;
                    mx = mx.max(s);
                }
                let mut z = 0.0;
                for s in &mut a[ai * n..(ai + 1) * n] {
                    *s = (*s - mx).exp();
                    z += *s;
                }
                for s in &mut a[ai * n..(ai + 1) * n] {
                    *s /= z;
                }
                let orow = &mut o.data[ra * d + off..ra * d + off + dh];
                for (bi, &rb) in g.iter().enumerate() {
                    let w = a[ai * n + bi];
                    let vb = &v.data[rb * d + off..rb * d + off + dh];
                    for (ov, vv) in orow.iter_mut().zip(vb) {
                        *ov += w * vv;
                    }
                }
            }
            weights.push(a);
        }
    }
    let y = linear(&o, &p[5].value, &p[6].value, d);
    (
        y,
        AttnCache {
            x: x.clone(),
            q,
            k,
            v,
            weights,
            o,
        },
    )
}

fn pair(g: &mut [Vec<f64>], i: usize) -> (&mut [f64], &mut [f64]) {
    let (a, b) = g[i..].split_at_mut(1);
    (&mut a[0], &mut b[0])
}

fn attention_backward(
    c: &AttnCache,
    p: &[Param],
    g: &mut [Vec<f64>],
    groups: &[Vec<usize>],
    heads: usize,
    dy: &Mat,
) -> Mat {
    let d = c.x.cols;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (gw, gb) = pair(g, 5);
    let d_o = linear_back(&c.o, &p[5].value, dy, gw, gb);
    let mut dq = Mat::zeros(c.x.rows, d);
    let mut dk = Mat::zeros(c.x.rows, d);
    let mut dv = Mat::zeros(c.x.rows, d);
    let mut idx = 0;
    for grp in groups {
        let n = grp.len();
        for h in 0..heads {
            let off = h * dh;
            let a = &c.weights[idx];
            idx += 1;
            let mut da = vec![0.0; n * n];
            for (ai, &ra) in grp.iter().enumerate() {
                let doa = &d_o.data[ra * d + off..ra * d + off + dh];
                for (bi, &rb) in grp.iter().enumerate() {
                    let vb = &c.v.data[rb * d + off..rb * d + off + dh];
                    da[ai * n + bi] = doa.iter().zip(vb).map(|(x, y)| x * y).sum();
                    let w = a[ai * n + bi];
                    let dvb = &mut dv.data[rb * d + off..rb * d + off + dh];
                    for (t, s) in dvb.iter_mut().zip(doa) {
                        *t += w * s;
                    }
                }
            }
            for ai in 0..n {
                let row_a = &a[ai * n..(ai + 1) * n];
                let row_da = &da[ai * n..(ai + 1) * n];
                let dot: f64 = row_a.iter().zip(row_da).map(|(x, y)| x * y).sum();
                let ra = grp[ai];
                for bi in 0..n {
                    let ds = scale * row_a[bi] * (row_da[bi] - dot);
                    if ds == 0.0 {
                        continue;
                    }
                    let rb = grp[bi];
                    for cc in off..off + dh {
                        dq.data[ra * d + cc] += ds * c.k.data[rb * d + cc];
                        dk.data[rb * d + cc] += ds * c.q.data[ra * d + cc];
                    }
                }
            }
        }
    }
    let (gw, gb) = pair(g, 0);
    let mut dx = linear_back(&c.x, &p[0].value, &dq, gw, gb);
    dx.add_assign(&linear_back(&c.x, &p[2].value, &dk, &mut g[2], &mut vec![0.0; d]));
    let (gw, gb) = pair(g, 3);
    dx.add_assign(&linear_back(&c.x, &p[3].value, &dv, gw, gb));
    dx
}

/// Trainable denoiser. Weights are immutable during `predict`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralDenoiser {
    config: NetConfig,
    params: Vec<Param>,
}

impl NeuralDenoiser {
    /// Scaled-uniform weights, small normal embeddings, zero biases.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = parameter_layout(&config);
        for p in &mut params {
            if p.shape.len() == 2 {
                let is_emb = p.name.ends_with("_emb");
                let bound = (6.0 / (p.shape[0] + p.shape[1]) as f64).sqrt();
                for v in &mut p.value {
                    *v = if is_emb {
                        0.1 * rng.sample::<f64, _>(StandardNormal)
                    } else {
                        rng.random_range(-bound..bound)
                    };
                }
            }
        }
        Ok(Self { config, params })
    }

    /// Adopts stored tensors; names and shapes must match the layout.
    pub fn from_params(config: NetConfig, params: Vec<Param>) -> Result<Self> {
        config.validate()?;
        let layout = parameter_layout(&config);
        if params.len() != layout.len() {
            return Err(Error::State(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                params.len()
            )));
        }
        for (want, got) in layout.iter().zip(&params) {
            if want.name != got.name || want.shape != got.shape || got.value.len() != want.value.len() {
                return Err(Error::State(format!("parameter `{}` missing or misshapen", want.name)));
            }
            if got.value.iter().any(|v| !v.is_finite()) {
                return Err(Error::State(format!("parameter `{}` has non-finite entries", got.name)));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn n_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    fn temporal_groups(&self) -> Vec<Vec<usize>> {
        let (n, t) = (self.config.n_nodes, self.config.n_steps);
        (0..n).map(|i| (0..t).map(|s| i * t + s).collect()).collect()
    }

    fn spatial_groups(&self) -> Vec<Vec<usize>> {
        let (n, t) = (self.config.n_nodes, self.config.n_steps);
        (0..t).map(|s| (0..n).map(|i| i * t + s).collect()).collect()
    }

    fn check(&self, x_k: &TrafficGrid, ctx: &ConditioningContext) -> Result<()> {
        check_input(x_k, ctx)?;
        let want = (self.config.n_nodes, self.config.n_steps);
        if x_k.shape() != want {
            return Err(shape_mismatch(want, x_k.shape()));
        }
        Ok(())
    }

    fn forward(&self, x_k: &TrafficGrid, k: usize, ctx: &ConditioningContext) -> Result<(Vec<f64>, Vec<f64>, ForwardCache)> {
        if k == 0 {
            return Err(Error::InvalidStep {
                step: 0,
                reason: "steps start at 1".into(),
            });
        }
        let cfg = &self.config;
        let (n, t, d) = (cfg.n_nodes, cfg.n_steps, cfg.d_model);
        let rows = n * t;
        let p = &self.params;

        let mut features = Mat::zeros(rows, N_FEATURES);
        for r in 0..rows {
            features.data[r * N_FEATURES] = x_k.values()[r];
            features.data[r * N_FEATURES + 1] = ctx.observed().values()[r];
            features.data[r * N_FEATURES + 2] = if ctx.mask().entries()[r] { 1.0 } else { 0.0 };
        }
        let step_emb = step_embedding(k, cfg.step_embedding_dim);
        let mut step_vec = p[5].value.clone();
        for (j, &e) in step_emb.iter().enumerate() {
            for (s, w) in step_vec.iter_mut().zip(&p[4].value[j * d..(j + 1) * d]) {
                *s += e * w;
            }
        }
        let mut h = linear(&features, &p[0].value, &p[1].value, d);
        for i in 0..n {
            for s in 0..t {
                let r = i * t + s;
                let hr = &mut h.data[r * d..(r + 1) * d];
                for c in 0..d {
                    hr[c] += p[2].value[i * d + c] + p[3].value[s * d + c] + step_vec[c];
                }
            }
        }

        let tg = self.temporal_groups();
        let sg = self.spatial_groups();
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let base = HEAD + l * PER_LAYER;
            let (y, temporal) = attention_forward(&h, &p[base..base + 7], &tg, cfg.n_heads);
            h.add_assign(&y);
            let (y, spatial) = attention_forward(&h, &p[base + 7..base + 14], &sg, cfg.n_heads);
            h.add_assign(&y);
            let h_mid = h.clone();
            let f = &p[base + 14..base + 18];
            let z = linear(&h_mid, &f[0].value, &f[1].value, cfg.ffn_width());
            let mut act = z.clone();
            for v in &mut act.data {
                *v *= sigmoid(*v);
            }
            let y = linear(&act, &f[2].value, &f[3].value, d);
            h.add_assign(&y);
            layers.push(LayerCache {
                temporal,
                spatial,
                h_mid,
                z,
                act,
            });
        }
        let out_base = HEAD + cfg.n_layers * PER_LAYER;
        let out = linear(&h, &p[out_base].value, &p[out_base + 1].value, 1);

        let attn = match layers.last() {
            Some(last) => {
                let mut a = vec![0.0; n * n];
                for w in &last.spatial.weights {
                    for (acc, v) in a.iter_mut().zip(w) {
                        *acc += v;
                    }
                }
                let norm = (t * cfg.n_heads) as f64;
                a.iter_mut().for_each(|v| *v /= norm);
                a
            }
            None => {
                let mut a = vec![0.0; n * n];
                for i in 0..n {
                    a[i * n + i] = 1.0;
                }
                a
            }
        };
        Ok((
            out.data,
            attn,
            ForwardCache {
                features,
                step_emb,
                layers,
                h_final: h,
            },
        ))
    }

    /// Mean squared error over entries set in `loss_mask`, and its
    /// gradient with respect to every parameter (same order as
    /// [`NeuralDenoiser::params`]).
    pub fn loss_and_grad(
        &self,
        x_k: &TrafficGrid,
        k: usize,
        ctx: &ConditioningContext,
        target: &TrafficGrid,
        loss_mask: &MaskMatrix,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        self.check(x_k, ctx)?;
        x_k.ensure_same_shape(target)?;
        loss_mask.ensure_shape(x_k.shape())?;
        let count = loss_mask.observed_count();
        if count == 0 {
            return Err(invalid("loss mask selects no entries"));
        }
        let (pred, _, cache) = self.forward(x_k, k, ctx)?;
        let cfg = &self.config;
        let (n, t, d) = (cfg.n_nodes, cfg.n_steps, cfg.d_model);
        let rows = n * t;
        let p = &self.params;
        let mut g: Vec<Vec<f64>> = p.iter().map(|q| vec![0.0; q.value.len()]).collect();

        let mut loss = 0.0;
        let mut dout = Mat::zeros(rows, 1);
        for r in 0..rows {
            if loss_mask.entries()[r] {
                let e = pred[r] - target.values()[r];
                loss += e * e;
                dout.data[r] = 2.0 * e / count as f64;
            }
        }
        loss /= count as f64;

        let out_base = HEAD + cfg.n_layers * PER_LAYER;
        let (gw, gb) = pair(&mut g, out_base);
        let mut dh = linear_back(&cache.h_final, &p[out_base].value, &dout, gw, gb);

        let tg = self.temporal_groups();
        let sg = self.spatial_groups();
        for l in (0..cfg.n_layers).rev() {
            let base = HEAD + l * PER_LAYER;
            let lc = &cache.layers[l];
            let f = &p[base + 14..base + 18];
            let gf = &mut g[base + 14..base + 18];
            let (gw, gb) = pair(gf, 2);
            let mut dz = linear_back(&lc.act, &f[2].value, &dh, gw, gb);
            for (dv, &z) in dz.data.iter_mut().zip(&lc.z.data) {
                let s = sigmoid(z);
                *dv *= s * (1.0 + z * (1.0 - s));
            }
            let (gw, gb) = pair(gf, 0);
            dh.add_assign(&linear_back(&lc.h_mid, &f[0].value, &dz, gw, gb));

            let dx = attention_backward(&lc.spatial, &p[base + 7..base + 14], &mut g[base + 7..base + 14], &sg, cfg.n_heads, &dh);
            dh.add_assign(&dx);
            let dx = attention_backward(&lc.temporal, &p[base..base + 7], &mut g[base..base + 7], &tg, cfg.n_heads, &dh);
            dh.add_assign(&dx);
        }

        let mut dstep = vec![0.0; d];
        for i in 0..n {
            for s in 0..t {
                let r = i * t + s;
                for c in 0..d {
                    let v = dh.data[r * d + c];
                    g[2][i * d + c] += v;
                    g[3][s * d + c] += v;
                    dstep[c] += v;
                }
            }
        }
        for (j, &e) in cache.step_emb.iter().enumerate() {
            for c in 0..d {
                g[4][j * d + c] += e * dstep[c];
            }
        }
        for c in 0..d {
            g[5][c] += dstep[c];
        }
        let (gw, gb) = pair(&mut g, 0);
        linear_back(&cache.features, &p[0].value, &dh, gw, gb);
        Ok((loss, g))
    }

    /// Loss only, for validation.
    pub fn loss(
        &self,
        x_k: &TrafficGrid,
        k: usize,
        ctx: &ConditioningContext,
        target: &TrafficGrid,
        loss_mask: &MaskMatrix,
    ) -> Result<f64> {
        self.check(x_k, ctx)?;
        x_k.ensure_same_shape(target)?;
        loss_mask.ensure_shape(x_k.shape())?;
        let count = loss_mask.observed_count();
        if count == 0 {
            return Err(invalid("loss mask selects no entries"));
        }
        let (pred, _, _) = self.forward(x_k, k, ctx)?;
        let mut loss = 0.0;
        for (r, &m) in loss_mask.entries().iter().enumerate() {
            if m {
                let e = pred[r] - target.values()[r];
                loss += e * e;
            }
        }
        Ok(loss / count as f64)
    }
}

impl Denoiser for NeuralDenoiser {
    fn predict(&self, x_k: &TrafficGrid, k: usize, ctx: &ConditioningContext) -> Result<Prediction> {
        self.check(x_k, ctx)?;
        let (eps, attn, _) = self.forward(x_k, k, ctx)?;
        let eps = TrafficGrid::new(self.config.n_nodes, self.config.n_steps, eps)
            .map_err(|_| Error::Numerical("denoiser produced non-finite output".into()))?;
        Ok(Prediction {
            eps,
            attention: Some(attn),
        })
    }
}

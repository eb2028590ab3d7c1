//! The toy autoregressive policy: an embedding table, `layers` residual
//! blocks (fixed causal uniform token mixing -> learnable mixing matrix,
//! then a two-matrix ReLU MLP), and an output projection. All parameters
//! are f64 `DenseMatrix` values addressable by `ModulePath`, and the
//! backward pass is hand-rolled so gradients are exact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::geometry::{BlockSlot, ModulePath, UpdateDelta};
use crate::linalg::DenseMatrix;

use super::ToylabError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub d_model: usize,
    pub hidden: usize,
    pub layers: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { vocab_size: 20, context_len: 8, d_model: 24, hidden: 48, layers: 8 }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), ToylabError> {
        if self.vocab_size < 2
            || self.context_len < 1
            || self.d_model < 2
            || self.hidden < 1
            || self.layers < 1
        {
            return Err(ToylabError::BadConfig("all policy dimensions must be positive".into()));
        }
        Ok(())
    }

    fn shape_of(&self, path: &ModulePath) -> Option<(usize, usize)> {
        match path {
            ModulePath::Embedding => Some((self.vocab_size, self.d_model)),
            ModulePath::Block { layer, slot } if *layer < self.layers => Some(match slot {
                BlockSlot::Attn => (self.d_model, self.d_model),
                BlockSlot::MlpIn => (self.d_model, self.hidden),
                BlockSlot::MlpOut => (self.hidden, self.d_model),
            }),
            ModulePath::Block { .. } => None,
            ModulePath::OutputProj => Some((self.d_model, self.vocab_size)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    attn: DenseMatrix,
    mlp_in: DenseMatrix,
    mlp_out: DenseMatrix,
}

/// Autoregressive toy policy over token sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    cfg: PolicyConfig,
    embed: DenseMatrix,
    blocks: Vec<Block>,
    out_proj: DenseMatrix,
    /// Fixed sinusoidal position table, `context_len x d_model`; not a
    /// trainable parameter and excluded from module addressing.
    pos: Vec<f64>,
}

fn sinusoidal_positions(context_len: usize, d: usize) -> Vec<f64> {
    let mut pos = vec![0.0; context_len * d];
    for i in 0..context_len {
        for k in 0..d {
            let rate = 10_000f64.powf(-((k / 2 * 2) as f64) / d as f64);
            let angle = i as f64 * rate;
            pos[i * d + k] = if k % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pos
}

impl ToyPolicy {
    /// Random initialization: weights uniform in +-1/sqrt(fan_in), with the
    /// two matrices that write into the residual stream additionally damped
    /// by 1/sqrt(2 * layers) so activations stay O(1) through the stack;
    /// embedding uniform in +-0.5.
    pub fn init(cfg: PolicyConfig, seed: u64) -> Result<Self, ToylabError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |rows: usize, cols: usize, scale: f64| -> DenseMatrix {
            DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
                .expect("finite init")
        };
        let d = cfg.d_model;
        let m = cfg.hidden;
        let residual_damp = 1.0 / (2.0 * cfg.layers as f64).sqrt();
        let embed = uniform(cfg.vocab_size, d, 0.5);
        let blocks = (0..cfg.layers)
            .map(|_| Block {
                attn: uniform(d, d, residual_damp / (d as f64).sqrt()),
                mlp_in: uniform(d, m, 1.0 / (d as f64).sqrt()),
                mlp_out: uniform(m, d, residual_damp / (m as f64).sqrt()),
            })
            .collect();
        let out_proj = uniform(d, cfg.vocab_size, 1.0 / (d as f64).sqrt());
        let pos = sinusoidal_positions(cfg.context_len, d);
        Ok(Self { cfg, embed, blocks, out_proj, pos })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    /// Every parameter matrix, in `ModulePath` order.
    pub fn module_paths(&self) -> Vec<ModulePath> {
        let mut paths = vec![ModulePath::Embedding];
        for layer in 0..self.cfg.layers {
            for slot in [BlockSlot::Attn, BlockSlot::MlpIn, BlockSlot::MlpOut] {
                paths.push(ModulePath::Block { layer, slot });
            }
        }
        paths.push(ModulePath::OutputProj);
        paths
    }

    pub fn module(&self, path: &ModulePath) -> Option<&DenseMatrix> {
        match path {
            ModulePath::Embedding => Some(&self.embed),
            ModulePath::Block { layer, slot } => self.blocks.get(*layer).map(|b| match slot {
                BlockSlot::Attn => &b.attn,
                BlockSlot::MlpIn => &b.mlp_in,
                BlockSlot::MlpOut => &b.mlp_out,
            }),
            ModulePath::OutputProj => Some(&self.out_proj),
        }
    }

    /// New policy with one module replaced; shape-checked.
    pub fn with_module(&self, path: &ModulePath, m: DenseMatrix) -> Result<Self, ToylabError> {
        let want = self
            .cfg
            .shape_of(path)
            .ok_or_else(|| ToylabError::ModuleMismatch { path: path.to_string() })?;
        if (m.rows(), m.cols()) != want {
            return Err(ToylabError::ModuleMismatch { path: path.to_string() });
        }
        let mut out = self.clone();
        match path {
            ModulePath::Embedding => out.embed = m,
            ModulePath::Block { layer, slot } => {
                let b = &mut out.blocks[*layer];
                match slot {
                    BlockSlot::Attn => b.attn = m,
                    BlockSlot::MlpIn => b.mlp_in = m,
                    BlockSlot::MlpOut => b.mlp_out = m,
                }
            }
            ModulePath::OutputProj => out.out_proj = m,
        }
        Ok(out)
    }

    /// Per-module `self - base`.
    pub fn delta_from(&self, base: &Self) -> Result<UpdateDelta, ToylabError> {
        if self.cfg != base.cfg {
            return Err(ToylabError::BadConfig("policies have different architectures".into()));
        }
        let mut delta = UpdateDelta::new();
        for path in self.module_paths() {
            let a = self.module(&path).expect("own path");
            let b = base.module(&path).expect("same architecture");
            delta.insert(path, a.sub(b)?);
        }
        Ok(delta)
    }

    /// New policy with `delta` added to the addressed modules. Modules not
    /// present in the delta are left unchanged.
    pub fn add_delta(&self, delta: &UpdateDelta) -> Result<Self, ToylabError> {
        let mut out = self.clone();
        for (path, d) in delta.iter() {
            let cur = out
                .module(path)
                .ok_or_else(|| ToylabError::ModuleMismatch { path: path.to_string() })?;
            let next = cur.add(d).map_err(|_| ToylabError::ModuleMismatch { path: path.to_string() })?;
            out = out.with_module(path, next)?;
        }
        Ok(out)
    }

    /// SHA-256 over the little-endian f64 bytes of every module in path
    /// order; bit-exact identity check for parameters.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for path in self.module_paths() {
            let m = self.module(&path).expect("own path");
            for v in m.data() {
                h.update(v.to_le_bytes());
            }
        }
        let out = h.finalize();
        let mut s = String::with_capacity(64);
        for b in out {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }

    /// Forward pass over a token sequence; returns the full activation cache
    /// needed for one backward pass from the last position's logits.
    pub fn forward(&self, tokens: &[usize]) -> Result<ForwardCache, ToylabError> {
        let t = tokens.len();
        if t == 0 || t > self.cfg.context_len {
            return Err(ToylabError::BadSequenceLength { len: t, max: self.cfg.context_len });
        }
        let d = self.cfg.d_model;
        let m = self.cfg.hidden;
        let v = self.cfg.vocab_size;
        let mut x = vec![0.0; t * d];
        for (i, &tok) in tokens.iter().enumerate() {
            if tok >= v {
                return Err(ToylabError::TokenOutOfRange { token: tok, vocab: v });
            }
            let erow = self.embed.row(tok);
            let prow = &self.pos[i * d..(i + 1) * d];
            for j in 0..d {
                x[i * d + j] = erow[j] + prow[j];
            }
        }
        let x0 = x.clone();

        let mut layers = Vec::with_capacity(self.cfg.layers);
        for block in &self.blocks {
            // a_in = S x with S the causal uniform average: row i averages
            // positions 0..=i.
            let mut a_in = vec![0.0; t * d];
            let mut running = vec![0.0; d];
            for i in 0..t {
                for j in 0..d {
                    running[j] += x[i * d + j];
                    a_in[i * d + j] = running[j] / (i + 1) as f64;
                }
            }
            // x_mid = x + a_in * W_attn
            let mut x_mid = x.clone();
            mat_mul_acc(&a_in, block.attn.data(), &mut x_mid, t, d, d);
            // h = relu(x_mid * W1)
            let mut h = vec![0.0; t * m];
            mat_mul_acc(&x_mid, block.mlp_in.data(), &mut h, t, d, m);
            for hv in h.iter_mut() {
                if *hv < 0.0 {
                    *hv = 0.0;
                }
            }
            // x = x_mid + h * W2
            let mut x_out = x_mid.clone();
            mat_mul_acc(&h, block.mlp_out.data(), &mut x_out, t, m, d);
            layers.push(LayerCache { a_in, x_mid, h });
            x = x_out;
        }

        let final_row = x[(t - 1) * d..t * d].to_vec();
        let mut logits = vec![0.0; v];
        mat_mul_acc(&final_row, self.out_proj.data(), &mut logits, 1, d, v);
        let log_probs = log_softmax(&logits);
        Ok(ForwardCache { tokens: tokens.to_vec(), x0, layers, final_row, logits, log_probs })
    }

    /// Accumulate parameter gradients of `sum_k dlogits[k] * logits[k]`
    /// treated as a scalar objective (i.e. `dlogits` is the gradient at the
    /// logits of the final position).
    pub fn backward(&self, cache: &ForwardCache, dlogits: &[f64], grads: &mut Grads) {
        let t = cache.tokens.len();
        let d = self.cfg.d_model;
        let m = self.cfg.hidden;
        let v = self.cfg.vocab_size;
        assert_eq!(dlogits.len(), v, "dlogits must be vocab-sized");

        // logits = final_row * out_proj
        for j in 0..d {
            let fj = cache.final_row[j];
            let grow = &mut grads.out_proj[j * v..(j + 1) * v];
            for (g, dl) in grow.iter_mut().zip(dlogits) {
                *g += fj * dl;
            }
        }
        let mut dfinal = vec![0.0; d];
        for j in 0..d {
            let wrow = &self.out_proj.data()[j * v..(j + 1) * v];
            dfinal[j] = wrow.iter().zip(dlogits).map(|(w, dl)| w * dl).sum();
        }

        let mut dx = vec![0.0; t * d];
        dx[(t - 1) * d..t * d].copy_from_slice(&dfinal);

        for (block, (bg, layer)) in self
            .blocks
            .iter()
            .zip(grads.blocks.iter_mut().zip(&cache.layers))
            .rev()
        {
            // x_out = x_mid + h W2
            // dh = dx W2^T;  dW2 += h^T dx
            let mut dh = vec![0.0; t * m];
            mat_mul_bt_acc(&dx, block.mlp_out.data(), &mut dh, t, d, m);
            at_mul_b_acc(&layer.h, &dx, &mut bg.mlp_out, t, m, d);
            // relu mask
            for (dhv, hv) in dh.iter_mut().zip(&layer.h) {
                if *hv <= 0.0 {
                    *dhv = 0.0;
                }
            }
            // h_pre = x_mid W1: dx_mid = dx + dh W1^T; dW1 += x_mid^T dh
            let mut dx_mid = dx.clone();
            mat_mul_bt_acc(&dh, block.mlp_in.data(), &mut dx_mid, t, m, d);
            at_mul_b_acc(&layer.x_mid, &dh, &mut bg.mlp_in, t, d, m);
            // x_mid = x_in + (S x_in) W_attn
            // da_in = dx_mid W_attn^T; dW_attn += a_in^T dx_mid
            let mut da_in = vec![0.0; t * d];
            mat_mul_bt_acc(&dx_mid, block.attn.data(), &mut da_in, t, d, d);
            at_mul_b_acc(&layer.a_in, &dx_mid, &mut bg.attn, t, d, d);
            // dx_in = dx_mid + S^T da_in; (S^T y)[j] = sum_{i>=j} y[i]/(i+1)
            let mut suffix = vec![0.0; d];
            let mut dx_in = dx_mid;
            for i in (0..t).rev() {
                for j in 0..d {
                    suffix[j] += da_in[i * d + j] / (i + 1) as f64;
                    dx_in[i * d + j] += suffix[j];
                }
            }
            dx = dx_in;
        }

        for (i, &tok) in cache.tokens.iter().enumerate() {
            let grow = &mut grads.embed[tok * d..(tok + 1) * d];
            for (g, dv) in grow.iter_mut().zip(&dx[i * d..(i + 1) * d]) {
                *g += dv;
            }
        }
    }

    /// One plain-SGD update: `theta - lr * grads`. Fails if any updated
    /// parameter is non-finite.
    pub fn apply_grads(&self, grads: &Grads, lr: f64) -> Result<Self, ToylabError> {
        let step = |mat: &DenseMatrix, g: &[f64]| -> Result<DenseMatrix, ToylabError> {
            let cols = mat.cols();
            Ok(DenseMatrix::from_fn(mat.rows(), cols, |i, j| {
                mat.get(i, j) - lr * g[i * cols + j]
            })?)
        };
        let mut out = self.clone();
        out.embed = step(&self.embed, &grads.embed)?;
        for (b, bg) in out.blocks.iter_mut().zip(&grads.blocks) {
            b.attn = step(&b.attn, &bg.attn)?;
            b.mlp_in = step(&b.mlp_in, &bg.mlp_in)?;
            b.mlp_out = step(&b.mlp_out, &bg.mlp_out)?;
        }
        out.out_proj = step(&self.out_proj, &grads.out_proj)?;
        Ok(out)
    }
}

/// Activations of one forward pass, sufficient for one backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    tokens: Vec<usize>,
    #[allow(dead_code)]
    x0: Vec<f64>,
    layers: Vec<LayerCache>,
    final_row: Vec<f64>,
    logits: Vec<f64>,
    log_probs: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    a_in: Vec<f64>,
    x_mid: Vec<f64>,
    h: Vec<f64>,
}

impl ForwardCache {
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    /// Next-token distribution (softmax of the logits); sums to 1.
    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|lp| lp.exp()).collect()
    }

    /// Greedy next token: argmax of the logits, first index on ties.
    pub fn greedy(&self) -> usize {
        let mut best = 0;
        for (i, &l) in self.logits.iter().enumerate() {
            if l > self.logits[best] {
                best = i;
            }
        }
        best
    }

    /// Sample a next token at temperature 1.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, lp) in self.log_probs.iter().enumerate() {
            acc += lp.exp();
            if u < acc {
                return i;
            }
        }
        self.log_probs.len() - 1
    }
}

/// Gradient (or any parameter-shaped) accumulator matching a policy config.
#[derive(Debug, Clone)]
pub struct Grads {
    pub embed: Vec<f64>,
    pub blocks: Vec<BlockGrads>,
    pub out_proj: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BlockGrads {
    pub attn: Vec<f64>,
    pub mlp_in: Vec<f64>,
    pub mlp_out: Vec<f64>,
}

impl Grads {
    pub fn zeros(cfg: &PolicyConfig) -> Self {
        let d = cfg.d_model;
        let m = cfg.hidden;
        Self {
            embed: vec![0.0; cfg.vocab_size * d],
            blocks: (0..cfg.layers)
                .map(|_| BlockGrads {
                    attn: vec![0.0; d * d],
                    mlp_in: vec![0.0; d * m],
                    mlp_out: vec![0.0; m * d],
                })
                .collect(),
            out_proj: vec![0.0; d * cfg.vocab_size],
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.iter_mut() {
            *v *= s;
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.iter().map(|v| v * v).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    fn iter(&self) -> impl Iterator<Item = &f64> {
        self.embed
            .iter()
            .chain(self.blocks.iter().flat_map(|b| {
                b.attn.iter().chain(b.mlp_in.iter()).chain(b.mlp_out.iter())
            }))
            .chain(self.out_proj.iter())
    }

    fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.embed
            .iter_mut()
            .chain(self.blocks.iter_mut().flat_map(|b| {
                b.attn
                    .iter_mut()
                    .chain(b.mlp_in.iter_mut())
                    .chain(b.mlp_out.iter_mut())
            }))
            .chain(self.out_proj.iter_mut())
    }
}

/// out += a (t x p) * b (p x q), all row-major.
fn mat_mul_acc(a: &[f64], b: &[f64], out: &mut [f64], t: usize, p: usize, q: usize) {
    debug_assert_eq!(a.len(), t * p);
    debug_assert_eq!(b.len(), p * q);
    debug_assert_eq!(out.len(), t * q);
    for i in 0..t {
        let arow = &a[i * p..(i + 1) * p];
        let orow = &mut out[i * q..(i + 1) * q];
        for (k, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[k * q..(k + 1) * q];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out += a (t x q) * b^T where b is (p x q) row-major, so out is (t x p).
fn mat_mul_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], t: usize, q: usize, p: usize) {
    debug_assert_eq!(a.len(), t * q);
    debug_assert_eq!(b.len(), p * q);
    debug_assert_eq!(out.len(), t * p);
    for i in 0..t {
        let arow = &a[i * q..(i + 1) * q];
        let orow = &mut out[i * p..(i + 1) * p];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * q..(j + 1) * q];
            *o += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// out += a^T (p x t effective) * b (t x q): a is (t x p) row-major.
fn at_mul_b_acc(a: &[f64], b: &[f64], out: &mut [f64], t: usize, p: usize, q: usize) {
    debug_assert_eq!(a.len(), t * p);
    debug_assert_eq!(b.len(), t * q);
    debug_assert_eq!(out.len(), p * q);
    for i in 0..t {
        let arow = &a[i * p..(i + 1) * p];
        let brow = &b[i * q..(i + 1) * q];
        for (j, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[j * q..(j + 1) * q];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|z| z - lse).collect()
}

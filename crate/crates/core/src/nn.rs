//! Parameter storage, Adam, and the small network blocks shared by the
//! aggregator and decoders.
//!
//! Parameters live in a [`ParamBank`] keyed by dotted names and are kept on
//! the f32 lattice (see [`crate::tensor::Tensor::round_to_f32_lattice`]) so
//! float32 checkpoints round-trip without drift. Per step, a module stages
//! the parameters it needs onto a fresh tape through [`Staged`], runs
//! forward/backward, and folds leaf gradients into a [`GradAccum`].

use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;
use crate::tensorio::{param_hash, NamedTensors, StreamRng, TensorData, TensorFile, TensorIoError};
use std::collections::BTreeMap;

/// Named trainable (or frozen) tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamBank {
    params: BTreeMap<String, Tensor>,
}

impl ParamBank {
    pub fn new() -> Self {
        ParamBank::default()
    }

    /// Inserts a parameter, snapping it to the f32 lattice first.
    pub fn insert(&mut self, name: &str, mut t: Tensor) {
        t.round_to_f32_lattice();
        assert!(
            self.params.insert(name.to_string(), t).is_none(),
            "duplicate parameter `{name}`"
        );
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total parameter count across all tensors.
    pub fn numel(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// SHA-256 over names, shapes, and f32 values. Frozen components must
    /// keep this hash fixed across a run.
    pub fn hash(&self) -> [u8; 32] {
        let entries: Vec<(&str, &Tensor)> = self.params.iter().map(|(k, v)| (k.as_str(), v)).collect();
        param_hash(&entries)
    }

    pub fn to_named_tensors(&self) -> NamedTensors {
        self.params
            .iter()
            .map(|(name, t)| {
                let dims = t.shape.iter().map(|&d| d as u32).collect();
                let data = TensorData::F32(t.data.iter().map(|&v| v as f32).collect());
                (name.clone(), TensorFile { dims, data })
            })
            .collect()
    }

    pub fn from_named_tensors(nt: &NamedTensors) -> Result<Self, TensorIoError> {
        let mut bank = ParamBank::new();
        for (name, tf) in nt {
            let TensorData::F32(v) = &tf.data else {
                return Err(TensorIoError::Manifest(format!("parameter `{name}` is not float32")));
            };
            let shape = tf.dims.iter().map(|&d| d as usize).collect();
            let data = v.iter().map(|&x| x as f64).collect();
            bank.insert(name, Tensor::new(shape, data));
        }
        Ok(bank)
    }
}

/// Parameters staged onto one tape, remembered by name so gradients can be
/// pulled back out. Staging the same name twice returns the same leaf.
#[derive(Debug, Default)]
pub struct Staged {
    vars: BTreeMap<String, Var>,
}

impl Staged {
    pub fn new() -> Self {
        Staged::default()
    }

    pub fn stage(&mut self, tape: &mut Tape, bank: &ParamBank, name: &str) -> Var {
        if let Some(&v) = self.vars.get(name) {
            return v;
        }
        let v = tape.leaf(bank.get(name).clone());
        self.vars.insert(name.to_string(), v);
        v
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(|s| s.as_str())
    }
}

/// Gradient sums across per-sample tapes within a batch.
#[derive(Debug, Default)]
pub struct GradAccum {
    grads: BTreeMap<String, Tensor>,
    count: usize,
}

impl GradAccum {
    pub fn new() -> Self {
        GradAccum::default()
    }

    /// Folds in one sample's gradients for every staged parameter.
    pub fn add(&mut self, staged: &Staged, grads: &Gradients) {
        for (name, &var) in &staged.vars {
            let Some(g) = grads.get(var) else { continue };
            match self.grads.get_mut(name) {
                Some(acc) => {
                    assert_eq!(acc.shape, g.shape);
                    for (a, b) in acc.data.iter_mut().zip(&g.data) {
                        *a += b;
                    }
                }
                None => {
                    self.grads.insert(name.clone(), g.clone());
                }
            }
        }
        self.count += 1;
    }

    /// Mean gradients over the accumulated samples.
    pub fn into_mean(mut self) -> BTreeMap<String, Tensor> {
        assert!(self.count > 0, "no gradients accumulated");
        let inv = 1.0 / self.count as f64;
        for g in self.grads.values_mut() {
            for v in &mut g.data {
                *v *= inv;
            }
        }
        self.grads
    }
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.values() {
        for &v in &g.data {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for v in &mut g.data {
                *v *= s;
            }
        }
    }
    norm
}

/// Cosine decay from `base` at step 0 to 0 at step `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 || step >= total {
        return 0.0;
    }
    base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// Adam with bias correction. Updated parameters are snapped back to the f32
/// lattice after every step.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    t: usize,
}

impl Adam {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, bank: &mut ParamBank, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = bank.get_mut(name);
            assert_eq!(p.shape, g.shape, "gradient shape mismatch for `{name}`");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape.clone()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape.clone()));
            for i in 0..p.numel() {
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * g.data[i];
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * g.data[i] * g.data[i];
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
            p.round_to_f32_lattice();
        }
    }
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new()
    }
}

// ---------------------------------------------------------------------------
// Initializers
// ---------------------------------------------------------------------------

/// Xavier/Glorot normal for a `[fan_in, fan_out]` matrix.
pub fn xavier(rng: &mut StreamRng, fan_in: usize, fan_out: usize) -> Tensor {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    rng.normal_tensor(&[fan_in, fan_out], std)
}

/// He normal for a conv weight `[kh, kw, cin, cout]`.
pub fn conv_init(rng: &mut StreamRng, kh: usize, kw: usize, cin: usize, cout: usize) -> Tensor {
    let std = (2.0 / (kh * kw * cin) as f64).sqrt();
    rng.normal_tensor(&[kh, kw, cin, cout], std)
}

// ---------------------------------------------------------------------------
// Linear layers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

pub fn init_linear(bank: &mut ParamBank, rng: &mut StreamRng, prefix: &str, fan_in: usize, fan_out: usize) {
    bank.insert(&format!("{prefix}.w"), xavier(rng, fan_in, fan_out));
    bank.insert(&format!("{prefix}.b"), Tensor::zeros(vec![1, fan_out]));
}

pub fn stage_linear(tape: &mut Tape, staged: &mut Staged, bank: &ParamBank, prefix: &str) -> LinearVars {
    LinearVars {
        w: staged.stage(tape, bank, &format!("{prefix}.w")),
        b: staged.stage(tape, bank, &format!("{prefix}.b")),
    }
}

/// `x @ w + b` for `x: [m, fan_in]`.
pub fn linear(tape: &mut Tape, x: Var, l: LinearVars) -> Var {
    let y = tape.matmul(x, l.w);
    tape.add_row(y, l.b)
}

/// Layer norm followed by a learned per-column affine.
pub fn layer_norm_affine(tape: &mut Tape, x: Var, gain: Var, bias: Var) -> Var {
    let n = tape.layer_norm_rows(x, 1e-5);
    let g = tape.mul_row(n, gain);
    tape.add_row(g, bias)
}

pub fn init_layer_norm(bank: &mut ParamBank, prefix: &str, dim: usize) {
    bank.insert(&format!("{prefix}.g"), Tensor::full(vec![1, dim], 1.0));
    bank.insert(&format!("{prefix}.b"), Tensor::zeros(vec![1, dim]));
}

pub fn stage_layer_norm(tape: &mut Tape, staged: &mut Staged, bank: &ParamBank, prefix: &str) -> (Var, Var) {
    (
        staged.stage(tape, bank, &format!("{prefix}.g")),
        staged.stage(tape, bank, &format!("{prefix}.b")),
    )
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

/// Multi-head attention over already-projected `q: [tq, d]`, `k, v: [tk, d]`.
/// Heads are contiguous column blocks of width `d / heads`.
pub fn multi_head_attention(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Var {
    let d = tape.value(q).cols();
    assert_eq!(d % heads, 0, "width {d} not divisible by {heads} heads");
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = None;
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, lo, hi);
        let kh = tape.slice_cols(k, lo, hi);
        let vh = tape.slice_cols(v, lo, hi);
        let scores = tape.matmul_nt(qh, kh);
        let scaled = tape.scale(scores, scale);
        let p = tape.softmax_rows(scaled);
        let oh = tape.matmul(p, vh);
        out = Some(match out {
            None => oh,
            Some(acc) => tape.concat_cols(acc, oh),
        });
    }
    out.unwrap()
}

/// Causal multi-head self-attention over projected `q, k, v: [t, d]`.
/// Position `i` attends to positions `0..=i` only; masked positions are
/// excluded structurally, so changing future inputs cannot change earlier
/// outputs even at the bit level.
pub fn causal_multi_head_attention(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Var {
    let d = tape.value(q).cols();
    assert_eq!(tape.value(q).rows(), tape.value(k).rows(), "causal attention is self-attention");
    assert_eq!(d % heads, 0, "width {d} not divisible by {heads} heads");
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = None;
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, lo, hi);
        let kh = tape.slice_cols(k, lo, hi);
        let vh = tape.slice_cols(v, lo, hi);
        let scores = tape.matmul_nt(qh, kh);
        let scaled = tape.scale(scores, scale);
        let p = tape.causal_softmax(scaled);
        let oh = tape.tri_matmul(p, vh);
        out = Some(match out {
            None => oh,
            Some(acc) => tape.concat_cols(acc, oh),
        });
    }
    out.unwrap()
}

// ---------------------------------------------------------------------------
// Transformer encoder block (pre-norm)
// ---------------------------------------------------------------------------

pub struct EncoderBlockVars {
    pub ln1: (Var, Var),
    pub wq: LinearVars,
    pub wk: LinearVars,
    pub wv: LinearVars,
    pub wo: LinearVars,
    pub ln2: (Var, Var),
    pub ff1: LinearVars,
    pub ff2: LinearVars,
}

pub fn init_encoder_block(bank: &mut ParamBank, rng: &mut StreamRng, prefix: &str, dim: usize, hidden: usize) {
    init_layer_norm(bank, &format!("{prefix}.ln1"), dim);
    init_linear(bank, rng, &format!("{prefix}.wq"), dim, dim);
    init_linear(bank, rng, &format!("{prefix}.wk"), dim, dim);
    init_linear(bank, rng, &format!("{prefix}.wv"), dim, dim);
    init_linear(bank, rng, &format!("{prefix}.wo"), dim, dim);
    init_layer_norm(bank, &format!("{prefix}.ln2"), dim);
    init_linear(bank, rng, &format!("{prefix}.ff1"), dim, hidden);
    init_linear(bank, rng, &format!("{prefix}.ff2"), hidden, dim);
}

pub fn stage_encoder_block(
    tape: &mut Tape,
    staged: &mut Staged,
    bank: &ParamBank,
    prefix: &str,
) -> EncoderBlockVars {
    EncoderBlockVars {
        ln1: stage_layer_norm(tape, staged, bank, &format!("{prefix}.ln1")),
        wq: stage_linear(tape, staged, bank, &format!("{prefix}.wq")),
        wk: stage_linear(tape, staged, bank, &format!("{prefix}.wk")),
        wv: stage_linear(tape, staged, bank, &format!("{prefix}.wv")),
        wo: stage_linear(tape, staged, bank, &format!("{prefix}.wo")),
        ln2: stage_layer_norm(tape, staged, bank, &format!("{prefix}.ln2")),
        ff1: stage_linear(tape, staged, bank, &format!("{prefix}.ff1")),
        ff2: stage_linear(tape, staged, bank, &format!("{prefix}.ff2")),
    }
}

/// Pre-norm transformer encoder block: self-attention then a two-layer MLP,
/// each with a residual connection.
pub fn encoder_block(tape: &mut Tape, x: Var, vars: &EncoderBlockVars, heads: usize) -> Var {
    let n1 = layer_norm_affine(tape, x, vars.ln1.0, vars.ln1.1);
    let q = linear(tape, n1, vars.wq);
    let k = linear(tape, n1, vars.wk);
    let v = linear(tape, n1, vars.wv);
    let att = multi_head_attention(tape, q, k, v, heads);
    let proj = linear(tape, att, vars.wo);
    let x = tape.add(x, proj);
    let n2 = layer_norm_affine(tape, x, vars.ln2.0, vars.ln2.1);
    let h = linear(tape, n2, vars.ff1);
    let h = tape.relu(h);
    let h = linear(tape, h, vars.ff2);
    tape.add(x, h)
}

// ---------------------------------------------------------------------------
// GRU cell
// ---------------------------------------------------------------------------

pub struct GruVars {
    pub wxr: Var,
    pub whr: Var,
    pub br: Var,
    pub wxz: Var,
    pub whz: Var,
    pub bz: Var,
    pub wxn: Var,
    pub whn: Var,
    pub bn: Var,
}

pub fn init_gru(bank: &mut ParamBank, rng: &mut StreamRng, prefix: &str, dim: usize) {
    for gate in ["r", "z", "n"] {
        bank.insert(&format!("{prefix}.wx{gate}"), xavier(rng, dim, dim));
        bank.insert(&format!("{prefix}.wh{gate}"), xavier(rng, dim, dim));
        bank.insert(&format!("{prefix}.b{gate}"), Tensor::zeros(vec![1, dim]));
    }
}

pub fn stage_gru(tape: &mut Tape, staged: &mut Staged, bank: &ParamBank, prefix: &str) -> GruVars {
    let mut s = |n: String| staged.stage(tape, bank, &n);
    GruVars {
        wxr: s(format!("{prefix}.wxr")),
        whr: s(format!("{prefix}.whr")),
        br: s(format!("{prefix}.br")),
        wxz: s(format!("{prefix}.wxz")),
        whz: s(format!("{prefix}.whz")),
        bz: s(format!("{prefix}.bz")),
        wxn: s(format!("{prefix}.wxn")),
        whn: s(format!("{prefix}.whn")),
        bn: s(format!("{prefix}.bn")),
    }
}

/// GRU update for a batch of row vectors: `x, h: [k, d]` -> new `[k, d]`.
pub fn gru_cell(tape: &mut Tape, x: Var, h: Var, p: &GruVars) -> Var {
    let xr = tape.matmul(x, p.wxr);
    let hr = tape.matmul(h, p.whr);
    let r = tape.add(xr, hr);
    let r = tape.add_row(r, p.br);
    let r = tape.sigmoid(r);

    let xz = tape.matmul(x, p.wxz);
    let hz = tape.matmul(h, p.whz);
    let z = tape.add(xz, hz);
    let z = tape.add_row(z, p.bz);
    let z = tape.sigmoid(z);

    let xn = tape.matmul(x, p.wxn);
    let hn = tape.matmul(h, p.whn);
    let rhn = tape.mul(r, hn);
    let n = tape.add(xn, rhn);
    let n = tape.add_row(n, p.bn);
    let n = tape.tanh(n);

    // h' = (1 - z) * n + z * h
    let zn = tape.mul(z, n);
    let n_minus_zn = tape.sub(n, zn);
    let zh = tape.mul(z, h);
    tape.add(n_minus_zn, zh)
}

/// Sinusoidal timestep embedding, `[1, dim]`, matching the usual diffusion
/// transformer recipe (`dim` must be even).
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    assert_eq!(dim % 2, 0, "timestep embedding dim must be even");
    let half = dim / 2;
    let mut out = Tensor::zeros(vec![1, dim]);
    for i in 0..half {
        let freq = (-(i as f64) * (10000.0f64.ln()) / half as f64).exp();
        out.data[i] = (t as f64 * freq).sin();
        out.data[half + i] = (t as f64 * freq).cos();
    }
    out
}

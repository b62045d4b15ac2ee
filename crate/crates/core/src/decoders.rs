//! The three decoder families: mixture, autoregressive, and diffusion.
//!
//! All of them reconstruct the quantized feature grid (`[h*w, c]` in raster
//! order) from slots. The mixture decoder broadcasts each slot spatially and
//! mixes per-slot components with softmax alphas; the autoregressive decoder
//! predicts tokens left to right under a causal mask with cross-attention to
//! slots; the diffusion decoder predicts the noise added to the target at a
//! sampled timestep, conditioned on slots and a timestep embedding.
//!
//! Reconstruction losses treat the target as a constant: gradients flow into
//! slots and decoder parameters only, never into the quantizer.

use crate::nn::{
    self, layer_norm_affine, multi_head_attention, stage_layer_norm, stage_linear,
    timestep_embedding, ParamBank, Staged,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tensorio::StreamRng;

// ---------------------------------------------------------------------------
// Mixture decoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MixtureConfig {
    pub slot_dim: usize,
    /// Channels of the reconstructed feature grid.
    pub out_channels: usize,
    pub hidden: usize,
    /// Feature-grid height and width (positions = height * width).
    pub height: usize,
    pub width: usize,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        MixtureConfig { slot_dim: 64, out_channels: 16, hidden: 128, height: 8, width: 8 }
    }
}

pub struct MixtureOutput {
    /// Per-slot component grids, each `[h*w, c]`.
    pub components: Vec<Var>,
    /// Per-pixel mixing weights over slots, `[h*w, n]`; rows sum to 1.
    pub alphas: Var,
    /// `sum_k alphas[:, k] * components[k]`, `[h*w, c]`.
    pub reconstruction: Var,
}

pub fn init_mixture_decoder(bank: &mut ParamBank, rng: &mut StreamRng, cfg: &MixtureConfig) {
    let positions = cfg.height * cfg.width;
    bank.insert("dec.mix.pos", rng.normal_tensor(&[positions, cfg.slot_dim], 0.02));
    nn::init_linear(bank, rng, "dec.mix.l1", cfg.slot_dim, cfg.hidden);
    nn::init_linear(bank, rng, "dec.mix.l2", cfg.hidden, cfg.hidden);
    nn::init_linear(bank, rng, "dec.mix.l3", cfg.hidden, cfg.out_channels + 1);
}

/// Spatial-broadcast mixture decoding of `slots: [n, d]`.
pub fn decode_mixture(
    tape: &mut Tape,
    staged: &mut Staged,
    bank: &ParamBank,
    cfg: &MixtureConfig,
    slots: Var,
) -> MixtureOutput {
    let n = tape.value(slots).rows();
    let positions = cfg.height * cfg.width;
    let pos = staged.stage(tape, bank, "dec.mix.pos");
    let l1 = stage_linear(tape, staged, bank, "dec.mix.l1");
    let l2 = stage_linear(tape, staged, bank, "dec.mix.l2");
    let l3 = stage_linear(tape, staged, bank, "dec.mix.l3");

    let mut components = Vec::with_capacity(n);
    let mut logits: Option<Var> = None;
    for k in 0..n {
        let row = tape.index_select_rows(slots, &[k]);
        let grid = tape.repeat_rows(row, positions);
        let x = tape.add(grid, pos);
        let h = nn::linear(tape, x, l1);
        let h = tape.relu(h);
        let h = nn::linear(tape, h, l2);
        let h = tape.relu(h);
        let out = nn::linear(tape, h, l3);
        components.push(tape.slice_cols(out, 0, cfg.out_channels));
        let logit = tape.slice_cols(out, cfg.out_channels, cfg.out_channels + 1);
        logits = Some(match logits {
            Some(prev) => tape.concat_cols(prev, logit),
            None => logit,
        });
    }
    let alphas = tape.softmax_rows(logits.expect("at least one slot"));

    let mut reconstruction: Option<Var> = None;
    for (k, &comp) in components.iter().enumerate() {
        let a_k = tape.slice_cols(alphas, k, k + 1);
        let weighted = tape.mul_col(comp, a_k);
        reconstruction = Some(match reconstruction {
            Some(prev) => tape.add(prev, weighted),
            None => weighted,
        });
    }
    MixtureOutput { components, alphas, reconstruction: reconstruction.unwrap() }
}

// ---------------------------------------------------------------------------
// Autoregressive decoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ArConfig {
    pub slot_dim: usize,
    /// Channels of a continuous token (mse mode input/output).
    pub token_dim: usize,
    /// Codebook size (ce mode vocabulary).
    pub vocab: usize,
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Sequence length h*w.
    pub positions: usize,
}

impl Default for ArConfig {
    fn default() -> Self {
        ArConfig {
            slot_dim: 64,
            token_dim: 16,
            vocab: 256,
            width: 64,
            heads: 4,
            blocks: 2,
            positions: 64,
        }
    }
}

/// Teacher-forcing input: either discrete code indices (ce mode) or the
/// continuous quantized rows (mse mode).
pub enum ArTokens<'a> {
    Discrete(&'a [usize]),
    Continuous(Var),
}

pub fn init_ar_decoder(bank: &mut ParamBank, rng: &mut StreamRng, cfg: &ArConfig) {
    let w = cfg.width;
    bank.insert("dec.ar.embed", rng.normal_tensor(&[cfg.vocab, w], 0.02));
    nn::init_linear(bank, rng, "dec.ar.in", cfg.token_dim, w);
    bank.insert("dec.ar.bos", rng.normal_tensor(&[1, w], 0.02));
    bank.insert("dec.ar.pos", rng.normal_tensor(&[cfg.positions, w], 0.02));
    nn::init_linear(bank, rng, "dec.ar.slots_k", cfg.slot_dim, w);
    nn::init_linear(bank, rng, "dec.ar.slots_v", cfg.slot_dim, w);
    for b in 0..cfg.blocks {
        let p = format!("dec.ar.b{b}");
        nn::init_layer_norm(bank, &format!("{p}.ln1"), w);
        nn::init_linear(bank, rng, &format!("{p}.wq"), w, w);
        nn::init_linear(bank, rng, &format!("{p}.wk"), w, w);
        nn::init_linear(bank, rng, &format!("{p}.wv"), w, w);
        nn::init_linear(bank, rng, &format!("{p}.wo"), w, w);
        nn::init_layer_norm(bank, &format!("{p}.ln2"), w);
        nn::init_linear(bank, rng, &format!("{p}.cq"), w, w);
        nn::init_linear(bank, rng, &format!("{p}.co"), w, w);
        nn::init_layer_norm(bank, &format!("{p}.ln3"), w);
        nn::init_linear(bank, rng, &format!("{p}.ff1"), w, 2 * w);
        nn::init_linear(bank, rng, &format!("{p}.ff2"), 2 * w, w);
    }
    nn::init_layer_norm(bank, "dec.ar.lnf", w);
    nn::init_linear(bank, rng, "dec.ar.head_ce", w, cfg.vocab);
    nn::init_linear(bank, rng, "dec.ar.head_mse", w, cfg.token_dim);
}

/// Causal decoding over the raster-ordered token grid. Returns per-position
/// predictions: `[positions, vocab]` logits for discrete tokens, or
/// `[positions, token_dim]` regressions for continuous ones. Output position
/// t attends to input tokens strictly before t (shifted right behind a
/// learned begin token) and to all slots.
pub fn decode_autoregressive(
    tape: &mut Tape,
    staged: &mut Staged,
    bank: &ParamBank,
    cfg: &ArConfig,
    slots: Var,
    tokens: ArTokens,
) -> Var {
    let embedded = match tokens {
        ArTokens::Discrete(idx) => {
            assert_eq!(idx.len(), cfg.positions, "token count must match positions");
            for &i in idx {
                assert!(i < cfg.vocab, "token id {i} outside vocabulary {}", cfg.vocab);
            }
            let table = staged.stage(tape, bank, "dec.ar.embed");
            tape.index_select_rows(table, idx)
        }
        ArTokens::Continuous(q) => {
            assert_eq!(tape.value(q).rows(), cfg.positions);
            let proj = stage_linear(tape, staged, bank, "dec.ar.in");
            nn::linear(tape, q, proj)
        }
    };
    // Shift right: drop the final token, prepend the begin token.
    let bos = staged.stage(tape, bank, "dec.ar.bos");
    let kept = tape.index_select_rows(embedded, &(0..cfg.positions - 1).collect::<Vec<_>>());
    let shifted = tape.concat_rows(bos, kept);
    let pos = staged.stage(tape, bank, "dec.ar.pos");
    let mut x = tape.add(shifted, pos);

    let sk = stage_linear(tape, staged, bank, "dec.ar.slots_k");
    let sv = stage_linear(tape, staged, bank, "dec.ar.slots_v");
    let slots_k = nn::linear(tape, slots, sk);
    let slots_v = nn::linear(tape, slots, sv);

    for b in 0..cfg.blocks {
        let p = format!("dec.ar.b{b}");
        let ln1 = stage_layer_norm(tape, staged, bank, &format!("{p}.ln1"));
        let n1 = layer_norm_affine(tape, x, ln1.0, ln1.1);
        let wq = stage_linear(tape, staged, bank, &format!("{p}.wq"));
        let wk = stage_linear(tape, staged, bank, &format!("{p}.wk"));
        let wv = stage_linear(tape, staged, bank, &format!("{p}.wv"));
        let q = nn::linear(tape, n1, wq);
        let k = nn::linear(tape, n1, wk);
        let v = nn::linear(tape, n1, wv);
        let att = nn::causal_multi_head_attention(tape, q, k, v, cfg.heads);
        let wo = stage_linear(tape, staged, bank, &format!("{p}.wo"));
        let att = nn::linear(tape, att, wo);
        x = tape.add(x, att);

        let ln2 = stage_layer_norm(tape, staged, bank, &format!("{p}.ln2"));
        let n2 = layer_norm_affine(tape, x, ln2.0, ln2.1);
        let cq = stage_linear(tape, staged, bank, &format!("{p}.cq"));
        let q2 = nn::linear(tape, n2, cq);
        let cross = multi_head_attention(tape, q2, slots_k, slots_v, cfg.heads);
        let co = stage_linear(tape, staged, bank, &format!("{p}.co"));
        let cross = nn::linear(tape, cross, co);
        x = tape.add(x, cross);

        let ln3 = stage_layer_norm(tape, staged, bank, &format!("{p}.ln3"));
        let n3 = layer_norm_affine(tape, x, ln3.0, ln3.1);
        let ff1 = stage_linear(tape, staged, bank, &format!("{p}.ff1"));
        let ff2 = stage_linear(tape, staged, bank, &format!("{p}.ff2"));
        let h = nn::linear(tape, n3, ff1);
        let h = tape.relu(h);
        let h = nn::linear(tape, h, ff2);
        x = tape.add(x, h);
    }

    let lnf = stage_layer_norm(tape, staged, bank, "dec.ar.lnf");
    let xf = layer_norm_affine(tape, x, lnf.0, lnf.1);
    let head = match tokens_mode_is_discrete(&tokens) {
        true => stage_linear(tape, staged, bank, "dec.ar.head_ce"),
        false => stage_linear(tape, staged, bank, "dec.ar.head_mse"),
    };
    nn::linear(tape, xf, head)
}

fn tokens_mode_is_discrete(tokens: &ArTokens) -> bool {
    matches!(tokens, ArTokens::Discrete(_))
}

// ---------------------------------------------------------------------------
// Diffusion decoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DiffusionConfig {
    pub slot_dim: usize,
    pub token_dim: usize,
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub positions: usize,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Sinusoidal timestep-embedding width (even).
    pub time_dim: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            slot_dim: 64,
            token_dim: 16,
            width: 64,
            heads: 4,
            blocks: 2,
            positions: 64,
            timesteps: 100,
            beta_start: 1e-4,
            beta_end: 0.07,
            time_dim: 32,
        }
    }
}

/// Linear-beta noise schedule; `alpha_bar(t)` for t in `[1, timesteps]`.
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(cfg: &DiffusionConfig) -> Self {
        assert!(cfg.timesteps >= 1);
        let t = cfg.timesteps;
        let mut betas = Vec::with_capacity(t);
        for i in 0..t {
            let frac = if t == 1 { 0.0 } else { i as f64 / (t - 1) as f64 };
            betas.push(cfg.beta_start + frac * (cfg.beta_end - cfg.beta_start));
        }
        let mut alpha_bar = Vec::with_capacity(t);
        let mut prod = 1.0;
        for &b in &betas {
            assert!(b > 0.0 && b < 1.0, "beta out of (0,1): {b}");
            prod *= 1.0 - b;
            alpha_bar.push(prod);
        }
        NoiseSchedule { betas, alpha_bar }
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(
            t >= 1 && t <= self.alpha_bar.len(),
            "timestep {t} outside [1, {}]",
            self.alpha_bar.len()
        );
        self.alpha_bar[t - 1]
    }

    pub fn timesteps(&self) -> usize {
        self.alpha_bar.len()
    }
}

pub fn init_diffusion_decoder(bank: &mut ParamBank, rng: &mut StreamRng, cfg: &DiffusionConfig) {
    let w = cfg.width;
    nn::init_linear(bank, rng, "dec.dif.in", cfg.token_dim, w);
    bank.insert("dec.dif.pos", rng.normal_tensor(&[cfg.positions, w], 0.02));
    nn::init_linear(bank, rng, "dec.dif.t1", cfg.time_dim, w);
    nn::init_linear(bank, rng, "dec.dif.t2", w, 2 * w);
    nn::init_linear(bank, rng, "dec.dif.slots_k", cfg.slot_dim, w);
    nn::init_linear(bank, rng, "dec.dif.slots_v", cfg.slot_dim, w);
    for b in 0..cfg.blocks {
        let p = format!("dec.dif.b{b}");
        nn::init_layer_norm(bank, &format!("{p}.ln1"), w);
        nn::init_linear(bank, rng, &format!("{p}.wq"), w, w);
        nn::init_linear(bank, rng, &format!("{p}.wk"), w, w);
        nn::init_linear(bank, rng, &format!("{p}.wv"), w, w);
        nn::init_linear(bank, rng, &format!("{p}.wo"), w, w);
        nn::init_layer_norm(bank, &format!("{p}.ln2"), w);
        nn::init_linear(bank, rng, &format!("{p}.cq"), w, w);
        nn::init_linear(bank, rng, &format!("{p}.co"), w, w);
        nn::init_layer_norm(bank, &format!("{p}.ln3"), w);
        nn::init_linear(bank, rng, &format!("{p}.ff1"), w, 2 * w);
        nn::init_linear(bank, rng, &format!("{p}.ff2"), 2 * w, w);
    }
    nn::init_layer_norm(bank, "dec.dif.lnf", w);
    nn::init_linear(bank, rng, "dec.dif.out", w, cfg.token_dim);
}

/// Noise the target `q` at timestep `t` and predict that noise from
/// `(q_t, t, slots)`. Returns the prediction on the tape and the drawn noise
/// as a plain tensor for the loss.
pub fn decode_diffusion(
    tape: &mut Tape,
    staged: &mut Staged,
    bank: &ParamBank,
    cfg: &DiffusionConfig,
    schedule: &NoiseSchedule,
    slots: Var,
    q: &Tensor,
    t: usize,
    rng: &mut StreamRng,
) -> (Var, Tensor) {
    assert_eq!(q.rows(), cfg.positions, "target grid must match positions");
    assert_eq!(q.cols(), cfg.token_dim);
    let ab = schedule.alpha_bar(t); // also validates t
    let mut eps = Tensor::zeros(q.shape.clone());
    rng.fill_normal(&mut eps.data);
    let mut q_t = Tensor::zeros(q.shape.clone());
    for i in 0..q.data.len() {
        q_t.data[i] = ab.sqrt() * q.data[i] + (1.0 - ab).sqrt() * eps.data[i];
    }

    let q_t = tape.leaf(q_t);
    let proj = stage_linear(tape, staged, bank, "dec.dif.in");
    let mut x = nn::linear(tape, q_t, proj);

    // FiLM from the timestep embedding: x * (1 + scale) + shift.
    let temb = tape.leaf(timestep_embedding(t, cfg.time_dim));
    let t1 = stage_linear(tape, staged, bank, "dec.dif.t1");
    let t2 = stage_linear(tape, staged, bank, "dec.dif.t2");
    let h = nn::linear(tape, temb, t1);
    let h = tape.relu(h);
    let film = nn::linear(tape, h, t2);
    let scale = tape.slice_cols(film, 0, cfg.width);
    let shift = tape.slice_cols(film, cfg.width, 2 * cfg.width);
    let scale = tape.add_scalar(scale, 1.0);
    x = tape.mul_row(x, scale);
    x = tape.add_row(x, shift);
    let pos = staged.stage(tape, bank, "dec.dif.pos");
    x = tape.add(x, pos);

    let sk = stage_linear(tape, staged, bank, "dec.dif.slots_k");
    let sv = stage_linear(tape, staged, bank, "dec.dif.slots_v");
    let slots_k = nn::linear(tape, slots, sk);
    let slots_v = nn::linear(tape, slots, sv);

    for b in 0..cfg.blocks {
        let p = format!("dec.dif.b{b}");
        let ln1 = stage_layer_norm(tape, staged, bank, &format!("{p}.ln1"));
        let n1 = layer_norm_affine(tape, x, ln1.0, ln1.1);
        let wq = stage_linear(tape, staged, bank, &format!("{p}.wq"));
        let wk = stage_linear(tape, staged, bank, &format!("{p}.wk"));
        let wv = stage_linear(tape, staged, bank, &format!("{p}.wv"));
        let qh = nn::linear(tape, n1, wq);
        let kh = nn::linear(tape, n1, wk);
        let vh = nn::linear(tape, n1, wv);
        let att = multi_head_attention(tape, qh, kh, vh, cfg.heads);
        let wo = stage_linear(tape, staged, bank, &format!("{p}.wo"));
        let att = nn::linear(tape, att, wo);
        x = tape.add(x, att);

        let ln2 = stage_layer_norm(tape, staged, bank, &format!("{p}.ln2"));
        let n2 = layer_norm_affine(tape, x, ln2.0, ln2.1);
        let cq = stage_linear(tape, staged, bank, &format!("{p}.cq"));
        let q2 = nn::linear(tape, n2, cq);
        let cross = multi_head_attention(tape, q2, slots_k, slots_v, cfg.heads);
        let co = stage_linear(tape, staged, bank, &format!("{p}.co"));
        let cross = nn::linear(tape, cross, co);
        x = tape.add(x, cross);

        let ln3 = stage_layer_norm(tape, staged, bank, &format!("{p}.ln3"));
        let n3 = layer_norm_affine(tape, x, ln3.0, ln3.1);
        let ff1 = stage_linear(tape, staged, bank, &format!("{p}.ff1"));
        let ff2 = stage_linear(tape, staged, bank, &format!("{p}.ff2"));
        let h = nn::linear(tape, n3, ff1);
        let h = tape.relu(h);
        let h = nn::linear(tape, h, ff2);
        x = tape.add(x, h);
    }

    let lnf = stage_layer_norm(tape, staged, bank, "dec.dif.lnf");
    let xf = layer_norm_affine(tape, x, lnf.0, lnf.1);
    let out = stage_linear(tape, staged, bank, "dec.dif.out");
    (nn::linear(tape, xf, out), eps)
}

// ---------------------------------------------------------------------------
// Reconstruction losses
// ---------------------------------------------------------------------------

/// Target of a reconstruction loss. Continuous targets are detached inside
/// the loss, so no gradient ever reaches the target's producers.
pub enum ReconTarget<'a> {
    /// Regression target `[rows, c]` (mixture and diffusion; also AR in mse
    /// mode).
    Continuous(Var),
    /// Code indices, one per position (AR in ce mode; `pred` must be logits).
    Discrete(&'a [usize]),
}

pub fn reconstruction_loss(tape: &mut Tape, pred: Var, target: &ReconTarget) -> Var {
    match target {
        ReconTarget::Continuous(t) => {
            let sg = tape.detach(*t);
            tape.mse(pred, sg)
        }
        ReconTarget::Discrete(idx) => {
            assert_eq!(tape.value(pred).rows(), idx.len(), "one index per logit row");
            let logp = tape.log_softmax_rows(pred);
            let picked = tape.gather_per_row(logp, idx);
            let mean = tape.mean(picked);
            tape.scale(mean, -1.0)
        }
    }
}

//! Vector quantization of encoder features into reconstruction targets.
//!
//! The codebook is factored: a frozen random template matrix `T0: [m, c0]`
//! and a trainable projection `W: [c, c0]` give the active codebook
//! `T = T0 W^T: [m, c]`. Features are matched to codes by squared Euclidean
//! distance; selection is argmin, or Gumbel-perturbed argmax of
//! `(-D + G) / tau` when sampling is on. During pretraining the quantized
//! targets are eased in with a cosine residual schedule (`alpha` from 1 to
//! 0) and the features are pulled toward zero mean, unit variance by a
//! normalization regularizer.

use crate::encoder::{adjust_for_quantization, ToyEncoder};
use crate::metrics::code_usage_stats;
use crate::nn::{cosine_lr, Adam, GradAccum, ParamBank, Staged};
use crate::tape::{Tape, Var};
use crate::tensor::{matmul_nt, Tensor};
use crate::tensorio::StreamRng;
use serde::Serialize;

#[derive(Debug, Clone)]
pub struct VqConfig {
    /// Codebook size `m`.
    pub num_codes: usize,
    /// Template dimension `c0`.
    pub template_dim: usize,
    /// Feature channels `c`.
    pub channels: usize,
    /// Gumbel temperature `tau`.
    pub temperature: f64,
    /// Commitment weight `beta`.
    pub beta: f64,
    /// Normalization regularizer weight `lambda`.
    pub lambda_norm: f64,
    pub use_gumbel: bool,
    pub use_annealing: bool,
}

impl Default for VqConfig {
    fn default() -> Self {
        VqConfig {
            num_codes: 256,
            template_dim: 32,
            channels: 16,
            temperature: 1.0,
            beta: 0.25,
            lambda_norm: 0.1,
            use_gumbel: true,
            use_annealing: true,
        }
    }
}

/// Frozen template matrix behind the factored codebook.
pub struct Codebook {
    /// `[m, c0]`, never trained.
    pub templates: Tensor,
}

impl Codebook {
    pub fn new(seed: u64, num_codes: usize, template_dim: usize) -> Self {
        let mut rng = StreamRng::new(seed);
        Codebook {
            templates: rng.normal_tensor(&[num_codes, template_dim], 1.0),
        }
    }

    /// Active codebook `T = T0 W^T` for a projection `w: [c, c0]`.
    pub fn active(&self, w: &Tensor) -> Tensor {
        matmul_nt(&self.templates, w)
    }
}

/// Registers the codebook projection `W: [c, c0]`.
pub fn init_vq(bank: &mut ParamBank, rng: &mut StreamRng, cfg: &VqConfig) {
    let std = (2.0 / (cfg.channels + cfg.template_dim) as f64).sqrt();
    bank.insert("vq.w", rng.normal_tensor(&[cfg.channels, cfg.template_dim], std));
}

/// Squared Euclidean distances between rows: `z: [n, c]`, `codebook: [m, c]`
/// -> `[n, m]`.
pub fn match_distances(z: &Tensor, codebook: &Tensor) -> Tensor {
    let (n, c) = (z.rows(), z.cols());
    let m = codebook.rows();
    assert_eq!(codebook.cols(), c, "feature/codebook width mismatch");
    let mut d = Tensor::zeros(vec![n, m]);
    for i in 0..n {
        let zr = &z.data[i * c..(i + 1) * c];
        for j in 0..m {
            let tr = &codebook.data[j * c..(j + 1) * c];
            let mut s = 0.0;
            for k in 0..c {
                let diff = zr[k] - tr[k];
                s += diff * diff;
            }
            d.data[i * m + j] = s;
        }
    }
    d
}

/// Picks one code per row of the distance matrix. Without noise this is the
/// argmin (ties break to the lowest index). With noise, each entry gets an
/// independent Gumbel(0,1) draw and the argmax of `-d / tau + g` is taken,
/// which samples code `j` with probability `softmax(-d / tau)[j]`. The noise
/// must stay outside the temperature division: rescaling noisy logits as a
/// whole would leave the argmax, and so the sampled distribution, the same
/// for every tau.
pub fn select_codes(d: &Tensor, gumbel: Option<&mut StreamRng>, temperature: f64) -> Vec<usize> {
    let (n, m) = (d.rows(), d.cols());
    assert!(temperature > 0.0, "temperature must be positive");
    let mut out = Vec::with_capacity(n);
    match gumbel {
        None => {
            for i in 0..n {
                let row = &d.data[i * m..(i + 1) * m];
                let mut best = 0;
                for j in 1..m {
                    if row[j] < row[best] {
                        best = j;
                    }
                }
                out.push(best);
            }
        }
        Some(rng) => {
            for i in 0..n {
                let row = &d.data[i * m..(i + 1) * m];
                let mut best = 0;
                let mut best_logit = f64::NEG_INFINITY;
                for (j, &dist) in row.iter().enumerate() {
                    let logit = -dist / temperature + rng.gumbel();
                    if logit > best_logit {
                        best_logit = logit;
                        best = j;
                    }
                }
                out.push(best);
            }
        }
    }
    out
}

/// Cosine annealing weight: 1 at step 0, 0.5 halfway, 0 from `total` on.
pub fn alpha_schedule(step: usize, total: usize) -> f64 {
    if total == 0 || step >= total {
        return 0.0;
    }
    0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// Residual blend `alpha * z + (1 - alpha) * q`, off tape.
pub fn apply_residual(z: &Tensor, q: &Tensor, alpha: f64) -> Tensor {
    assert_eq!(z.shape, q.shape);
    Tensor::new(
        z.shape.clone(),
        z.data
            .iter()
            .zip(&q.data)
            .map(|(&zv, &qv)| alpha * zv + (1.0 - alpha) * qv)
            .collect(),
    )
}

/// Straight-through estimator `z + sg(q - z)`: forwards `q`, sends the full
/// gradient to `z`.
pub fn straight_through(tape: &mut Tape, z: Var, q: Var) -> Var {
    tape.straight_through(z, q)
}

/// `lambda * MSE(z, sg(normalize(z)))` with mean and variance taken over all
/// elements jointly. Pulls features toward zero mean, unit variance without
/// backpropagating through the statistics.
pub fn normalization_regularizer(tape: &mut Tape, z: Var, lambda: f64, eps: f64) -> Var {
    let zv = tape.value(z);
    let n = zv.numel() as f64;
    let mean = zv.data.iter().sum::<f64>() / n;
    let var = zv.data.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    let target = zv.map(|v| (v - mean) * inv);
    let t = tape.leaf(target);
    let t = tape.detach(t);
    let l = tape.mse(z, t);
    tape.scale(l, lambda)
}

/// A quantized feature map: codewords and their indices.
#[derive(Debug, Clone)]
pub struct QuantizedTarget {
    /// `[n, c]` selected codewords.
    pub q: Tensor,
    pub indices: Vec<usize>,
}

/// Deterministic quantization of `z: [n, c]` against an active codebook
/// `[m, c]` (argmin distance, ties to the lowest index).
pub fn quantize(z: &Tensor, codebook: &Tensor) -> QuantizedTarget {
    let d = match_distances(z, codebook);
    let indices = select_codes(&d, None, 1.0);
    let c = codebook.cols();
    let mut q = Tensor::zeros(vec![z.rows(), c]);
    for (i, &j) in indices.iter().enumerate() {
        q.data[i * c..(i + 1) * c].copy_from_slice(&codebook.data[j * c..(j + 1) * c]);
    }
    QuantizedTarget { q, indices }
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct VqPretrainConfig {
    pub vq: VqConfig,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Steps per diagnostics line.
    pub epoch_len: usize,
}

impl Default for VqPretrainConfig {
    fn default() -> Self {
        VqPretrainConfig {
            vq: VqConfig::default(),
            steps: 1000,
            batch: 8,
            lr: 4e-4,
            epoch_len: 100,
        }
    }
}

/// One diagnostics line, serialized as JSON by the harness.
#[derive(Debug, Clone, Serialize)]
pub struct VqEpochLog {
    pub epoch: usize,
    pub recon_mse: f64,
    pub unique_codes: usize,
    pub usage_cv: f64,
    pub alpha: f64,
}

/// Registers the pixel decoder used only during pretraining: three
/// transposed convs (x2 each) from the feature grid back to RGB.
fn init_pixel_decoder(bank: &mut ParamBank, rng: &mut StreamRng, c: usize) {
    let plan = [(c, 32usize), (32, 16), (16, 3)];
    for (i, &(cin, cout)) in plan.iter().enumerate() {
        let std = (2.0 / (4 * cin) as f64).sqrt();
        bank.insert(&format!("pix.ct{}.w", i + 1), rng.normal_tensor(&[2, 2, cin, cout], std));
        bank.insert(&format!("pix.ct{}.b", i + 1), Tensor::zeros(vec![cout]));
    }
}

fn pixel_decoder(tape: &mut Tape, staged: &mut Staged, bank: &ParamBank, x: Var) -> Var {
    let mut h = x;
    for i in 1..=3 {
        let w = staged.stage(tape, bank, &format!("pix.ct{i}.w"));
        let b = staged.stage(tape, bank, &format!("pix.ct{i}.b"));
        h = tape.convt2x2(h, w, b);
        if i < 3 {
            h = tape.relu(h);
        }
    }
    tape.sigmoid(h)
}

pub struct VqPretrainResult {
    /// Trained parameters: `vq.w`, the `adjust_q.*` adapter, and the
    /// throwaway `pix.*` decoder.
    pub bank: ParamBank,
    pub codebook: Codebook,
    pub log: Vec<VqEpochLog>,
}

/// Trains the codebook projection and quantization adapter against a frozen
/// encoder. Loss: pixel reconstruction through a small transposed-conv
/// decoder (via the straight-through estimator), plus codebook alignment,
/// commitment, and the normalization regularizer.
pub fn pretrain_vq(
    encoder: &ToyEncoder,
    images: &[Tensor],
    cfg: &VqPretrainConfig,
    seed: u64,
) -> VqPretrainResult {
    assert!(!images.is_empty(), "pretraining needs at least one image");
    let c = cfg.vq.channels;
    assert_eq!(encoder.out_channels, c, "encoder/vq channel mismatch");

    let base_rng = StreamRng::new(seed);
    let mut init_rng = base_rng.split(0);
    let mut batch_rng = base_rng.split(1);
    let mut gumbel_rng = base_rng.split(2);

    let codebook = Codebook::new(seed ^ 0x5eed_c0de, cfg.vq.num_codes, cfg.vq.template_dim);
    let mut bank = ParamBank::new();
    init_vq(&mut bank, &mut init_rng, &cfg.vq);
    crate::encoder::init_adjust_quant(&mut bank, &mut init_rng, c);
    init_pixel_decoder(&mut bank, &mut init_rng, c);

    let encoder_hash = encoder.hash();
    let features: Vec<Tensor> = images.iter().map(|img| encoder.encode(img)).collect();

    let mut adam = Adam::new();
    let mut log = Vec::new();
    let mut epoch_recon = 0.0;
    let mut epoch_steps = 0usize;
    let mut epoch_indices: Vec<usize> = Vec::new();
    let mut epoch = 0usize;

    for step in 0..cfg.steps {
        let alpha = if cfg.vq.use_annealing {
            alpha_schedule(step, cfg.steps)
        } else {
            0.0
        };
        let lr = cosine_lr(cfg.lr, step, cfg.steps);

        let mut accum = GradAccum::new();
        let mut step_recon = 0.0;
        for _ in 0..cfg.batch {
            let i = batch_rng.uniform_int(images.len() as u64) as usize;
            let z0 = &features[i];
            let (fh, fw) = (z0.shape[0], z0.shape[1]);
            let n = fh * fw;

            let mut tape = Tape::new();
            let mut staged = Staged::new();
            let z0v = tape.leaf(z0.clone());
            let zq3 = adjust_for_quantization(&mut tape, &mut staged, &bank, z0v);
            let z = tape.reshape(zq3, vec![n, c]);

            // active codebook on tape: gradient reaches W through the
            // selected rows
            let t0 = tape.leaf(codebook.templates.clone());
            let t0 = tape.detach(t0);
            let w = staged.stage(&mut tape, &bank, "vq.w");
            let t_active = tape.matmul_nt(t0, w);

            let d = match_distances(tape.value(z), tape.value(t_active));
            let idx = if cfg.vq.use_gumbel {
                select_codes(&d, Some(&mut gumbel_rng), cfg.vq.temperature)
            } else {
                select_codes(&d, None, cfg.vq.temperature)
            };
            epoch_indices.extend_from_slice(&idx);
            let q_sel = tape.index_select_rows(t_active, &idx);

            // residual blend, then straight-through into the pixel decoder
            let za = tape.scale(z, alpha);
            let qa = tape.scale(q_sel, 1.0 - alpha);
            let q_blend = tape.add(za, qa);
            let dec_in = straight_through(&mut tape, z, q_blend);
            let dec_in3 = tape.reshape(dec_in, vec![fh, fw, c]);
            let recon = pixel_decoder(&mut tape, &mut staged, &bank, dec_in3);

            let img = tape.leaf(images[i].clone());
            let img = tape.detach(img);
            let l_recon = tape.mse(recon, img);

            // Alignment must see only the codebook side: routing it through
            // the blend would push z away from q with weight alpha*(1-alpha),
            // overpowering the commitment pull and blowing up the features.
            let z_sg = tape.detach(z);
            let l_align = tape.mse(z_sg, q_sel);
            let q_sg = tape.detach(q_blend);
            let l_commit = tape.mse(z, q_sg);
            let l_commit = tape.scale(l_commit, cfg.vq.beta);
            let l_norm = normalization_regularizer(&mut tape, z, cfg.vq.lambda_norm, 1e-5);

            let l = tape.add(l_recon, l_align);
            let l = tape.add(l, l_commit);
            let loss = tape.add(l, l_norm);

            step_recon += tape.value(l_recon).data[0];
            let grads = tape.backward(loss);
            accum.add(&staged, &grads);
        }
        adam.step(&mut bank, &accum.into_mean(), lr);

        epoch_recon += step_recon / cfg.batch as f64;
        epoch_steps += 1;
        if epoch_steps == cfg.epoch_len || step + 1 == cfg.steps {
            let (unique_codes, usage_cv) = code_usage_stats(&epoch_indices, cfg.vq.num_codes);
            log.push(VqEpochLog {
                epoch,
                recon_mse: epoch_recon / epoch_steps as f64,
                unique_codes,
                usage_cv,
                alpha,
            });
            epoch += 1;
            epoch_recon = 0.0;
            epoch_steps = 0;
            epoch_indices.clear();
        }
    }

    assert_eq!(encoder.hash(), encoder_hash, "frozen encoder drifted during pretraining");
    VqPretrainResult { bank, codebook, log }
}

//! Pipeline orchestration: dataset generation, VQ pretraining, OCL training
//! with the three target variants, evaluation, and the analysis entry points
//! used by the CLI.
//!
//! Target variants:
//! - `vvo`: targets are quantized features from the shared encoder.
//! - `no-quantize`: targets are the raw encoder features.
//! - `separate-encoder`: targets come from an independently seeded second
//!   encoder with its own quantizer.
//!
//! All three share the encoder-to-aggregator path and differ only in target
//! construction; with equal seeds the trainable parameters start bit-equal.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::aggregator::{
    aggregate, attn_to_masks_upsampled, init_aggregator, init_slots_queries, init_slots_sampled,
    init_transition, transition, AggregatorConfig,
};
use crate::analysis::{
    compare_objectness, estimate_p2, p2_separation_sweep, residual_bias_experiment, BiasWorld,
    ClusterWorld, ObjectnessReport, P2Estimate, SweepReport,
};
use crate::decoders::{
    decode_autoregressive, decode_diffusion, decode_mixture, init_ar_decoder,
    init_diffusion_decoder, init_mixture_decoder, reconstruction_loss, ArConfig, ArTokens,
    DiffusionConfig, MixtureConfig, NoiseSchedule, ReconTarget,
};
use crate::encoder::{
    adjust_for_aggregation, adjust_for_quantization_ref, init_adjust_agg, ToyEncoder,
    STRIDE_TOTAL,
};
use crate::metrics::{aggregate_eval, ari, ari_fg, mbo, miou, EvalReport};
use crate::nn::{clip_grad_norm, cosine_lr, Adam, GradAccum, ParamBank, Staged};
use crate::plot::{hstack_images, labels_to_rgb, svg_bar_pairs, svg_line_chart, write_ppm};
use crate::scenegen::{DatasetDir, SceneParams};
use crate::tape::{Tape, Var};
use crate::tensor::{IntGrid, Tensor};
use crate::tensorio::{
    derive_seed, load_checkpoint, save_checkpoint, tensor_file_from_f64, ConfigError, KeySpec,
    RunConfig, StreamRng, TensorData, TensorIoError,
};
use crate::vq::{pretrain_vq, quantize, Codebook, VqConfig, VqPretrainConfig};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Io(#[from] TensorIoError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("checkpoint/config mismatch: {0}")]
    Mismatch(String),
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },
    #[error("file access failed at {path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::File { path: path.to_path_buf(), source }
}

pub const CONFIG_SCHEMA: &[KeySpec] = &[
    KeySpec { name: "seed", default: "0", doc: "base seed; every stream derives from it" },
    KeySpec {
        name: "variant",
        default: "vvo",
        doc: "target construction: vvo | no-quantize | separate-encoder",
    },
    KeySpec { name: "decoder", default: "mixture", doc: "decoder family: mixture | ar | diffusion" },
    KeySpec { name: "data.samples", default: "64", doc: "dataset size" },
    KeySpec { name: "data.eval_count", default: "16", doc: "held-out samples at the end of the index" },
    KeySpec { name: "data.frames", default: "1", doc: "frames per sample; 1 = still images" },
    KeySpec { name: "data.height", default: "64", doc: "image height (multiple of 8)" },
    KeySpec { name: "data.width", default: "64", doc: "image width (multiple of 8)" },
    KeySpec { name: "data.min_objects", default: "2", doc: "minimum sprites per scene" },
    KeySpec { name: "data.max_objects", default: "5", doc: "maximum sprites per scene" },
    KeySpec { name: "data.min_size", default: "10.0", doc: "minimum sprite side/diameter, px" },
    KeySpec { name: "data.max_size", default: "20.0", doc: "maximum sprite side/diameter, px" },
    KeySpec { name: "data.noise_std", default: "0.02", doc: "pixel noise after rendering" },
    KeySpec { name: "enc.channels", default: "16", doc: "frozen encoder output channels" },
    KeySpec { name: "vq.num_codes", default: "256", doc: "codebook size m" },
    KeySpec { name: "vq.template_dim", default: "32", doc: "frozen template dimension" },
    KeySpec { name: "vq.temperature", default: "1.0", doc: "Gumbel sampling temperature" },
    KeySpec { name: "vq.beta", default: "0.25", doc: "commitment loss weight" },
    KeySpec { name: "vq.lambda_norm", default: "0.1", doc: "normalization regularizer weight" },
    KeySpec { name: "vq.gumbel", default: "true", doc: "sample codes with Gumbel noise during pretraining" },
    KeySpec { name: "vq.anneal", default: "true", doc: "blend residual target from features to codes" },
    KeySpec { name: "vq.steps", default: "1000", doc: "pretraining steps" },
    KeySpec { name: "vq.batch", default: "8", doc: "pretraining batch size" },
    KeySpec { name: "vq.lr", default: "0.0004", doc: "pretraining learning rate" },
    KeySpec { name: "vq.epoch_len", default: "100", doc: "steps per pretraining log line" },
    KeySpec { name: "agg.slots", default: "6", doc: "number of slots" },
    KeySpec { name: "agg.slot_dim", default: "64", doc: "slot width (multiple of 4)" },
    KeySpec { name: "agg.iterations", default: "3", doc: "attention iterations" },
    KeySpec {
        name: "agg.learned_queries",
        default: "true",
        doc: "learned initial queries; false samples from a learned Gaussian",
    },
    KeySpec { name: "agg.mlp_hidden", default: "128", doc: "slot-update MLP hidden width" },
    KeySpec { name: "dec.width", default: "64", doc: "transformer width (ar/diffusion)" },
    KeySpec { name: "dec.heads", default: "4", doc: "attention heads (ar/diffusion/transition)" },
    KeySpec { name: "dec.blocks", default: "2", doc: "transformer blocks (ar/diffusion)" },
    KeySpec { name: "dec.hidden", default: "128", doc: "mixture decoder MLP width" },
    KeySpec { name: "dec.ar_mode", default: "ce", doc: "ar decoder loss: ce | mse" },
    KeySpec { name: "dec.timesteps", default: "100", doc: "diffusion steps T" },
    KeySpec { name: "dec.beta_start", default: "0.0001", doc: "diffusion beta at t=1" },
    KeySpec { name: "dec.beta_end", default: "0.07", doc: "diffusion beta at t=T" },
    KeySpec { name: "dec.time_dim", default: "32", doc: "timestep embedding width (even)" },
    KeySpec { name: "train.steps", default: "3000", doc: "OCL training steps" },
    KeySpec { name: "train.batch", default: "16", doc: "OCL batch size" },
    KeySpec { name: "train.lr", default: "0.0004", doc: "OCL learning rate (cosine decay)" },
    KeySpec { name: "train.clip", default: "1.0", doc: "gradient-norm clip; 0 disables" },
    KeySpec { name: "train.log_every", default: "50", doc: "steps per training log line" },
    KeySpec { name: "train.eval_every", default: "1000", doc: "steps between held-out evaluations; 0 disables" },
];

pub fn default_config() -> RunConfig {
    RunConfig::defaults(CONFIG_SCHEMA)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Vvo,
    NoQuantize,
    SeparateEncoder,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Variant, HarnessError> {
        match s {
            "vvo" => Ok(Variant::Vvo),
            "no-quantize" => Ok(Variant::NoQuantize),
            "separate-encoder" => Ok(Variant::SeparateEncoder),
            other => Err(HarnessError::Invalid(format!("unknown variant `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Vvo => "vvo",
            Variant::NoQuantize => "no-quantize",
            Variant::SeparateEncoder => "separate-encoder",
        }
    }

    /// Whether targets come from a quantizer (and so need pretraining).
    pub fn quantized(self) -> bool {
        !matches!(self, Variant::NoQuantize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    Mixture,
    ArCe,
    ArMse,
    Diffusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn parse(s: &str) -> Result<Split, HarnessError> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            other => Err(HarnessError::Invalid(format!("unknown split `{other}`"))),
        }
    }
}

/// Everything parsed and validated out of a `RunConfig`.
pub struct Settings {
    pub seed: u64,
    pub variant: Variant,
    pub decoder: DecoderKind,
    pub scene: SceneParams,
    pub samples: usize,
    pub eval_count: usize,
    pub frames: usize,
    pub channels: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub vq: VqPretrainConfig,
    pub agg: AggregatorConfig,
    pub mix: MixtureConfig,
    pub ar: ArConfig,
    pub dif: DiffusionConfig,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub clip: f64,
    pub log_every: usize,
    pub eval_every: usize,
}

fn get_usize(cfg: &RunConfig, key: &str) -> Result<usize, HarnessError> {
    let v = cfg.get_int(key)?;
    usize::try_from(v).map_err(|_| HarnessError::Invalid(format!("{key} must be nonnegative")))
}

pub fn settings(cfg: &RunConfig) -> Result<Settings, HarnessError> {
    let seed = cfg.get_int("seed")? as u64;
    let variant = Variant::parse(cfg.get_str("variant"))?;
    let channels = get_usize(cfg, "enc.channels")?;

    let height = get_usize(cfg, "data.height")?;
    let width = get_usize(cfg, "data.width")?;
    if height % STRIDE_TOTAL != 0 || width % STRIDE_TOTAL != 0 {
        return Err(HarnessError::Invalid(format!(
            "image size {height}x{width} must be a multiple of the encoder stride {STRIDE_TOTAL}"
        )));
    }
    let (grid_h, grid_w) = (height / STRIDE_TOTAL, width / STRIDE_TOTAL);
    let positions = grid_h * grid_w;

    let samples = get_usize(cfg, "data.samples")?;
    let eval_count = get_usize(cfg, "data.eval_count")?;
    if eval_count >= samples {
        return Err(HarnessError::Invalid(format!(
            "data.eval_count {eval_count} must leave training samples out of {samples}"
        )));
    }
    let frames = get_usize(cfg, "data.frames")?.max(1);
    let scene = SceneParams {
        height,
        width,
        min_objects: get_usize(cfg, "data.min_objects")?,
        max_objects: get_usize(cfg, "data.max_objects")?,
        min_size: cfg.get_float("data.min_size")?,
        max_size: cfg.get_float("data.max_size")?,
        noise_std: cfg.get_float("data.noise_std")?,
    };

    let vq = VqPretrainConfig {
        vq: VqConfig {
            num_codes: get_usize(cfg, "vq.num_codes")?,
            template_dim: get_usize(cfg, "vq.template_dim")?,
            channels,
            temperature: cfg.get_float("vq.temperature")?,
            beta: cfg.get_float("vq.beta")?,
            lambda_norm: cfg.get_float("vq.lambda_norm")?,
            use_gumbel: cfg.get_bool("vq.gumbel")?,
            use_annealing: cfg.get_bool("vq.anneal")?,
        },
        steps: get_usize(cfg, "vq.steps")?,
        batch: get_usize(cfg, "vq.batch")?,
        lr: cfg.get_float("vq.lr")?,
        epoch_len: get_usize(cfg, "vq.epoch_len")?.max(1),
    };

    let heads = get_usize(cfg, "dec.heads")?;
    let slot_dim = get_usize(cfg, "agg.slot_dim")?;
    if slot_dim % heads != 0 {
        return Err(HarnessError::Invalid(format!(
            "agg.slot_dim {slot_dim} must be divisible by dec.heads {heads}"
        )));
    }
    let num_slots = get_usize(cfg, "agg.slots")?;
    if num_slots > positions {
        return Err(HarnessError::Invalid(format!(
            "agg.slots {num_slots} exceeds feature positions {positions}"
        )));
    }
    let agg = AggregatorConfig {
        num_slots,
        slot_dim,
        input_dim: channels,
        iterations: get_usize(cfg, "agg.iterations")?.max(1),
        learned_queries: cfg.get_bool("agg.learned_queries")?,
        mlp_hidden: get_usize(cfg, "agg.mlp_hidden")?,
        transition_heads: heads,
    };

    let dec_width = get_usize(cfg, "dec.width")?;
    if dec_width % heads != 0 {
        return Err(HarnessError::Invalid(format!(
            "dec.width {dec_width} must be divisible by dec.heads {heads}"
        )));
    }
    let decoder = match (cfg.get_str("decoder"), cfg.get_str("dec.ar_mode")) {
        ("mixture", _) => DecoderKind::Mixture,
        ("ar", "ce") => DecoderKind::ArCe,
        ("ar", "mse") => DecoderKind::ArMse,
        ("ar", other) => {
            return Err(HarnessError::Invalid(format!("unknown dec.ar_mode `{other}`")))
        }
        ("diffusion", _) => DecoderKind::Diffusion,
        (other, _) => return Err(HarnessError::Invalid(format!("unknown decoder `{other}`"))),
    };
    if decoder == DecoderKind::ArCe && !variant.quantized() {
        return Err(HarnessError::Invalid(
            "decoder ar with dec.ar_mode ce needs discrete codes; variant no-quantize provides none"
                .into(),
        ));
    }

    let mix = MixtureConfig {
        slot_dim,
        out_channels: channels,
        hidden: get_usize(cfg, "dec.hidden")?,
        height: grid_h,
        width: grid_w,
    };
    let ar = ArConfig {
        slot_dim,
        token_dim: channels,
        vocab: vq.vq.num_codes,
        width: dec_width,
        heads,
        blocks: get_usize(cfg, "dec.blocks")?,
        positions,
    };
    let time_dim = get_usize(cfg, "dec.time_dim")?;
    if time_dim % 2 != 0 {
        return Err(HarnessError::Invalid("dec.time_dim must be even".into()));
    }
    let dif = DiffusionConfig {
        slot_dim,
        token_dim: channels,
        width: dec_width,
        heads,
        blocks: get_usize(cfg, "dec.blocks")?,
        positions,
        timesteps: get_usize(cfg, "dec.timesteps")?,
        beta_start: cfg.get_float("dec.beta_start")?,
        beta_end: cfg.get_float("dec.beta_end")?,
        time_dim,
    };

    Ok(Settings {
        seed,
        variant,
        decoder,
        scene,
        samples,
        eval_count,
        frames,
        channels,
        grid_h,
        grid_w,
        vq,
        agg,
        mix,
        ar,
        dif,
        steps: get_usize(cfg, "train.steps")?,
        batch: get_usize(cfg, "train.batch")?.max(1),
        lr: cfg.get_float("train.lr")?,
        clip: cfg.get_float("train.clip")?,
        log_every: get_usize(cfg, "train.log_every")?.max(1),
        eval_every: get_usize(cfg, "train.eval_every")?,
    })
}

// Seed tags for the independent streams derived from the base seed.
const TAG_ENCODER: u64 = 1;
const TAG_TARGET_ENCODER: u64 = 2;
const TAG_PRETRAIN: u64 = 3;
const TAG_AGG_INIT: u64 = 10;
const TAG_DEC_INIT: u64 = 11;
const TAG_BATCH: u64 = 12;
const TAG_STEP: u64 = 13;
const TAG_EVAL: u64 = 20;

fn primary_encoder(s: &Settings) -> ToyEncoder {
    ToyEncoder::new(derive_seed(s.seed, TAG_ENCODER), s.channels)
}

/// Encoder whose features feed target construction. Identical to the
/// aggregation encoder except under `separate-encoder`.
fn target_encoder(s: &Settings) -> ToyEncoder {
    match s.variant {
        Variant::SeparateEncoder => {
            ToyEncoder::new(derive_seed(s.seed, TAG_TARGET_ENCODER), s.channels)
        }
        _ => primary_encoder(s),
    }
}

fn train_indices(s: &Settings, data: &DatasetDir) -> Vec<usize> {
    (0..data.len() - s.eval_count.min(data.len())).collect()
}

fn eval_indices(s: &Settings, data: &DatasetDir) -> Vec<usize> {
    (data.len() - s.eval_count.min(data.len())..data.len()).collect()
}

/// Frames of sample `i` as `[h, w, 3]` tensors (one for stills).
fn image_frames(data: &DatasetDir, i: usize, frames: usize) -> Result<Vec<Tensor>, HarnessError> {
    let img = data.image(i)?;
    if frames <= 1 {
        return Ok(vec![img]);
    }
    let (t, h, w) = (img.shape[0], img.shape[1], img.shape[2]);
    let mut out = Vec::with_capacity(t);
    for f in 0..t {
        let mut frame = Tensor::zeros(vec![h, w, 3]);
        let stride = h * w * 3;
        frame.data.copy_from_slice(&img.data[f * stride..(f + 1) * stride]);
        out.push(frame);
    }
    Ok(out)
}

fn label_frames(data: &DatasetDir, i: usize, frames: usize) -> Result<Vec<IntGrid>, HarnessError> {
    if frames <= 1 {
        Ok(vec![data.labels(i)?])
    } else {
        Ok(data.label_frames(i)?)
    }
}

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

pub fn run_gen_data(cfg: &RunConfig, out: &Path) -> Result<DatasetDir, HarnessError> {
    let s = settings(cfg)?;
    let data = DatasetDir::create(out, &s.scene, s.samples, s.frames, s.seed)?;
    let meta = out.join("meta.txt");
    fs::write(&meta, cfg.format()).map_err(file_err(&meta))?;
    Ok(data)
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct PretrainSummary {
    pub checkpoint_dir: PathBuf,
    /// Final unique-code count and reconstruction error, from the last log
    /// line (zeros when pretraining is skipped).
    pub final_unique_codes: usize,
    pub final_recon_mse: f64,
    pub quantized: bool,
}

const TEMPLATES_KEY: &str = "codebook.templates";

pub fn run_pretrain(
    cfg: &RunConfig,
    data_root: &Path,
    out_dir: &Path,
) -> Result<PretrainSummary, HarnessError> {
    let s = settings(cfg)?;
    fs::create_dir_all(out_dir).map_err(file_err(out_dir))?;

    let meta = out_dir.join("meta.txt");
    fs::write(&meta, cfg.format()).map_err(file_err(&meta))?;
    let log_path = out_dir.join("pretrain_log.jsonl");

    if !s.variant.quantized() {
        save_checkpoint(out_dir, &Default::default())?;
        fs::write(&log_path, "").map_err(file_err(&log_path))?;
        return Ok(PretrainSummary {
            checkpoint_dir: out_dir.to_path_buf(),
            final_unique_codes: 0,
            final_recon_mse: 0.0,
            quantized: false,
        });
    }

    let data = DatasetDir::open(data_root)?;
    let encoder = target_encoder(&s);
    let mut images = Vec::new();
    for i in train_indices(&s, &data) {
        images.extend(image_frames(&data, i, s.frames)?);
    }
    let result = pretrain_vq(&encoder, &images, &s.vq, derive_seed(s.seed, TAG_PRETRAIN));

    let mut named = result.bank.to_named_tensors();
    named.insert(TEMPLATES_KEY.to_string(), tensor_file_from_f64(&result.codebook.templates));
    save_checkpoint(out_dir, &named)?;

    let mut log_text = String::new();
    for line in &result.log {
        log_text.push_str(&serde_json::to_string(line).expect("log serialization"));
        log_text.push('\n');
    }
    fs::write(&log_path, log_text).map_err(file_err(&log_path))?;

    let last = result.log.last();
    Ok(PretrainSummary {
        checkpoint_dir: out_dir.to_path_buf(),
        final_unique_codes: last.map_or(0, |l| l.unique_codes),
        final_recon_mse: last.map_or(0.0, |l| l.recon_mse),
        quantized: true,
    })
}

/// Compares the stored config of a checkpoint against the current one over
/// the given key prefixes (a bare prefix also matches the exact key).
fn check_meta(
    stored: &RunConfig,
    current: &RunConfig,
    prefixes: &[&str],
    what: &str,
) -> Result<(), HarnessError> {
    for spec in CONFIG_SCHEMA {
        let relevant =
            prefixes.iter().any(|p| spec.name == *p || spec.name.starts_with(&format!("{p}.")));
        if relevant && stored.get_str(spec.name) != current.get_str(spec.name) {
            return Err(HarnessError::Mismatch(format!(
                "{what}: key `{}` was `{}` at checkpoint time but `{}` now",
                spec.name,
                stored.get_str(spec.name),
                current.get_str(spec.name)
            )));
        }
    }
    Ok(())
}

fn load_meta(dir: &Path) -> Result<RunConfig, HarnessError> {
    Ok(RunConfig::load(&dir.join("meta.txt"), CONFIG_SCHEMA)?)
}

// ---------------------------------------------------------------------------
// Target construction
// ---------------------------------------------------------------------------

struct SampleTarget {
    /// One `[positions, c]` grid per frame.
    q_frames: Vec<Tensor>,
    /// Code ids per frame (quantized variants only).
    code_frames: Option<Vec<Vec<usize>>>,
}

struct TargetBuilder {
    encoder: ToyEncoder,
    /// Pretrained adapter + projection and the active codebook, when
    /// quantizing.
    quant: Option<(ParamBank, Tensor)>,
}

impl TargetBuilder {
    fn from_checkpoint(s: &Settings, pretrain_dir: Option<&Path>) -> Result<Self, HarnessError> {
        let encoder = target_encoder(s);
        if !s.variant.quantized() {
            return Ok(TargetBuilder { encoder, quant: None });
        }
        let dir = pretrain_dir.ok_or_else(|| {
            HarnessError::Invalid(format!(
                "variant {} needs a pretrained quantizer checkpoint",
                s.variant.as_str()
            ))
        })?;
        let mut named = load_checkpoint(dir)?;
        let templates_file = named.remove(TEMPLATES_KEY).ok_or_else(|| {
            HarnessError::Mismatch(format!("checkpoint lacks `{TEMPLATES_KEY}`"))
        })?;
        let TensorData::F32(values) = &templates_file.data else {
            return Err(HarnessError::Mismatch(format!("`{TEMPLATES_KEY}` is not float32")));
        };
        let templates = Tensor::new(
            templates_file.dims.iter().map(|&d| d as usize).collect(),
            values.iter().map(|&v| v as f64).collect(),
        );
        let bank = ParamBank::from_named_tensors(&named)?;
        if !bank.contains("vq.w") {
            return Err(HarnessError::Mismatch("checkpoint lacks `vq.w`".into()));
        }
        let active = Codebook { templates }.active(bank.get("vq.w"));
        Ok(TargetBuilder { encoder, quant: Some((bank, active)) })
    }

    /// Hash of everything targets depend on, for the freeze audit.
    fn hash(&self) -> [u8; 32] {
        let enc = hash_tensor(self.encoder.hash());
        match &self.quant {
            Some((bank, active)) => {
                let b = hash_tensor(bank.hash());
                crate::tensorio::param_hash(&[("enc", &enc), ("bank", &b), ("active", active)])
            }
            None => crate::tensorio::param_hash(&[("enc", &enc)]),
        }
    }

    fn build(&self, frames: &[Tensor], positions: usize, c: usize) -> SampleTarget {
        let mut q_frames = Vec::with_capacity(frames.len());
        let mut code_frames: Option<Vec<Vec<usize>>> =
            self.quant.as_ref().map(|_| Vec::with_capacity(frames.len()));
        for frame in frames {
            let z = self.encoder.encode(frame);
            match &self.quant {
                Some((bank, active)) => {
                    let adjusted = adjust_for_quantization_ref(bank, &z);
                    let flat = adjusted.reshaped(vec![positions, c]);
                    let qt = quantize(&flat, active);
                    q_frames.push(qt.q);
                    code_frames.as_mut().unwrap().push(qt.indices);
                }
                None => q_frames.push(z.reshaped(vec![positions, c])),
            }
        }
        SampleTarget { q_frames, code_frames }
    }
}

/// Hashes are folded into the target audit by embedding them as tiny tensors.
fn hash_tensor(h: [u8; 32]) -> Tensor {
    Tensor::new(vec![1, 32], h.iter().map(|&b| b as f64).collect())
}

/// Writes precomputed targets into the dataset directory (`features/`,
/// `codes/`) so they are visibly constant during training.
fn precompute_targets(
    s: &Settings,
    data: &DatasetDir,
    builder: &TargetBuilder,
) -> Result<Vec<SampleTarget>, HarnessError> {
    let positions = s.grid_h * s.grid_w;
    let mut targets = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let frames = image_frames(data, i, s.frames)?;
        let target = builder.build(&frames, positions, s.channels);

        let mut stacked = Tensor::zeros(vec![target.q_frames.len() * positions, s.channels]);
        for (f, q) in target.q_frames.iter().enumerate() {
            let stride = positions * s.channels;
            stacked.data[f * stride..(f + 1) * stride].copy_from_slice(&q.data);
        }
        let codes = target.code_frames.as_ref().map(|frames_codes| {
            let mut grid = IntGrid::zeros(frames_codes.len() * s.grid_h, s.grid_w);
            for (f, codes) in frames_codes.iter().enumerate() {
                for (p, &code) in codes.iter().enumerate() {
                    grid.set(f * s.grid_h + p / s.grid_w, p % s.grid_w, code as i32);
                }
            }
            grid
        });
        data.write_features(i, &stacked, codes.as_ref())?;
        targets.push(target);
    }
    Ok(targets)
}

// ---------------------------------------------------------------------------
// OCL training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
struct TrainLogLine {
    step: usize,
    loss: f64,
    lr: f64,
}

#[derive(Debug, Clone, Serialize)]
struct EvalLogLine {
    step: usize,
    ari: f64,
    ari_fg: f64,
    miou: f64,
    mbo: f64,
}

#[derive(Debug)]
pub struct TrainSummary {
    pub checkpoint_dir: PathBuf,
    pub first_loss: f64,
    pub final_loss: f64,
    /// Frozen-input audit: encoder and target-construction hashes are equal
    /// before and after training, trainable parameters changed.
    pub frozen_inputs_unchanged: bool,
    pub trained_params_changed: bool,
}

fn init_trained_bank(s: &Settings) -> ParamBank {
    let mut bank = ParamBank::new();
    init_adjust_agg(&mut bank, s.channels);
    let mut agg_rng = StreamRng::new(derive_seed(s.seed, TAG_AGG_INIT));
    init_aggregator(&mut bank, &mut agg_rng, &s.agg);
    if s.frames > 1 {
        init_transition(&mut bank, &mut agg_rng, &s.agg);
    }
    let mut dec_rng = StreamRng::new(derive_seed(s.seed, TAG_DEC_INIT));
    match s.decoder {
        DecoderKind::Mixture => init_mixture_decoder(&mut bank, &mut dec_rng, &s.mix),
        DecoderKind::ArCe | DecoderKind::ArMse => init_ar_decoder(&mut bank, &mut dec_rng, &s.ar),
        DecoderKind::Diffusion => init_diffusion_decoder(&mut bank, &mut dec_rng, &s.dif),
    }
    bank
}

/// Forward pass for one sample: shared aggregation path, then the configured
/// decoder loss, averaged over frames. Returns the loss and the final
/// frame's attention.
#[allow(clippy::too_many_arguments)]
fn sample_loss(
    tape: &mut Tape,
    staged: &mut Staged,
    bank: &ParamBank,
    s: &Settings,
    schedule: Option<&NoiseSchedule>,
    z_frames: &[Tensor],
    target: &SampleTarget,
    slot_rng: &mut StreamRng,
    step_rng: &mut StreamRng,
) -> (Var, Var) {
    let mut total: Option<Var> = None;
    let mut last_attn = None;
    let mut carried: Option<Var> = None;
    for (f, z_plain) in z_frames.iter().enumerate() {
        let z = tape.leaf(z_plain.clone());
        let z = adjust_for_aggregation(tape, staged, bank, z);
        let init = match carried {
            Some(slots) => transition(tape, staged, bank, &s.agg, slots),
            None => {
                if s.agg.learned_queries {
                    init_slots_queries(tape, staged, bank)
                } else {
                    init_slots_sampled(tape, staged, bank, &s.agg, slot_rng)
                }
            }
        };
        let state = aggregate(tape, staged, bank, &s.agg, z, init);
        if s.frames > 1 {
            carried = Some(state.slots);
        }
        last_attn = Some(state.attn);

        let q = &target.q_frames[f];
        let loss_f = match s.decoder {
            DecoderKind::Mixture => {
                let out = decode_mixture(tape, staged, bank, &s.mix, state.slots);
                let qv = tape.leaf(q.clone());
                reconstruction_loss(tape, out.reconstruction, &ReconTarget::Continuous(qv))
            }
            DecoderKind::ArCe => {
                let codes = &target.code_frames.as_ref().expect("ce needs codes")[f];
                let logits = decode_autoregressive(
                    tape,
                    staged,
                    bank,
                    &s.ar,
                    state.slots,
                    ArTokens::Discrete(codes),
                );
                reconstruction_loss(tape, logits, &ReconTarget::Discrete(codes))
            }
            DecoderKind::ArMse => {
                let qv = tape.leaf(q.clone());
                let preds = decode_autoregressive(
                    tape,
                    staged,
                    bank,
                    &s.ar,
                    state.slots,
                    ArTokens::Continuous(qv),
                );
                reconstruction_loss(tape, preds, &ReconTarget::Continuous(qv))
            }
            DecoderKind::Diffusion => {
                let schedule = schedule.expect("diffusion schedule");
                let t = 1 + step_rng.uniform_int(s.dif.timesteps as u64) as usize;
                let (eps_hat, eps) = decode_diffusion(
                    tape, staged, bank, &s.dif, schedule, state.slots, q, t, step_rng,
                );
                let ev = tape.leaf(eps);
                reconstruction_loss(tape, eps_hat, &ReconTarget::Continuous(ev))
            }
        };
        total = Some(match total {
            Some(prev) => tape.add(prev, loss_f),
            None => loss_f,
        });
    }
    let total = total.expect("at least one frame");
    let loss = tape.scale(total, 1.0 / z_frames.len() as f64);
    (loss, last_attn.expect("attention"))
}

pub fn run_train(
    cfg: &RunConfig,
    data_root: &Path,
    pretrain_dir: Option<&Path>,
    out_dir: &Path,
) -> Result<TrainSummary, HarnessError> {
    let s = settings(cfg)?;
    let data = DatasetDir::open(data_root)?;
    fs::create_dir_all(out_dir).map_err(file_err(out_dir))?;
    if let Some(dir) = pretrain_dir {
        check_meta(&load_meta(dir)?, cfg, &["seed", "variant", "enc", "vq", "data"], "pretrain")?;
    }
    if data_root.join("meta.txt").is_file() {
        check_meta(&load_meta(data_root)?, cfg, &["data"], "dataset")?;
    }

    let builder = TargetBuilder::from_checkpoint(&s, pretrain_dir)?;
    let targets = precompute_targets(&s, &data, &builder)?;
    let target_hash_before = builder.hash();

    let encoder = primary_encoder(&s);
    let encoder_hash_before = encoder.hash();
    let positions = s.grid_h * s.grid_w;
    let mut z_cache: Vec<Vec<Tensor>> = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let frames = image_frames(&data, i, s.frames)?;
        z_cache.push(
            frames
                .iter()
                .map(|fr| encoder.encode(fr).reshaped(vec![positions, s.channels]))
                .collect(),
        );
    }

    let mut bank = init_trained_bank(&s);
    let hash_at_init = bank.hash();
    let schedule =
        matches!(s.decoder, DecoderKind::Diffusion).then(|| NoiseSchedule::new(&s.dif));

    let train_idx = train_indices(&s, &data);
    let mut batch_rng = StreamRng::new(derive_seed(s.seed, TAG_BATCH));
    let step_base = StreamRng::new(derive_seed(s.seed, TAG_STEP));
    let mut adam = Adam::new();
    let mut train_log = String::new();
    let mut eval_log = String::new();
    let mut first_loss = f64::NAN;
    let mut final_loss = f64::NAN;

    for step in 0..s.steps {
        let mut acc = GradAccum::new();
        let mut batch_loss = 0.0;
        for k in 0..s.batch {
            let i = train_idx[batch_rng.uniform_int(train_idx.len() as u64) as usize];
            // Per-(step, sample) streams keep slot sampling and decoder noise
            // independent of batch composition and decoder family.
            let draw = (step * s.batch + k) as u64;
            let mut slot_rng = step_base.split(2 * draw);
            let mut noise_rng = step_base.split(2 * draw + 1);
            let mut tape = Tape::new();
            let mut staged = Staged::new();
            let (loss, _) = sample_loss(
                &mut tape,
                &mut staged,
                &bank,
                &s,
                schedule.as_ref(),
                &z_cache[i],
                &targets[i],
                &mut slot_rng,
                &mut noise_rng,
            );
            let value = tape.value(loss).data[0];
            if !value.is_finite() {
                return Err(HarnessError::NonFinite { step });
            }
            batch_loss += value / s.batch as f64;
            let grads = tape.backward(loss);
            acc.add(&staged, &grads);
        }
        let mut grads = acc.into_mean();
        if s.clip > 0.0 {
            clip_grad_norm(&mut grads, s.clip);
        }
        let lr = cosine_lr(s.lr, step, s.steps);
        adam.step(&mut bank, &grads, lr);

        if step == 0 {
            first_loss = batch_loss;
        }
        final_loss = batch_loss;
        if step % s.log_every == 0 || step + 1 == s.steps {
            let line = TrainLogLine { step, loss: batch_loss, lr };
            train_log.push_str(&serde_json::to_string(&line).expect("log serialization"));
            train_log.push('\n');
        }
        if s.eval_every > 0 && (step + 1) % s.eval_every == 0 {
            let report = evaluate(&s, &data, &bank, &encoder, &eval_indices(&s, &data), None)?;
            let line = EvalLogLine {
                step: step + 1,
                ari: report.ari,
                ari_fg: report.ari_fg,
                miou: report.miou,
                mbo: report.mbo,
            };
            eval_log.push_str(&serde_json::to_string(&line).expect("log serialization"));
            eval_log.push('\n');
        }
    }

    // Freeze audit: nothing upstream of the trainable parameters moved.
    let frozen_inputs_unchanged =
        encoder.hash() == encoder_hash_before && builder.hash() == target_hash_before;
    let trained_params_changed = s.steps == 0 || bank.hash() != hash_at_init;

    save_checkpoint(out_dir, &bank.to_named_tensors())?;
    let meta = out_dir.join("meta.txt");
    fs::write(&meta, cfg.format()).map_err(file_err(&meta))?;
    let tl = out_dir.join("train_log.jsonl");
    fs::write(&tl, train_log).map_err(file_err(&tl))?;
    let el = out_dir.join("eval_log.jsonl");
    fs::write(&el, eval_log).map_err(file_err(&el))?;

    Ok(TrainSummary {
        checkpoint_dir: out_dir.to_path_buf(),
        first_loss,
        final_loss,
        frozen_inputs_unchanged,
        trained_params_changed,
    })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Predicted full-resolution masks for one sample (per frame).
fn predict_masks(
    s: &Settings,
    bank: &ParamBank,
    encoder: &ToyEncoder,
    frames: &[Tensor],
    sample_id: usize,
) -> Vec<IntGrid> {
    let positions = s.grid_h * s.grid_w;
    let mut slot_rng = StreamRng::new(derive_seed(s.seed, TAG_EVAL)).split(sample_id as u64);
    let mut tape = Tape::new();
    let mut staged = Staged::new();
    let mut carried: Option<Var> = None;
    let mut masks = Vec::with_capacity(frames.len());
    for frame in frames {
        let z_plain = encoder.encode(frame).reshaped(vec![positions, s.channels]);
        let z = tape.leaf(z_plain);
        let z = adjust_for_aggregation(&mut tape, &mut staged, bank, z);
        let init = match carried {
            Some(slots) => transition(&mut tape, &mut staged, bank, &s.agg, slots),
            None => {
                if s.agg.learned_queries {
                    init_slots_queries(&mut tape, &mut staged, bank)
                } else {
                    init_slots_sampled(&mut tape, &mut staged, bank, &s.agg, &mut slot_rng)
                }
            }
        };
        let state = aggregate(&mut tape, &mut staged, bank, &s.agg, z, init);
        if s.frames > 1 {
            carried = Some(state.slots);
        }
        let attn = tape.value(state.attn);
        masks.push(attn_to_masks_upsampled(attn, s.grid_h, s.grid_w, STRIDE_TOTAL));
    }
    masks
}

fn evaluate(
    s: &Settings,
    data: &DatasetDir,
    bank: &ParamBank,
    encoder: &ToyEncoder,
    indices: &[usize],
    masks_out: Option<&Path>,
) -> Result<EvalReport, HarnessError> {
    let mut per_sample = Vec::new();
    for &i in indices {
        let frames = image_frames(data, i, s.frames)?;
        let truths = label_frames(data, i, s.frames)?;
        let preds = predict_masks(s, bank, encoder, &frames, i);
        for (f, (truth, pred)) in truths.iter().zip(&preds).enumerate() {
            per_sample.push((ari(truth, pred), ari_fg(truth, pred), miou(truth, pred), mbo(truth, pred)));
            if let Some(dir) = masks_out {
                let name = if s.frames > 1 {
                    format!("{i:04}_f{f}.vvot")
                } else {
                    format!("{i:04}.vvot")
                };
                write_mask_u8(&dir.join(name), pred)?;
            }
        }
    }
    Ok(aggregate_eval(&per_sample))
}

/// Masks are exported as uint8 tensors (slot count stays below 256).
fn write_mask_u8(path: &Path, mask: &IntGrid) -> Result<(), HarnessError> {
    let data = TensorData::U8(mask.data.iter().map(|&v| v.clamp(0, 255) as u8).collect());
    crate::tensorio::write_tensor(path, &[mask.h as u32, mask.w as u32], &data)?;
    Ok(())
}

pub fn run_eval(
    cfg: &RunConfig,
    data_root: &Path,
    ckpt_dir: &Path,
    split: Split,
    masks_out: Option<&Path>,
) -> Result<EvalReport, HarnessError> {
    let s = settings(cfg)?;
    let data = DatasetDir::open(data_root)?;
    check_meta(
        &load_meta(ckpt_dir)?,
        cfg,
        &["seed", "variant", "decoder", "enc", "agg", "dec", "data"],
        "checkpoint",
    )?;
    let bank = ParamBank::from_named_tensors(&load_checkpoint(ckpt_dir)?)?;
    let encoder = primary_encoder(&s);
    let indices = match split {
        Split::Train => train_indices(&s, &data),
        Split::Eval => eval_indices(&s, &data),
    };
    if let Some(dir) = masks_out {
        fs::create_dir_all(dir).map_err(file_err(dir))?;
        let meta = dir.join("meta.txt");
        let text = format!(
            "data_root = {}\nsplit = {}\n",
            data_root.display(),
            if split == Split::Train { "train" } else { "eval" }
        );
        fs::write(&meta, text).map_err(file_err(&meta))?;
    }
    evaluate(&s, &data, &bank, &encoder, &indices, masks_out)
}

// ---------------------------------------------------------------------------
// Mask panels
// ---------------------------------------------------------------------------

/// Renders `image | truth | prediction` panels for every still mask dumped
/// by `run_eval`. Returns the number of panels written.
pub fn run_plot(masks_dir: &Path, out_dir: &Path) -> Result<usize, HarnessError> {
    use crate::tensorio::read_tensor;
    let meta_path = masks_dir.join("meta.txt");
    let meta = fs::read_to_string(&meta_path)
        .map_err(file_err(&meta_path))?;
    let mut data_root = None;
    for line in meta.lines() {
        if let Some(rest) = line.strip_prefix("data_root = ") {
            data_root = Some(PathBuf::from(rest.trim()));
        }
    }
    let data_root = data_root
        .ok_or_else(|| HarnessError::Invalid("masks meta.txt lacks data_root".into()))?;
    let data = DatasetDir::open(&data_root)?;
    fs::create_dir_all(out_dir).map_err(file_err(out_dir))?;

    let mut written = 0usize;
    for i in 0..data.len() {
        let mask_path = masks_dir.join(format!("{i:04}.vvot"));
        if !mask_path.is_file() {
            continue;
        }
        let file = read_tensor(&mask_path)?;
        let TensorData::U8(bytes) = &file.data else {
            return Err(HarnessError::Invalid(format!(
                "mask {} is not uint8",
                mask_path.display()
            )));
        };
        let (h, w) = (file.dims[0] as usize, file.dims[1] as usize);
        let mut pred = IntGrid::zeros(h, w);
        pred.data = bytes.iter().map(|&b| b as i32).collect();

        let image = data.image(i)?;
        let truth = data.labels(i)?;
        let panel = hstack_images(
            &[&image, &labels_to_rgb(&truth), &labels_to_rgb(&pred)],
            2,
        );
        let out = out_dir.join(format!("{i:04}.ppm"));
        write_ppm(&out, &panel).map_err(file_err(&out))?;
        written += 1;
    }
    Ok(written)
}

// ---------------------------------------------------------------------------
// Analysis entry points
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct P2Report {
    /// (b, estimate) pairs for the closed-form worlds where p2 = Phi(b).
    pub closed_form: Vec<(f64, P2Estimate)>,
    pub sweep: SweepReport,
}

pub fn analyze_p2(seed: u64) -> P2Report {
    let closed_form = [0.0, 0.5, 1.0]
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let world = ClusterWorld::two_point(b);
            let mut rng = StreamRng::new(derive_seed(seed, 100 + i as u64));
            (b, estimate_p2(&world, 100_000, &mut rng))
        })
        .collect();
    let sweep = p2_separation_sweep(
        4,
        &[0.25, 0.75, 1.5, 3.0, 6.0],
        1.0,
        0.3,
        100_000,
        &[derive_seed(seed, 200), derive_seed(seed, 201), derive_seed(seed, 202)],
    );
    P2Report { closed_form, sweep }
}

#[derive(Debug, Serialize)]
pub struct BiasReportPair {
    pub zero_shift: crate::analysis::BiasReport,
    pub half_shift: crate::analysis::BiasReport,
}

pub fn analyze_bias(seed: u64) -> BiasReportPair {
    let mut rng = StreamRng::new(derive_seed(seed, 300));
    let zero = BiasWorld::new(64, 0.1, 0.0, &mut rng);
    let half = BiasWorld::new(64, 0.1, 0.5, &mut rng);
    BiasReportPair {
        zero_shift: residual_bias_experiment(&zero, 10_000, &mut rng),
        half_shift: residual_bias_experiment(&half, 10_000, &mut rng),
    }
}

/// Synthetic stand-ins for the two encoder regimes: tight, well-separated
/// clusters versus loose, overlapping ones.
pub fn analyze_objectness(seed: u64) -> ObjectnessReport {
    let mut rng = StreamRng::new(derive_seed(seed, 400));
    let dim = 16;
    let per = 60;
    let mut build = |gap: f64, spread: f64, offset: f64| {
        let mut f = Tensor::zeros(vec![2 * per, dim]);
        let mut labels = Vec::with_capacity(2 * per);
        for i in 0..2 * per {
            let k = i / per;
            labels.push(k);
            let center = if k == 0 { gap / 2.0 } else { -gap / 2.0 };
            for j in 0..dim {
                let base = if j == 0 { center } else { 0.0 };
                f.set2(i, j, base + offset + spread * rng.normal());
            }
        }
        (f, labels)
    };
    let (a, labels) = build(1.0, 0.1, 0.0);
    let (b, _) = build(0.5, 0.5, 0.4);
    compare_objectness(&a, &b, &labels)
}

pub fn write_p2_svg(path: &Path, report: &P2Report) -> Result<(), HarnessError> {
    let pts: Vec<(f64, f64)> = report
        .sweep
        .separations
        .iter()
        .zip(&report.sweep.p2_median)
        .map(|(&x, &y)| (x, y))
        .collect();
    svg_line_chart(
        path,
        "correct-aggregation probability vs separation",
        "inter-centroid separation",
        "p2",
        &[("median of 3 seeds".to_string(), pts)],
    )
    .map_err(file_err(path))
}

pub fn write_bias_svg(path: &Path, report: &BiasReportPair) -> Result<(), HarnessError> {
    svg_bar_pairs(
        path,
        "mean residual norm: shared vs separate target",
        &["shift 0", "shift 0.5"],
        ("shared", &[
            report.zero_shift.mean_residual_shared,
            report.half_shift.mean_residual_shared,
        ]),
        ("separate", &[
            report.zero_shift.mean_residual_separate,
            report.half_shift.mean_residual_separate,
        ]),
    )
    .map_err(file_err(path))
}

pub fn write_objectness_svg(path: &Path, report: &ObjectnessReport) -> Result<(), HarnessError> {
    svg_bar_pairs(
        path,
        "mean pairwise distance (normalized)",
        &["set a", "set b"],
        ("intra-object", &[report.intra_a, report.intra_b]),
        ("inter-object", &[report.inter_a, report.inter_b]),
    )
    .map_err(file_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_and_validates() {
        let cfg = default_config();
        let text = cfg.format();
        let parsed = RunConfig::parse(&text, CONFIG_SCHEMA).unwrap();
        assert_eq!(parsed.format(), text);
        let s = settings(&cfg).unwrap();
        assert_eq!(s.variant, Variant::Vvo);
        assert_eq!(s.decoder, DecoderKind::Mixture);
        assert_eq!(s.grid_h, 8);
        assert_eq!(s.ar.vocab, 256);
        assert_eq!(s.agg.num_slots, 6);
    }

    #[test]
    fn invalid_combinations_are_rejected() {
        let mut cfg = default_config();
        cfg.set("variant", "no-quantize").unwrap();
        cfg.set("decoder", "ar").unwrap();
        assert!(matches!(settings(&cfg), Err(HarnessError::Invalid(_))));

        let mut cfg = default_config();
        cfg.set("data.height", "60").unwrap();
        assert!(matches!(settings(&cfg), Err(HarnessError::Invalid(_))));

        let mut cfg = default_config();
        cfg.set("agg.slot_dim", "30").unwrap();
        assert!(matches!(settings(&cfg), Err(HarnessError::Invalid(_))));

        let mut cfg = default_config();
        cfg.set("data.eval_count", "64").unwrap();
        assert!(matches!(settings(&cfg), Err(HarnessError::Invalid(_))));

        let mut cfg = default_config();
        cfg.set("variant", "quantize-all-the-things").unwrap();
        assert!(matches!(settings(&cfg), Err(HarnessError::Invalid(_))));
    }

    #[test]
    fn ar_mse_mode_allows_no_quantize() {
        let mut cfg = default_config();
        cfg.set("variant", "no-quantize").unwrap();
        cfg.set("decoder", "ar").unwrap();
        cfg.set("dec.ar_mode", "mse").unwrap();
        let s = settings(&cfg).unwrap();
        assert_eq!(s.decoder, DecoderKind::ArMse);
    }

    #[test]
    fn meta_check_reports_the_offending_key() {
        let mut stored = default_config();
        stored.set("vq.num_codes", "128").unwrap();
        let current = default_config();
        let err = check_meta(&stored, &current, &["vq"], "pretrain").unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("vq.num_codes"), "{msg}");
        assert!(check_meta(&stored, &current, &["agg"], "pretrain").is_ok());
    }

    #[test]
    fn variant_parsing_round_trips() {
        for v in [Variant::Vvo, Variant::NoQuantize, Variant::SeparateEncoder] {
            assert_eq!(Variant::parse(v.as_str()).unwrap(), v);
        }
        assert!(Variant::parse("dino").is_err());
    }

    #[test]
    fn trained_bank_init_is_variant_independent() {
        let mut cfg = default_config();
        cfg.set("data.samples", "4").unwrap();
        cfg.set("data.eval_count", "1").unwrap();
        let a = init_trained_bank(&settings(&cfg).unwrap()).hash();
        cfg.set("variant", "separate-encoder").unwrap();
        let b = init_trained_bank(&settings(&cfg).unwrap()).hash();
        cfg.set("variant", "no-quantize").unwrap();
        let c = init_trained_bank(&settings(&cfg).unwrap()).hash();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn encoders_differ_only_for_separate_variant() {
        let mut cfg = default_config();
        let s = settings(&cfg).unwrap();
        assert_eq!(primary_encoder(&s).hash(), target_encoder(&s).hash());
        cfg.set("variant", "separate-encoder").unwrap();
        let s = settings(&cfg).unwrap();
        assert_ne!(primary_encoder(&s).hash(), target_encoder(&s).hash());
    }

    #[test]
    fn analyze_reports_have_sane_shapes() {
        let p2 = analyze_p2(0);
        assert_eq!(p2.closed_form.len(), 3);
        assert_eq!(p2.sweep.p2_median.len(), 5);
        let bias = analyze_bias(0);
        assert!(bias.zero_shift.mean_residual_shared < 3.0 * bias.zero_shift.se);
        let obj = analyze_objectness(0);
        assert!(obj.intra_a < obj.inter_a);
        assert!(obj.shift > 0.0);
    }
}

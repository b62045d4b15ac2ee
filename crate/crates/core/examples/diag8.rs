//! Throwaway diagnostic: attention masks vs mixture-alpha masks on a trained
//! checkpoint, eval split.

use std::path::Path;
use vvo_core::aggregator::{
    aggregate, attn_to_masks_upsampled, init_slots_queries, init_slots_sampled, AggregatorConfig,
};
use vvo_core::decoders::{decode_mixture, MixtureConfig};
use vvo_core::encoder::{adjust_for_aggregation, ToyEncoder, STRIDE_TOTAL};
use vvo_core::harness::CONFIG_SCHEMA;
use vvo_core::metrics::ari_fg;
use vvo_core::nn::{ParamBank, Staged};
use vvo_core::scenegen::DatasetDir;
use vvo_core::tape::Tape;
use vvo_core::tensor::Tensor;
use vvo_core::tensorio::{derive_seed, load_checkpoint, RunConfig, StreamRng};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = Path::new(&args[1]);
    let data_root = Path::new(&args[2]);
    let cfg = RunConfig::load(&ckpt.join("meta.txt"), CONFIG_SCHEMA).unwrap();
    let seed = cfg.get_int("seed").unwrap() as u64;
    let channels = cfg.get_int("enc.channels").unwrap() as usize;
    let (h, w) = (
        cfg.get_int("data.height").unwrap() as usize,
        cfg.get_int("data.width").unwrap() as usize,
    );
    let (gh, gw) = (h / 8, w / 8);
    let agg_cfg = AggregatorConfig {
        num_slots: cfg.get_int("agg.slots").unwrap() as usize,
        slot_dim: cfg.get_int("agg.slot_dim").unwrap() as usize,
        input_dim: channels,
        iterations: cfg.get_int("agg.iterations").unwrap() as usize,
        learned_queries: cfg.get_bool("agg.learned_queries").unwrap(),
        mlp_hidden: cfg.get_int("agg.mlp_hidden").unwrap() as usize,
        transition_heads: cfg.get_int("dec.heads").unwrap() as usize,
    };
    let mix_cfg = MixtureConfig {
        slot_dim: agg_cfg.slot_dim,
        out_channels: channels,
        hidden: cfg.get_int("dec.hidden").unwrap() as usize,
        height: gh,
        width: gw,
    };
    let bank = ParamBank::from_named_tensors(&load_checkpoint(ckpt).unwrap()).unwrap();
    let encoder = ToyEncoder::new(derive_seed(seed, 1), channels);
    let data = DatasetDir::open(data_root).unwrap();
    let total = data.len();
    let eval_count = cfg.get_int("data.eval_count").unwrap() as usize;

    let mut attn_scores = Vec::new();
    let mut alpha_scores = Vec::new();
    let mut entropies = Vec::new();
    for i in total - eval_count..total {
        let img = data.image(i).unwrap();
        let truth = data.labels(i).unwrap();
        let mut slot_rng = StreamRng::new(derive_seed(seed, 20)).split(i as u64);
        let mut tape = Tape::new();
        let mut staged = Staged::new();
        let z0 = encoder.encode(&img).reshaped(vec![gh * gw, channels]);
        let z = tape.leaf(z0);
        let z = adjust_for_aggregation(&mut tape, &mut staged, &bank, z);
        let init = if agg_cfg.learned_queries {
            init_slots_queries(&mut tape, &mut staged, &bank)
        } else {
            init_slots_sampled(&mut tape, &mut staged, &bank, &agg_cfg, &mut slot_rng)
        };
        let state = aggregate(&mut tape, &mut staged, &bank, &agg_cfg, z, init);
        let attn = tape.value(state.attn).clone();
        let attn_mask = attn_to_masks_upsampled(&attn, gh, gw, STRIDE_TOTAL);
        attn_scores.push(ari_fg(&truth, &attn_mask));

        let out = decode_mixture(&mut tape, &mut staged, &bank, &mix_cfg, state.slots);
        let alphas = tape.value(out.alphas).clone();
        let alpha_mask = attn_to_masks_upsampled(&alphas, gh, gw, STRIDE_TOTAL);
        alpha_scores.push(ari_fg(&truth, &alpha_mask));

        // mean per-pixel entropy of attention rows
        let mut ent = 0.0;
        for p in 0..attn.rows() {
            for s in 0..attn.cols() {
                let a = attn.at2(p, s).max(1e-12);
                ent -= a * a.ln();
            }
        }
        entropies.push(ent / attn.rows() as f64);
    }
    let med = |v: &mut Vec<f64>| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!(
        "attn ari_fg mean {:.3} med {:.3} | alpha ari_fg mean {:.3} med {:.3} | attn row entropy mean {:.3} (uniform {:.3})",
        mean(&attn_scores),
        med(&mut attn_scores.clone()),
        mean(&alpha_scores),
        med(&mut alpha_scores.clone()),
        mean(&entropies),
        (agg_cfg.num_slots as f64).ln()
    );
}

//! Throwaway diagnostic: inspect slot/attention state of a trained checkpoint.

use vvo_core::aggregator::{aggregate, attn_to_masks, AggregatorConfig};
use vvo_core::decoders::{decode_mixture, MixtureConfig};
use vvo_core::encoder::{adjust_for_aggregation, ToyEncoder};
use vvo_core::nn::{ParamBank, Staged};
use vvo_core::scenegen::DatasetDir;
use vvo_core::tape::Tape;
use vvo_core::tensorio::{derive_seed, load_checkpoint};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let data_root = args.get(1).map(String::as_str).unwrap_or("/tmp/bench7b/data");
    let ckpt = args.get(2).map(String::as_str).unwrap_or("/tmp/bench7b/ckpt");

    let data = DatasetDir::open(data_root.as_ref()).unwrap();
    let bank = ParamBank::from_named_tensors(&load_checkpoint(ckpt.as_ref()).unwrap()).unwrap();
    let encoder = ToyEncoder::new(derive_seed(0, 1), 16);
    let agg_cfg = AggregatorConfig {
        num_slots: 5,
        slot_dim: 32,
        input_dim: 16,
        iterations: 3,
        learned_queries: true,
        mlp_hidden: 64,
        transition_heads: 4,
    };
    let mix_cfg = MixtureConfig { slot_dim: 32, out_channels: 16, hidden: 64, height: 8, width: 8 };

    for i in [32usize, 40, 47] {
        let image = data.image(i).unwrap();
        let z0 = encoder.encode(&image);
        let mut tape = Tape::new();
        let mut staged = Staged::new();
        let z_flat = vvo_core::tensor::Tensor::new(vec![64, 16], z0.data.clone());
        let zv = tape.leaf(z_flat);
        let za = adjust_for_aggregation(&mut tape, &mut staged, &bank, zv);
        let queries = vvo_core::aggregator::init_slots_queries(&mut tape, &mut staged, &bank);
        let state = aggregate(&mut tape, &mut staged, &bank, &agg_cfg, za, queries);
        let slots = tape.value(state.slots).clone();
        let attn = tape.value(state.attn).clone();

        // pairwise slot distances
        let n = slots.rows();
        let mut dists = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                let mut d = 0.0;
                for j in 0..slots.cols() {
                    let diff = slots.at2(a, j) - slots.at2(b, j);
                    d += diff * diff;
                }
                dists.push(d.sqrt());
            }
        }
        // attention winner histogram and entropy
        let masks = attn_to_masks(&attn, 8, 8);
        let mut hist = vec![0usize; n];
        for &v in &masks.data {
            hist[v as usize] += 1;
        }
        let mut ent = 0.0;
        for p in 0..attn.rows() {
            for s in 0..n {
                let a = attn.at2(p, s).max(1e-12);
                ent -= a * a.ln();
            }
        }
        ent /= attn.rows() as f64;

        let out = decode_mixture(&mut tape, &mut staged, &bank, &mix_cfg, state.slots);
        let alphas = tape.value(out.alphas).clone();
        let mut ahist = vec![0usize; n];
        for p in 0..alphas.rows() {
            let mut best = 0;
            for s in 1..n {
                if alphas.at2(p, s) > alphas.at2(p, best) {
                    best = s;
                }
            }
            ahist[best] += 1;
        }

        let truth = data.labels(i).unwrap();
        let mut tl: Vec<i32> = truth.data.clone();
        tl.sort_unstable();
        tl.dedup();
        println!("sample {i}: truth labels {tl:?}");
        println!("  slot pairwise dist: {dists:?}");
        println!("  attn winners: {hist:?}  mean attn entropy: {ent:.4} (uniform={:.4})", (n as f64).ln());
        println!("  alpha winners: {ahist:?}");
        let snorm: Vec<f64> = (0..n)
            .map(|s| (0..slots.cols()).map(|j| slots.at2(s, j).powi(2)).sum::<f64>().sqrt())
            .collect();
        println!("  slot norms: {snorm:?}");
    }
}

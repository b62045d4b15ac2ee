//! Throwaway diagnostic: can the aggregator + mixture decoder learn sharp
//! object masks on idealized cluster features?

use vvo_core::aggregator::{
    aggregate, attn_to_masks, init_aggregator, init_slots_sampled, AggregatorConfig,
};
use vvo_core::decoders::{decode_mixture, init_mixture_decoder, reconstruction_loss, MixtureConfig, ReconTarget};
use vvo_core::metrics::ari_fg;
use vvo_core::nn::{Adam, GradAccum, ParamBank, Staged};
use vvo_core::tape::Tape;
use vvo_core::tensor::{IntGrid, Tensor};
use vvo_core::tensorio::StreamRng;

const GH: usize = 12;
const GW: usize = 12;
const C: usize = 16;
const NS: usize = 5;

/// A scene: 3 square objects (random cells) on a 2-phase background, with
/// per-cluster prototype features + small noise.
fn make_scene(protos: &[Tensor], rng: &mut StreamRng) -> (Tensor, IntGrid) {
    let mut labels = IntGrid::zeros(GH, GW);
    for y in 0..GH {
        for x in 0..GW {
            labels.set(y, x, -((y + x) as i32 % 2) - 1); // -1 / -2 bg phases
        }
    }
    for id in 1..=3 {
        let sz = 2 + rng.uniform_int(3) as usize; // 2..4 cells
        let cy = rng.uniform_int((GH - sz) as u64) as usize;
        let cx = rng.uniform_int((GW - sz) as u64) as usize;
        for y in cy..cy + sz {
            for x in cx..cx + sz {
                labels.set(y, x, id);
            }
        }
    }
    let mut z = Tensor::zeros(vec![GH * GW, C]);
    for p in 0..GH * GW {
        let l = labels.at(p / GW, p % GW);
        let proto = match l {
            -1 => &protos[0],
            -2 => &protos[1],
            i => &protos[1 + i as usize],
        };
        for j in 0..C {
            z.set2(p, j, proto.data[j] + 0.05 * rng.normal());
        }
    }
    // relabel bg phases to 0 for ari_fg
    let relabeled = IntGrid::new(
        GH,
        GW,
        labels.data.iter().map(|&l| if l < 0 { 0 } else { l }).collect(),
    );
    (z, relabeled)
}

fn main() {
    let mut rng = StreamRng::new(31);
    let protos: Vec<Tensor> = (0..5).map(|_| rng.normal_tensor(&[C], 1.0)).collect();
    let agg_cfg = AggregatorConfig {
        num_slots: NS,
        slot_dim: 32,
        input_dim: C,
        iterations: 3,
        learned_queries: false,
        mlp_hidden: 64,
        transition_heads: 4,
    };
    let mix_cfg = MixtureConfig { slot_dim: 32, out_channels: C, hidden: 64, height: GH, width: GW };
    let mut bank = ParamBank::new();
    init_aggregator(&mut bank, &mut rng, &agg_cfg);
    init_mixture_decoder(&mut bank, &mut rng, &mix_cfg);

    let scenes: Vec<(Tensor, IntGrid)> = (0..32).map(|_| make_scene(&protos, &mut rng)).collect();
    let eval_scenes: Vec<(Tensor, IntGrid)> = (0..8).map(|_| make_scene(&protos, &mut rng)).collect();

    let mut adam = Adam::new();
    let lr0 = 4e-4;
    for step in 0..1500 {
        let mut acc = GradAccum::new();
        let mut batch_loss = 0.0;
        for _ in 0..8 {
            let (z, _) = &scenes[rng.uniform_int(32) as usize];
            let mut tape = Tape::new();
            let mut staged = Staged::new();
            let zv = tape.leaf(z.clone());
            let init = init_slots_sampled(&mut tape, &mut staged, &bank, &agg_cfg, &mut rng);
            let state = aggregate(&mut tape, &mut staged, &bank, &agg_cfg, zv, init);
            let out = decode_mixture(&mut tape, &mut staged, &bank, &mix_cfg, state.slots);
            let qv = tape.leaf(z.clone());
            let loss = reconstruction_loss(&mut tape, out.reconstruction, &ReconTarget::Continuous(qv));
            batch_loss += tape.value(loss).data[0] / 8.0;
            let grads = tape.backward(loss);
            acc.add(&staged, &grads);
        }
        let grads = acc.into_mean();
        let lr = lr0 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / 1500.0).cos());
        adam.step(&mut bank, &grads, lr);
        if step % 250 == 0 || step == 1499 {
            let mut scores = Vec::new();
            let mut erng = StreamRng::new(1000);
            for (z, truth) in &eval_scenes {
                let mut tape = Tape::new();
                let mut staged = Staged::new();
                let zv = tape.leaf(z.clone());
                let init = init_slots_sampled(&mut tape, &mut staged, &bank, &agg_cfg, &mut erng);
                let state = aggregate(&mut tape, &mut staged, &bank, &agg_cfg, zv, init);
                let attn = tape.value(state.attn);
                let mask = attn_to_masks(attn, GH, GW);
                scores.push(ari_fg(truth, &mask));
            }
            let mean = scores.iter().sum::<f64>() / scores.len() as f64;
            println!("step {step}: loss {batch_loss:.5} eval ari_fg {mean:.3}");
        }
    }
}

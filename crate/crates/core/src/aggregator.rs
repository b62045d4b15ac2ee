//! Slot Attention aggregator.
//!
//! Slots compete for feature-map positions through a softmax over slots at
//! every pixel, then each slot is updated toward the attention-weighted mean
//! of its assigned values via a GRU plus a residual MLP. Initial slots come
//! either from learned queries (the default) or from a learned Gaussian.
//!
//! In learned-query mode the gradient is truncated: all but the final
//! iteration run detached, and the query parameters are reattached in front
//! of the last iteration with a straight-through hop, so a downstream loss
//! reaches the queries only through that final iteration.

use crate::nn::{
    self, gru_cell, layer_norm_affine, stage_gru, stage_layer_norm, stage_linear, GruVars,
    LinearVars, ParamBank, Staged,
};
use crate::tape::{Tape, Var};
use crate::tensor::{IntGrid, Tensor};
use crate::tensorio::StreamRng;

/// Denominator guard for the per-slot weight normalization; keeps slots that
/// win no pixels from producing NaN updates.
pub const ATTN_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AggregatorConfig {
    /// Number of slots n.
    pub num_slots: usize,
    /// Slot width d.
    pub slot_dim: usize,
    /// Channel count of the incoming feature map.
    pub input_dim: usize,
    /// Attention iterations (>= 1).
    pub iterations: usize,
    /// Learned initial queries when true; sampled from a learned Gaussian
    /// when false.
    pub learned_queries: bool,
    /// Hidden width of the residual MLP after the GRU.
    pub mlp_hidden: usize,
    /// Heads of the video transition block.
    pub transition_heads: usize,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        AggregatorConfig {
            num_slots: 6,
            slot_dim: 64,
            input_dim: 16,
            iterations: 3,
            learned_queries: true,
            mlp_hidden: 128,
            transition_heads: 4,
        }
    }
}

/// Result of one aggregation pass.
pub struct SlotState {
    /// Final slots, `[n, d]`.
    pub slots: Var,
    /// Per-pixel attention of the last iteration, `[h*w, n]`; rows sum to 1.
    pub attn: Var,
}

pub fn init_aggregator(bank: &mut ParamBank, rng: &mut StreamRng, cfg: &AggregatorConfig) {
    assert!(cfg.iterations >= 1, "iteration count must be >= 1");
    let (n, d, c) = (cfg.num_slots, cfg.slot_dim, cfg.input_dim);
    if cfg.learned_queries {
        bank.insert("agg.queries", rng.normal_tensor(&[n, d], 0.5));
    } else {
        bank.insert("agg.mu", rng.normal_tensor(&[1, d], 0.5));
        bank.insert("agg.sigma", Tensor::full(vec![1, d], 0.5));
    }
    nn::init_layer_norm(bank, "agg.ln_in", c);
    nn::init_layer_norm(bank, "agg.ln_slot", d);
    nn::init_layer_norm(bank, "agg.ln_mlp", d);
    bank.insert("agg.wq", nn::xavier(rng, d, d));
    bank.insert("agg.wk", nn::xavier(rng, c, d));
    bank.insert("agg.wv", nn::xavier(rng, c, d));
    nn::init_gru(bank, rng, "agg.gru", d);
    nn::init_linear(bank, rng, "agg.mlp1", d, cfg.mlp_hidden);
    nn::init_linear(bank, rng, "agg.mlp2", cfg.mlp_hidden, d);
}

pub fn init_transition(bank: &mut ParamBank, rng: &mut StreamRng, cfg: &AggregatorConfig) {
    nn::init_encoder_block(bank, rng, "agg.trans", cfg.slot_dim, 2 * cfg.slot_dim);
}

/// Initial slots for learned-query mode: the query parameter itself.
pub fn init_slots_queries(tape: &mut Tape, staged: &mut Staged, bank: &ParamBank) -> Var {
    staged.stage(tape, bank, "agg.queries")
}

/// Initial slots for sampled mode: `mu + sigma * eps` with `eps ~ N(0, I)`
/// drawn per slot, reparameterized so gradients reach `mu` and `sigma`.
pub fn init_slots_sampled(
    tape: &mut Tape,
    staged: &mut Staged,
    bank: &ParamBank,
    cfg: &AggregatorConfig,
    rng: &mut StreamRng,
) -> Var {
    let mu = staged.stage(tape, bank, "agg.mu");
    let sigma = staged.stage(tape, bank, "agg.sigma");
    let eps = tape.leaf(rng.normal_tensor(&[cfg.num_slots, cfg.slot_dim], 1.0));
    let mu_n = tape.repeat_rows(mu, cfg.num_slots);
    let sigma_n = tape.repeat_rows(sigma, cfg.num_slots);
    let noise = tape.mul(sigma_n, eps);
    tape.add(mu_n, noise)
}

struct IterVars {
    ln_slot: (Var, Var),
    ln_mlp: (Var, Var),
    wq: Var,
    gru: GruVars,
    mlp1: LinearVars,
    mlp2: LinearVars,
}

fn stage_iter_vars(tape: &mut Tape, staged: &mut Staged, bank: &ParamBank) -> IterVars {
    IterVars {
        ln_slot: stage_layer_norm(tape, staged, bank, "agg.ln_slot"),
        ln_mlp: stage_layer_norm(tape, staged, bank, "agg.ln_mlp"),
        wq: staged.stage(tape, bank, "agg.wq"),
        gru: stage_gru(tape, staged, bank, "agg.gru"),
        mlp1: stage_linear(tape, staged, bank, "agg.mlp1"),
        mlp2: stage_linear(tape, staged, bank, "agg.mlp2"),
    }
}

/// One attention + update step. Returns the new slots and the `[h*w, n]`
/// attention used for the update.
fn slot_iteration(tape: &mut Tape, vars: &IterVars, keys: Var, vals: Var, slots: Var) -> (Var, Var) {
    let d = tape.value(slots).cols();
    let norm_slots = layer_norm_affine(tape, slots, vars.ln_slot.0, vars.ln_slot.1);
    let q = tape.matmul(norm_slots, vars.wq);
    let logits = tape.matmul_nt(keys, q);
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let attn = tape.softmax_rows(logits);

    // Normalize each slot's attention over pixels so updates are weighted
    // means rather than sums.
    let totals = tape.col_sums(attn);
    let totals = tape.add_scalar(totals, ATTN_EPS);
    let weights = tape.div_row(attn, totals);
    let updates = tape.matmul_tn(weights, vals);

    let slots = gru_cell(tape, updates, slots, &vars.gru);
    let pre = layer_norm_affine(tape, slots, vars.ln_mlp.0, vars.ln_mlp.1);
    let h = nn::linear(tape, pre, vars.mlp1);
    let h = tape.relu(h);
    let h = nn::linear(tape, h, vars.mlp2);
    (tape.add(slots, h), attn)
}

/// Run the full attention loop from `init` slots over feature map `z`
/// (`[h*w, input_dim]`). In learned-query mode gradients flow only through
/// the final iteration and `init` receives them via a straight-through hop
/// across the earlier, detached iterations; sampled mode backpropagates
/// through every iteration as in the original recipe.
pub fn aggregate(
    tape: &mut Tape,
    staged: &mut Staged,
    bank: &ParamBank,
    cfg: &AggregatorConfig,
    z: Var,
    init: Var,
) -> SlotState {
    let pixels = tape.value(z).rows();
    assert!(
        cfg.num_slots <= pixels,
        "{} slots cannot attend over {} positions",
        cfg.num_slots,
        pixels
    );
    assert!(cfg.iterations >= 1, "iteration count must be >= 1");

    let ln_in = stage_layer_norm(tape, staged, bank, "agg.ln_in");
    let z_norm = layer_norm_affine(tape, z, ln_in.0, ln_in.1);
    let wk = staged.stage(tape, bank, "agg.wk");
    let wv = staged.stage(tape, bank, "agg.wv");
    let keys = tape.matmul(z_norm, wk);
    let vals = tape.matmul(z_norm, wv);
    let vars = stage_iter_vars(tape, staged, bank);

    let truncate = cfg.learned_queries;
    let mut slots = init;
    let mut attn = init; // overwritten on the first iteration
    for it in 0..cfg.iterations {
        let last = it + 1 == cfg.iterations;
        let input = if truncate && last && it > 0 {
            tape.straight_through(init, slots)
        } else {
            slots
        };
        let (new_slots, new_attn) = slot_iteration(tape, &vars, keys, vals, input);
        attn = new_attn;
        slots = if !truncate || last { new_slots } else { tape.detach(new_slots) };
    }
    SlotState { slots, attn }
}

/// Video-mode query transition: one transformer encoder block applied to the
/// slot set, producing the next frame's initial queries.
pub fn transition(tape: &mut Tape, staged: &mut Staged, bank: &ParamBank, cfg: &AggregatorConfig, slots: Var) -> Var {
    let vars = nn::stage_encoder_block(tape, staged, bank, "agg.trans");
    nn::encoder_block(tape, slots, &vars, cfg.transition_heads)
}

/// Hard masks from a `[h*w, n]` attention map: per-pixel argmax over slots,
/// ties to the lowest slot id.
pub fn attn_to_masks(attn: &Tensor, h: usize, w: usize) -> IntGrid {
    assert_eq!(attn.rows(), h * w, "attention rows must cover the grid");
    let n = attn.cols();
    let mut grid = IntGrid::zeros(h, w);
    for p in 0..h * w {
        let mut best = 0usize;
        for s in 1..n {
            if attn.at2(p, s) > attn.at2(p, best) {
                best = s;
            }
        }
        grid.set(p / w, p % w, best as i32);
    }
    grid
}

/// Image-resolution hard masks from grid attention: every slot's soft map is
/// bilinearly upsampled by `factor` (cell centers at half-pixel offsets, edge
/// clamped), then each pixel takes the argmax slot, ties to the lowest id.
/// Boundary cells carry fractional attention, so the argmax crossover lands
/// between cell centers instead of on cell edges.
pub fn attn_to_masks_upsampled(attn: &Tensor, gh: usize, gw: usize, factor: usize) -> IntGrid {
    assert_eq!(attn.rows(), gh * gw, "attention rows must cover the grid");
    assert!(factor >= 1, "upsampling factor must be positive");
    let n = attn.cols();
    let (h, w) = (gh * factor, gw * factor);
    let mut out = IntGrid::zeros(h, w);
    for y in 0..h {
        let gy = ((y as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (gh - 1) as f64);
        let y0 = gy.floor() as usize;
        let y1 = (y0 + 1).min(gh - 1);
        let fy = gy - y0 as f64;
        for x in 0..w {
            let gx = ((x as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (gw - 1) as f64);
            let x0 = gx.floor() as usize;
            let x1 = (x0 + 1).min(gw - 1);
            let fx = gx - x0 as f64;
            let mut best = (f64::NEG_INFINITY, 0usize);
            for s in 0..n {
                let val = attn.at2(y0 * gw + x0, s) * (1.0 - fy) * (1.0 - fx)
                    + attn.at2(y0 * gw + x1, s) * (1.0 - fy) * fx
                    + attn.at2(y1 * gw + x0, s) * fy * (1.0 - fx)
                    + attn.at2(y1 * gw + x1, s) * fy * fx;
                if val > best.0 {
                    best = (val, s);
                }
            }
            out.set(y, x, best.1 as i32);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::GradAccum;

    fn test_cfg(n: usize, c: usize, d: usize, iters: usize) -> AggregatorConfig {
        AggregatorConfig {
            num_slots: n,
            slot_dim: d,
            input_dim: c,
            iterations: iters,
            learned_queries: true,
            mlp_hidden: 2 * d,
            transition_heads: 4,
        }
    }

    fn random_features(rng: &mut StreamRng, pixels: usize, c: usize) -> Tensor {
        rng.normal_tensor(&[pixels, c], 1.0)
    }

    fn run(
        bank: &ParamBank,
        cfg: &AggregatorConfig,
        z: &Tensor,
        init_override: Option<&Tensor>,
    ) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let mut staged = Staged::new();
        let zv = tape.leaf(z.clone());
        let init = match init_override {
            Some(q) => tape.leaf(q.clone()),
            None => init_slots_queries(&mut tape, &mut staged, bank),
        };
        let state = aggregate(&mut tape, &mut staged, bank, cfg, zv, init);
        (tape.value(state.slots).clone(), tape.value(state.attn).clone())
    }

    #[test]
    fn attention_rows_are_a_simplex() {
        let cfg = test_cfg(4, 8, 16, 3);
        let mut rng = StreamRng::new(31);
        let mut bank = ParamBank::new();
        init_aggregator(&mut bank, &mut rng, &cfg);
        let z = random_features(&mut rng, 25, 8);
        let (_, attn) = run(&bank, &cfg, &z, None);
        assert_eq!(attn.shape, vec![25, 4]);
        for p in 0..25 {
            let mut total = 0.0;
            for s in 0..4 {
                let a = attn.at2(p, s);
                assert!(a >= 0.0);
                total += a;
            }
            assert!((total - 1.0).abs() < 1e-5, "row {p} sums to {total}");
        }
    }

    #[test]
    fn single_slot_attention_is_all_ones() {
        let cfg = test_cfg(1, 6, 12, 3);
        let mut rng = StreamRng::new(32);
        let mut bank = ParamBank::new();
        init_aggregator(&mut bank, &mut rng, &cfg);
        let z = random_features(&mut rng, 9, 6);
        let (_, attn) = run(&bank, &cfg, &z, None);
        for p in 0..9 {
            assert_eq!(attn.at2(p, 0), 1.0);
        }
    }

    #[test]
    fn permuting_queries_permutes_slots_and_masks() {
        let cfg = test_cfg(5, 8, 16, 3);
        let mut rng = StreamRng::new(33);
        let mut bank = ParamBank::new();
        init_aggregator(&mut bank, &mut rng, &cfg);
        let z = random_features(&mut rng, 30, 8);

        let queries = bank.get("agg.queries").clone();
        let perm = [3usize, 0, 4, 1, 2];
        let mut permuted = Tensor::zeros(vec![5, 16]);
        for (to, &from) in perm.iter().enumerate() {
            for j in 0..16 {
                permuted.set2(to, j, queries.at2(from, j));
            }
        }

        let (slots_a, attn_a) = run(&bank, &cfg, &z, Some(&queries));
        let (slots_b, attn_b) = run(&bank, &cfg, &z, Some(&permuted));
        for (to, &from) in perm.iter().enumerate() {
            for j in 0..16 {
                assert!((slots_b.at2(to, j) - slots_a.at2(from, j)).abs() < 1e-5);
            }
            for p in 0..30 {
                assert!((attn_b.at2(p, to) - attn_a.at2(p, from)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn sampled_mode_is_reproducible_and_seed_sensitive() {
        let cfg = AggregatorConfig { learned_queries: false, ..test_cfg(3, 8, 16, 2) };
        let mut rng = StreamRng::new(34);
        let mut bank = ParamBank::new();
        init_aggregator(&mut bank, &mut rng, &cfg);
        let z = random_features(&mut rng, 20, 8);

        let sample = |seed: u64| {
            let mut tape = Tape::new();
            let mut staged = Staged::new();
            let zv = tape.leaf(z.clone());
            let mut r = StreamRng::new(seed);
            let init = init_slots_sampled(&mut tape, &mut staged, &bank, &cfg, &mut r);
            let s = aggregate(&mut tape, &mut staged, &bank, &cfg, zv, init);
            tape.value(s.slots).clone()
        };
        assert_eq!(sample(7).data, sample(7).data);
        assert_ne!(sample(7).data, sample(8).data);
    }

    #[test]
    fn more_slots_than_pixels_is_rejected() {
        let cfg = test_cfg(6, 4, 8, 1);
        let mut rng = StreamRng::new(35);
        let mut bank = ParamBank::new();
        init_aggregator(&mut bank, &mut rng, &cfg);
        let z = random_features(&mut rng, 4, 4);
        let result = std::panic::catch_unwind(|| run(&bank, &cfg, &z, None));
        assert!(result.is_err());
    }

    /// Gradients w.r.t. the learned queries must match an explicitly
    /// truncated computation: run all but the last iteration for values only,
    /// then differentiate a single iteration with the queries reattached.
    #[test]
    fn query_gradient_flows_only_through_final_iteration() {
        let cfg = test_cfg(3, 6, 12, 3);
        let mut rng = StreamRng::new(36);
        let mut bank = ParamBank::new();
        init_aggregator(&mut bank, &mut rng, &cfg);
        let z = random_features(&mut rng, 16, 6);
        let target = rng.normal_tensor(&[3, 12], 1.0);

        // Full aggregate.
        let mut tape = Tape::new();
        let mut staged = Staged::new();
        let zv = tape.leaf(z.clone());
        let init = init_slots_queries(&mut tape, &mut staged, &bank);
        let state = aggregate(&mut tape, &mut staged, &bank, &cfg, zv, init);
        let tv = tape.leaf(target.clone());
        let loss = tape.mse(state.slots, tv);
        let grads = tape.backward(loss);
        let mut acc = GradAccum::new();
        acc.add(&staged, &grads);
        let full = acc.into_mean();

        // Truncated oracle: values of the first T-1 iterations, then one
        // differentiable iteration built on a fresh tape.
        let trunc_cfg = AggregatorConfig { iterations: 2, ..cfg.clone() };
        let (slots_pre, _) = run(&bank, &trunc_cfg, &z, None);

        let mut tape2 = Tape::new();
        let mut staged2 = Staged::new();
        let zv2 = tape2.leaf(z.clone());
        let ln_in = stage_layer_norm(&mut tape2, &mut staged2, &bank, "agg.ln_in");
        let z_norm = layer_norm_affine(&mut tape2, zv2, ln_in.0, ln_in.1);
        let wk = staged2.stage(&mut tape2, &bank, "agg.wk");
        let wv = staged2.stage(&mut tape2, &bank, "agg.wv");
        let keys = tape2.matmul(z_norm, wk);
        let vals = tape2.matmul(z_norm, wv);
        let vars = stage_iter_vars(&mut tape2, &mut staged2, &bank);
        let queries = staged2.stage(&mut tape2, &bank, "agg.queries");
        let pre_leaf = tape2.leaf(slots_pre);
        let input = tape2.straight_through(queries, pre_leaf);
        let (slots_final, _) = slot_iteration(&mut tape2, &vars, keys, vals, input);
        let tv2 = tape2.leaf(target);
        let loss2 = tape2.mse(slots_final, tv2);
        let grads2 = tape2.backward(loss2);
        let mut acc2 = GradAccum::new();
        acc2.add(&staged2, &grads2);
        let oracle = acc2.into_mean();

        for name in ["agg.queries", "agg.wq", "agg.wk", "agg.wv", "agg.gru.wxn"] {
            let a = &full[name];
            let b = &oracle[name];
            let mut norm = 0.0;
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1e-12, "{name} gradient mismatch: {x} vs {y}");
                norm += x * x;
            }
            assert!(norm > 0.0, "{name} gradient vanished");
        }
    }

    /// With two well-separated feature clusters and two slots, the hard masks
    /// should agree with a k-means(2) oracle on at least 95% of pixels
    /// (median over 10 seeds).
    #[test]
    fn two_cluster_masks_agree_with_kmeans_oracle() {
        let (h, w, c) = (8usize, 8usize, 12usize);
        let cfg = test_cfg(2, c, c, 3);
        let mut agreements = Vec::new();

        for seed in 0..10u64 {
            let mut rng = StreamRng::new(100 + seed);
            let mut bank = ParamBank::new();
            init_aggregator(&mut bank, &mut rng, &cfg);

            // Antipodal cluster centers so the separation survives the input
            // layer norm; left half of the grid is cluster 0.
            let center = rng.normal_tensor(&[1, c], 1.0);
            let mut z = Tensor::zeros(vec![h * w, c]);
            let mut truth = vec![0usize; h * w];
            for p in 0..h * w {
                let cluster = if p % w < w / 2 { 0 } else { 1 };
                truth[p] = cluster;
                let sign = if cluster == 0 { 1.0 } else { -1.0 };
                for j in 0..c {
                    z.set2(p, j, sign * 2.0 * center.at2(0, j) + 0.15 * rng.normal());
                }
            }

            let (_, attn) = run(&bank, &cfg, &z, None);
            let masks = attn_to_masks(&attn, h, w);

            let kmeans = kmeans2(&z, &mut rng);
            let mut same = 0usize;
            let mut flipped = 0usize;
            for p in 0..h * w {
                let m = masks.at(p / w, p % w) as usize;
                if m == kmeans[p] {
                    same += 1;
                } else {
                    flipped += 1;
                }
            }
            let agree = same.max(flipped) as f64 / (h * w) as f64;

            // Sanity: the oracle itself must recover the construction.
            let mut k_same = 0usize;
            for p in 0..h * w {
                if kmeans[p] == truth[p] {
                    k_same += 1;
                }
            }
            let k_agree = k_same.max(h * w - k_same) as f64 / (h * w) as f64;
            assert!(k_agree > 0.98, "k-means oracle failed its own construction");

            agreements.push(agree);
        }
        agreements.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = agreements[agreements.len() / 2];
        assert!(median >= 0.95, "median k-means agreement {median}, all: {agreements:?}");
    }

    /// Plain Lloyd's algorithm with k=2, seeded from two random points.
    fn kmeans2(z: &Tensor, rng: &mut StreamRng) -> Vec<usize> {
        let (n, c) = (z.rows(), z.cols());
        let i0 = rng.uniform_int(n as u64) as usize;
        let mut i1 = rng.uniform_int(n as u64) as usize;
        while i1 == i0 {
            i1 = rng.uniform_int(n as u64) as usize;
        }
        let mut centers = [
            (0..c).map(|j| z.at2(i0, j)).collect::<Vec<_>>(),
            (0..c).map(|j| z.at2(i1, j)).collect::<Vec<_>>(),
        ];
        let mut assign = vec![0usize; n];
        for _ in 0..25 {
            for p in 0..n {
                let mut d = [0.0f64; 2];
                for (k, dk) in d.iter_mut().enumerate() {
                    for j in 0..c {
                        let diff = z.at2(p, j) - centers[k][j];
                        *dk += diff * diff;
                    }
                }
                assign[p] = if d[1] < d[0] { 1 } else { 0 };
            }
            for k in 0..2 {
                let members: Vec<usize> = (0..n).filter(|&p| assign[p] == k).collect();
                if members.is_empty() {
                    continue;
                }
                for j in 0..c {
                    centers[k][j] =
                        members.iter().map(|&p| z.at2(p, j)).sum::<f64>() / members.len() as f64;
                }
            }
        }
        assign
    }

    #[test]
    fn transition_with_zeroed_projections_is_identity() {
        let cfg = test_cfg(4, 8, 16, 1);
        let mut rng = StreamRng::new(40);
        let mut bank = ParamBank::new();
        init_transition(&mut bank, &mut rng, &cfg);
        for name in ["agg.trans.wo.w", "agg.trans.ff2.w"] {
            let zeroed = Tensor::zeros(bank.get(name).shape.clone());
            *bank.get_mut(name) = zeroed;
        }
        let slots = rng.normal_tensor(&[4, 16], 1.0);
        let mut tape = Tape::new();
        let mut staged = Staged::new();
        let sv = tape.leaf(slots.clone());
        let out = transition(&mut tape, &mut staged, &bank, &cfg, sv);
        assert_eq!(tape.value(out).data, slots.data);
    }

    #[test]
    fn transition_is_permutation_equivariant() {
        let cfg = test_cfg(4, 8, 16, 1);
        let mut rng = StreamRng::new(41);
        let mut bank = ParamBank::new();
        init_transition(&mut bank, &mut rng, &cfg);
        let slots = rng.normal_tensor(&[4, 16], 1.0);
        let perm = [2usize, 0, 3, 1];
        let mut permuted = Tensor::zeros(vec![4, 16]);
        for (to, &from) in perm.iter().enumerate() {
            for j in 0..16 {
                permuted.set2(to, j, slots.at2(from, j));
            }
        }
        let apply = |input: &Tensor| {
            let mut tape = Tape::new();
            let mut staged = Staged::new();
            let sv = tape.leaf(input.clone());
            let out = transition(&mut tape, &mut staged, &bank, &cfg, sv);
            tape.value(out).clone()
        };
        let out_a = apply(&slots);
        let out_b = apply(&permuted);
        for (to, &from) in perm.iter().enumerate() {
            for j in 0..16 {
                assert!((out_b.at2(to, j) - out_a.at2(from, j)).abs() < 1e-9);
            }
        }
    }

    /// Independent arithmetic oracle for the transition block: plain-loop
    /// layer norm, four-head attention, and feed-forward.
    #[test]
    fn transition_matches_matrix_arithmetic_oracle() {
        let d = 16usize;
        let n = 5usize;
        let heads = 4usize;
        let cfg = AggregatorConfig { transition_heads: heads, ..test_cfg(n, 8, d, 1) };
        let mut rng = StreamRng::new(11);
        let mut bank = ParamBank::new();
        init_transition(&mut bank, &mut rng, &cfg);
        let slots = rng.normal_tensor(&[n, d], 1.0);

        let mut tape = Tape::new();
        let mut staged = Staged::new();
        let sv = tape.leaf(slots.clone());
        let out = transition(&mut tape, &mut staged, &bank, &cfg, sv);
        let got = tape.value(out).clone();

        let ln = |x: &Tensor, g: &Tensor, b: &Tensor| {
            let mut y = Tensor::zeros(x.shape.clone());
            for i in 0..x.rows() {
                let row: Vec<f64> = (0..x.cols()).map(|j| x.at2(i, j)).collect();
                let mean = row.iter().sum::<f64>() / row.len() as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / row.len() as f64;
                for j in 0..x.cols() {
                    let nrm = (row[j] - mean) / (var + 1e-5).sqrt();
                    y.set2(i, j, nrm * g.at2(0, j) + b.at2(0, j));
                }
            }
            y
        };
        let lin = |x: &Tensor, prefix: &str| {
            let w = bank.get(&format!("{prefix}.w"));
            let b = bank.get(&format!("{prefix}.b"));
            let mut y = crate::tensor::matmul(x, w);
            for i in 0..y.rows() {
                for j in 0..y.cols() {
                    let v = y.at2(i, j) + b.at2(0, j);
                    y.set2(i, j, v);
                }
            }
            y
        };

        let n1 = ln(&slots, bank.get("agg.trans.ln1.g"), bank.get("agg.trans.ln1.b"));
        let q = lin(&n1, "agg.trans.wq");
        let k = lin(&n1, "agg.trans.wk");
        let v = lin(&n1, "agg.trans.wv");
        let dh = d / heads;
        let mut att = Tensor::zeros(vec![n, d]);
        for hd in 0..heads {
            for i in 0..n {
                let mut logits = vec![0.0f64; n];
                for (j, l) in logits.iter_mut().enumerate() {
                    for t in 0..dh {
                        *l += q.at2(i, hd * dh + t) * k.at2(j, hd * dh + t);
                    }
                    *l /= (dh as f64).sqrt();
                }
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                for t in 0..dh {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += exps[j] / z * v.at2(j, hd * dh + t);
                    }
                    att.set2(i, hd * dh + t, acc);
                }
            }
        }
        let proj = lin(&att, "agg.trans.wo");
        let mut x1 = slots.clone();
        for i in 0..n {
            for j in 0..d {
                let v = x1.at2(i, j) + proj.at2(i, j);
                x1.set2(i, j, v);
            }
        }
        let n2 = ln(&x1, bank.get("agg.trans.ln2.g"), bank.get("agg.trans.ln2.b"));
        let h1 = lin(&n2, "agg.trans.ff1").map(|v| v.max(0.0));
        let h2 = lin(&h1, "agg.trans.ff2");
        for i in 0..n {
            for j in 0..d {
                let expect = x1.at2(i, j) + h2.at2(i, j);
                assert!(
                    (got.at2(i, j) - expect).abs() < 1e-5,
                    "transition mismatch at ({i},{j}): {} vs {expect}",
                    got.at2(i, j)
                );
            }
        }
    }

    #[test]
    fn attn_to_masks_breaks_ties_to_lowest_slot() {
        let mut attn = Tensor::zeros(vec![4, 3]);
        for p in 0..4 {
            for s in 0..3 {
                attn.set2(p, s, 1.0 / 3.0);
            }
        }
        attn.set2(2, 1, 0.5);
        let masks = attn_to_masks(&attn, 2, 2);
        assert_eq!(masks.at(0, 0), 0);
        assert_eq!(masks.at(1, 0), 1);
        assert_eq!(masks.at(1, 1), 0);
    }

    #[test]
    fn upsampled_masks_at_factor_one_match_plain_argmax() {
        let mut rng = StreamRng::new(3);
        let mut attn = rng.normal_tensor(&[12, 4], 1.0);
        for v in attn.data.iter_mut() {
            *v = v.abs();
        }
        let plain = attn_to_masks(&attn, 3, 4);
        let up = attn_to_masks_upsampled(&attn, 3, 4, 1);
        assert_eq!(plain.data, up.data);
    }

    #[test]
    fn upsampled_masks_interpolate_the_crossover_between_cells() {
        // 1x2 grid, two slots: slot 0 owns the left cell fully, slot 1 the
        // right. Cell centers sit at x=3.5 and x=11.5 after 8x upsampling;
        // the interpolated crossover splits the row at the midpoint instead
        // of the cell edge.
        let attn = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let up = attn_to_masks_upsampled(&attn, 1, 2, 8);
        assert_eq!((up.h, up.w), (8, 16));
        for y in 0..8 {
            for x in 0..16 {
                let want = if x < 8 { 0 } else { 1 };
                assert_eq!(up.at(y, x), want, "pixel ({y},{x})");
            }
        }

        // Fractional boundary attention moves the crossover sub-cell: with
        // slot 0 at 0.75 in the right cell, slot 1 wins only where the
        // interpolated weight crosses 0.5 of the span.
        let attn = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.75, 0.25]);
        let up = attn_to_masks_upsampled(&attn, 1, 2, 8);
        assert!(up.data.iter().all(|&v| v == 0));
    }

    #[test]
    fn upsampled_masks_keep_cell_interiors() {
        // One-hot attention on a 2x2 grid: each cell's center region must
        // keep its own slot after upsampling.
        let attn = Tensor::new(
            vec![4, 4],
            vec![
                1.0, 0.0, 0.0, 0.0, //
                0.0, 1.0, 0.0, 0.0, //
                0.0, 0.0, 1.0, 0.0, //
                0.0, 0.0, 0.0, 1.0,
            ],
        );
        let up = attn_to_masks_upsampled(&attn, 2, 2, 4);
        for (cy, cx, slot) in [(0, 0, 0), (0, 1, 1), (1, 0, 2), (1, 1, 3)] {
            let (y, x) = (cy * 4 + 1, cx * 4 + 1);
            assert_eq!(up.at(y, x), slot, "center of cell ({cy},{cx})");
        }
    }
}

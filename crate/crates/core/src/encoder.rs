//! Frozen toy backbone and the two trainable adapters that sit on top of it.
//!
//! The backbone stands in for a large pretrained vision model: three
//! stride-2 2x2 convolutions (no padding, ReLU between) mapping
//! `[h, w, 3]` images to `[h/8, w/8, c]` features. Its weights come from a
//! seed and are never trained; [`ToyEncoder::hash`] lets callers audit that
//! freeze. Kernel size equals stride, so receptive fields tile the image
//! without overlap, mirroring the patch embedding of the vision transformers
//! this stands in for: feature cell `(i, j)` sees exactly the input pixels
//! with `8i <= y < 8i + 8` and `8j <= x < 8j + 8`.
//!
//! `adjust_for_aggregation` (identity-initialized linear) feeds the
//! aggregator; `adjust_for_quantization` (residual two-conv block,
//! identity at init) feeds the quantizer. Both are trainable.

use crate::nn::{conv_init, ParamBank, Staged};
use crate::tape::{conv2d_ref, Tape, Var};
use crate::tensor::Tensor;
use crate::tensorio::StreamRng;

/// Downsampling factor from image pixels to feature cells.
pub const STRIDE_TOTAL: usize = 8;
/// A feature cell's receptive field never extends more than this many pixels
/// from the cell's top-left corner; with kernel == stride it is exactly the
/// cell's own `8 x 8` patch.
pub const RF_RADIUS: usize = 7;

pub struct ToyEncoder {
    params: ParamBank,
    pub out_channels: usize,
}

impl ToyEncoder {
    /// Builds the frozen backbone from a seed. Channel plan: 3 -> 16 -> 32
    /// -> `out_channels`.
    pub fn new(seed: u64, out_channels: usize) -> Self {
        let mut rng = StreamRng::new(seed);
        let mut params = ParamBank::new();
        let plan = [(3usize, 16usize), (16, 32), (32, out_channels)];
        for (i, &(cin, cout)) in plan.iter().enumerate() {
            params.insert(&format!("enc.conv{}.w", i + 1), conv_init(&mut rng, 2, 2, cin, cout));
            params.insert(&format!("enc.conv{}.b", i + 1), Tensor::zeros(vec![cout]));
        }
        ToyEncoder { params, out_channels }
    }

    /// `[h, w, 3]` image in `[0, 1]` -> `[h/8, w/8, c]` features. Runs off
    /// any tape; the backbone never receives gradients.
    pub fn encode(&self, image: &Tensor) -> Tensor {
        assert_eq!(image.shape.len(), 3, "encode expects [h,w,3], got {:?}", image.shape);
        assert_eq!(image.shape[2], 3, "encode expects 3 input channels");
        let x = image.map(|v| 2.0 * v - 1.0);
        let mut x = x;
        for i in 1..=3 {
            let w = self.params.get(&format!("enc.conv{i}.w"));
            let b = self.params.get(&format!("enc.conv{i}.b"));
            x = conv2d_ref(&x, w, b, 2, 0, false);
            if i < 3 {
                x = x.map(|v| if v > 0.0 { v } else { 0.0 });
            }
        }
        x
    }

    /// Encodes every frame of a `[t, h, w, 3]` video, returning `[t, h/8,
    /// w/8, c]`.
    pub fn encode_video(&self, video: &Tensor) -> Tensor {
        assert_eq!(video.shape.len(), 4, "encode_video expects [t,h,w,3]");
        let (t, h, w) = (video.shape[0], video.shape[1], video.shape[2]);
        let mut out: Option<Tensor> = None;
        for f in 0..t {
            let frame = Tensor::new(
                vec![h, w, 3],
                video.data[f * h * w * 3..(f + 1) * h * w * 3].to_vec(),
            );
            let z = self.encode(&frame);
            let o = out.get_or_insert_with(|| Tensor::zeros(vec![t, z.shape[0], z.shape[1], z.shape[2]]));
            let n = z.numel();
            o.data[f * n..(f + 1) * n].copy_from_slice(&z.data);
        }
        out.expect("video with zero frames")
    }

    /// SHA-256 of the frozen weights; must not change over a run.
    pub fn hash(&self) -> [u8; 32] {
        self.params.hash()
    }
}

/// Registers the aggregation adapter: a `c -> c` linear initialized to the
/// identity, so at step 0 the aggregator sees the raw backbone features.
pub fn init_adjust_agg(bank: &mut ParamBank, c: usize) {
    let mut w = Tensor::zeros(vec![c, c]);
    for i in 0..c {
        w.set2(i, i, 1.0);
    }
    bank.insert("adjust_agg.w", w);
    bank.insert("adjust_agg.b", Tensor::zeros(vec![1, c]));
}

/// Linear adapter in front of the aggregator. `z: [n, c]` (flattened
/// feature grid) -> `[n, c]`.
pub fn adjust_for_aggregation(tape: &mut Tape, staged: &mut Staged, bank: &ParamBank, z: Var) -> Var {
    let w = staged.stage(tape, bank, "adjust_agg.w");
    let b = staged.stage(tape, bank, "adjust_agg.b");
    let y = tape.matmul(z, w);
    tape.add_row(y, b)
}

/// Registers the quantization adapter: `z + conv2(relu(conv1(z)))` with the
/// second conv zero-initialized, i.e. the identity at step 0.
pub fn init_adjust_quant(bank: &mut ParamBank, rng: &mut StreamRng, c: usize) {
    bank.insert("adjust_q.conv1.w", conv_init(rng, 3, 3, c, c));
    bank.insert("adjust_q.conv1.b", Tensor::zeros(vec![c]));
    bank.insert("adjust_q.conv2.w", Tensor::zeros(vec![3, 3, c, c]));
    bank.insert("adjust_q.conv2.b", Tensor::zeros(vec![c]));
}

/// Residual conv adapter in front of the quantizer. `z: [h, w, c]` -> same
/// shape, recorded on the tape.
pub fn adjust_for_quantization(tape: &mut Tape, staged: &mut Staged, bank: &ParamBank, z: Var) -> Var {
    let w1 = staged.stage(tape, bank, "adjust_q.conv1.w");
    let b1 = staged.stage(tape, bank, "adjust_q.conv1.b");
    let w2 = staged.stage(tape, bank, "adjust_q.conv2.w");
    let b2 = staged.stage(tape, bank, "adjust_q.conv2.b");
    let h = tape.conv2d(z, w1, b1, 1, 1, true);
    let h = tape.relu(h);
    let h = tape.conv2d(h, w2, b2, 1, 1, true);
    tape.add(z, h)
}

/// Off-tape version of [`adjust_for_quantization`] for target precomputation
/// once the adapter is frozen.
pub fn adjust_for_quantization_ref(bank: &ParamBank, z: &Tensor) -> Tensor {
    let h = conv2d_ref(z, bank.get("adjust_q.conv1.w"), bank.get("adjust_q.conv1.b"), 1, 1, true);
    let h = h.map(|v| if v > 0.0 { v } else { 0.0 });
    let h = conv2d_ref(&h, bank.get("adjust_q.conv2.w"), bank.get("adjust_q.conv2.b"), 1, 1, true);
    let mut out = z.clone();
    for (o, d) in out.data.iter_mut().zip(&h.data) {
        *o += d;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::matmul;

    #[test]
    fn encode_shape_and_determinism() {
        let enc = ToyEncoder::new(7, 16);
        let mut rng = StreamRng::new(1);
        let img = rng.normal_tensor(&[64, 64, 3], 0.2).map(|v| (v + 0.5).clamp(0.0, 1.0));
        let z1 = enc.encode(&img);
        assert_eq!(z1.shape, vec![8, 8, 16]);
        let z2 = ToyEncoder::new(7, 16).encode(&img);
        assert_eq!(z1, z2);
        assert_ne!(ToyEncoder::new(8, 16).encode(&img), z1);
    }

    #[test]
    fn constant_input_gives_constant_features() {
        // unpadded kernel-equals-stride convs mean a flat image maps to
        // spatially flat features
        let enc = ToyEncoder::new(3, 16);
        let img = Tensor::full(vec![64, 64, 3], 0.37);
        let z = enc.encode(&img);
        let c = z.shape[2];
        for ch in 0..c {
            let v0 = z.at3(0, 0, ch);
            for i in 0..z.shape[0] {
                for j in 0..z.shape[1] {
                    assert!(
                        (z.at3(i, j, ch) - v0).abs() < 1e-9,
                        "cell ({i},{j}) ch {ch} differs"
                    );
                }
            }
        }
    }

    #[test]
    fn receptive_field_stays_within_radius() {
        let enc = ToyEncoder::new(5, 8);
        let mut rng = StreamRng::new(2);
        let img = rng.normal_tensor(&[64, 64, 3], 0.2).map(|v| (v + 0.5).clamp(0.0, 1.0));
        let base = enc.encode(&img);
        for &(y, x) in &[(0usize, 0usize), (31, 17), (63, 63), (40, 8)] {
            let mut poked = img.clone();
            let idx = (y * 64 + x) * 3;
            poked.data[idx] = (poked.data[idx] + 0.43).clamp(0.0, 1.0);
            let z = enc.encode(&poked);
            for i in 0..8 {
                for j in 0..8 {
                    let mut changed = false;
                    for ch in 0..8 {
                        if (z.at3(i, j, ch) - base.at3(i, j, ch)).abs() > 1e-12 {
                            changed = true;
                        }
                    }
                    if changed {
                        let dy = (8 * i) as isize - y as isize;
                        let dx = (8 * j) as isize - x as isize;
                        assert!(
                            dy.unsigned_abs() <= RF_RADIUS && dx.unsigned_abs() <= RF_RADIUS,
                            "poke ({y},{x}) leaked into cell ({i},{j})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn conv_matches_im2col_matmul_oracle() {
        // independent check of the conv routine the backbone calls: stride-1
        // 3x3 zero-pad conv equals an explicit im2col patch-matrix product
        let mut rng = StreamRng::new(6);
        let x = rng.normal_tensor(&[5, 6, 3], 1.0);
        let w = rng.normal_tensor(&[3, 3, 3, 4], 0.5);
        let b = rng.normal_tensor(&[4], 0.5);
        let direct = conv2d_ref(&x, &w, &b, 1, 1, false);

        let (h, iw, cin, cout) = (5usize, 6usize, 3usize, 4usize);
        let mut patches = Tensor::zeros(vec![h * iw, 9 * cin]);
        for oy in 0..h {
            for ox in 0..iw {
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let iy = oy as isize + ky as isize - 1;
                        let ix = ox as isize + kx as isize - 1;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= iw as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            patches.set2(
                                oy * iw + ox,
                                (ky * 3 + kx) * cin + ci,
                                x.at3(iy as usize, ix as usize, ci),
                            );
                        }
                    }
                }
            }
        }
        let wmat = w.reshaped(vec![9 * cin, cout]);
        let out = matmul(&patches, &wmat);
        for p in 0..h * iw {
            for co in 0..cout {
                let want = out.at2(p, co) + b.data[co];
                let got = direct.data[p * cout + co];
                assert!((want - got).abs() < 1e-10, "pixel {p} ch {co}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn adjust_agg_is_identity_at_init() {
        let mut bank = ParamBank::new();
        init_adjust_agg(&mut bank, 16);
        let mut rng = StreamRng::new(4);
        let z = rng.normal_tensor(&[64, 16], 1.0);
        let mut tape = Tape::new();
        let mut staged = Staged::new();
        let zv = tape.leaf(z.clone());
        let out = adjust_for_aggregation(&mut tape, &mut staged, &bank, zv);
        assert_eq!(tape.value(out), &z);
    }

    #[test]
    fn adjust_quant_is_identity_at_init_and_differentiable() {
        let mut bank = ParamBank::new();
        let mut rng = StreamRng::new(9);
        init_adjust_quant(&mut bank, &mut rng, 8);
        let z = rng.normal_tensor(&[4, 4, 8], 1.0);

        let mut tape = Tape::new();
        let mut staged = Staged::new();
        let zv = tape.leaf(z.clone());
        let out = adjust_for_quantization(&mut tape, &mut staged, &bank, zv);
        assert_eq!(tape.value(out), &z);
        assert_eq!(adjust_for_quantization_ref(&bank, &z), z);

        // conv1 still receives gradient through the relu branch
        let loss = tape.mean(out);
        let grads = tape.backward(loss);
        let g = grads.get(staged.var("adjust_q.conv2.w").unwrap()).unwrap();
        assert!(g.data.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn tape_and_ref_adjust_agree_after_perturbation() {
        let mut bank = ParamBank::new();
        let mut rng = StreamRng::new(12);
        init_adjust_quant(&mut bank, &mut rng, 6);
        // knock the adapter off the identity
        let w2 = bank.get_mut("adjust_q.conv2.w");
        for (i, v) in w2.data.iter_mut().enumerate() {
            *v = ((i % 13) as f64 - 6.0) * 0.01;
        }
        let z = rng.normal_tensor(&[5, 5, 6], 1.0);
        let mut tape = Tape::new();
        let mut staged = Staged::new();
        let zv = tape.leaf(z.clone());
        let out = adjust_for_quantization(&mut tape, &mut staged, &bank, zv);
        let on_tape = tape.value(out).clone();
        let off_tape = adjust_for_quantization_ref(&bank, &z);
        assert_eq!(on_tape, off_tape);
    }

    #[test]
    fn video_encoding_stacks_frames() {
        let enc = ToyEncoder::new(2, 8);
        let mut rng = StreamRng::new(3);
        let video = rng.normal_tensor(&[2, 32, 32, 3], 0.2).map(|v| (v + 0.5).clamp(0.0, 1.0));
        let zs = enc.encode_video(&video);
        assert_eq!(zs.shape, vec![2, 4, 4, 8]);
        let frame1 = Tensor::new(vec![32, 32, 3], video.data[32 * 32 * 3..].to_vec());
        let z1 = enc.encode(&frame1);
        assert_eq!(&zs.data[4 * 4 * 8..], &z1.data[..]);
    }

    #[test]
    fn freeze_hash_is_stable_and_seed_dependent() {
        let a = ToyEncoder::new(11, 16);
        let b = ToyEncoder::new(11, 16);
        let c = ToyEncoder::new(12, 16);
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }
}

use vvo_core::encoder::{adjust_for_quantization_ref, ToyEncoder};
use vvo_core::scenegen::{generate_scene, SceneParams};
use vvo_core::tensorio::StreamRng;
use vvo_core::vq::{match_distances, pretrain_vq, quantize, VqConfig, VqPretrainConfig};

fn main() {
    let params = SceneParams {
        min_objects: 2,
        max_objects: 4,
        min_size: 14.0,
        max_size: 24.0,
        ..Default::default()
    };
    let mut rng = StreamRng::new(40);
    let images: Vec<_> = (0..16).map(|_| generate_scene(&params, &mut rng).image).collect();
    let enc = ToyEncoder::new(7, 16);

    let tau: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let steps: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(600);
    let gumbel = std::env::args().nth(3).map_or(true, |s| s != "0");
    let anneal = std::env::args().nth(4).map_or(true, |s| s != "0");
    let seed = std::env::args().nth(5).and_then(|s| s.parse().ok()).unwrap_or(123);
    let cfg = VqPretrainConfig {
        vq: VqConfig {
            temperature: tau,
            use_gumbel: gumbel,
            use_annealing: anneal,
            ..Default::default()
        },
        steps,
        batch: 8,
        lr: 4e-4,
        epoch_len: 50,
    };
    let result = pretrain_vq(&enc, &images, &cfg, seed);
    for l in &result.log {
        println!(
            "epoch {:2} alpha {:.3} recon {:.4} unique {:3} cv {:.2}",
            l.epoch, l.alpha, l.recon_mse, l.unique_codes, l.usage_cv
        );
    }

    let active = result.codebook.active(result.bank.get("vq.w"));
    let mut norms: Vec<f64> = (0..active.rows())
        .map(|i| active.data[i * 16..(i + 1) * 16].iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    norms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!(
        "codeword norms: min {:.3} p25 {:.3} med {:.3} p75 {:.3} max {:.3}",
        norms[0],
        norms[active.rows() / 4],
        norms[active.rows() / 2],
        norms[3 * active.rows() / 4],
        norms[active.rows() - 1]
    );

    // post-adapter features of one image
    let z = adjust_for_quantization_ref(&result.bank, &enc.encode(&images[0]));
    let flat = z.reshaped(vec![64, 16]);
    let znorms: Vec<f64> =
        (0..64).map(|i| flat.data[i * 16..(i + 1) * 16].iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let zmin = znorms.iter().cloned().fold(f64::INFINITY, f64::min);
    let zmax = znorms.iter().cloned().fold(0.0f64, f64::max);
    println!("feature norms: min {zmin:.3} max {zmax:.3}");

    let d = match_distances(&flat, &active);
    for i in [0usize, 20, 40] {
        let row = &d.data[i * 256..(i + 1) * 256];
        let mut sorted: Vec<f64> = row.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        println!(
            "feature {i}: d1 {:.2} d2 {:.2} d3 {:.2} dmax {:.2}",
            sorted[0], sorted[1], sorted[2], sorted[255]
        );
    }
    let qt = quantize(&flat, &active);
    let mut uniq = qt.indices.clone();
    uniq.sort_unstable();
    uniq.dedup();
    println!("one image deterministic codes: {} unique of 64", uniq.len());
}

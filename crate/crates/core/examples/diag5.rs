//! Throwaway diagnostic: feature preprocessing vs k-means separability.

use vvo_core::encoder::ToyEncoder;
use vvo_core::metrics::ari_fg;
use vvo_core::scenegen::{generate_scene, SceneParams};
use vvo_core::tensor::{IntGrid, Tensor};
use vvo_core::tensorio::{derive_seed, StreamRng};

fn upsample(grid: &IntGrid, f: usize) -> IntGrid {
    let mut out = IntGrid::zeros(grid.h * f, grid.w * f);
    for y in 0..out.h {
        for x in 0..out.w {
            out.set(y, x, grid.at(y / f, x / f));
        }
    }
    out
}

fn kmeans(z: &Tensor, k: usize, rng: &mut StreamRng) -> Vec<usize> {
    let (n, c) = (z.rows(), z.cols());
    let mut centers: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let i = rng.uniform_int(n as u64) as usize;
            (0..c).map(|j| z.at2(i, j)).collect()
        })
        .collect();
    let mut assign = vec![0usize; n];
    for _ in 0..40 {
        for p in 0..n {
            let mut best = (f64::INFINITY, 0usize);
            for (ki, ctr) in centers.iter().enumerate() {
                let mut d = 0.0;
                for j in 0..c {
                    let diff = z.at2(p, j) - ctr[j];
                    d += diff * diff;
                }
                if d < best.0 {
                    best = (d, ki);
                }
            }
            assign[p] = best.1;
        }
        for (ki, ctr) in centers.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&p| assign[p] == ki).collect();
            if members.is_empty() {
                continue;
            }
            for (j, cj) in ctr.iter_mut().enumerate() {
                *cj = members.iter().map(|&p| z.at2(p, j)).sum::<f64>() / members.len() as f64;
            }
        }
    }
    assign
}

fn per_cell_ln(z: &Tensor) -> Tensor {
    let (n, c) = (z.rows(), z.cols());
    let mut out = Tensor::zeros(vec![n, c]);
    for p in 0..n {
        let mean: f64 = (0..c).map(|j| z.at2(p, j)).sum::<f64>() / c as f64;
        let var: f64 = (0..c).map(|j| (z.at2(p, j) - mean).powi(2)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + 1e-6).sqrt();
        for j in 0..c {
            out.set2(p, j, (z.at2(p, j) - mean) * inv);
        }
    }
    out
}

fn per_channel_std(z: &Tensor) -> Tensor {
    let (n, c) = (z.rows(), z.cols());
    let mut out = Tensor::zeros(vec![n, c]);
    for j in 0..c {
        let mean: f64 = (0..n).map(|p| z.at2(p, j)).sum::<f64>() / n as f64;
        let var: f64 = (0..n).map(|p| (z.at2(p, j) - mean).powi(2)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + 1e-9).sqrt();
        for p in 0..n {
            out.set2(p, j, (z.at2(p, j) - mean) * inv);
        }
    }
    out
}

fn l2norm(z: &Tensor) -> Tensor {
    let (n, c) = (z.rows(), z.cols());
    let mut out = Tensor::zeros(vec![n, c]);
    for p in 0..n {
        let norm: f64 = (0..c).map(|j| z.at2(p, j).powi(2)).sum::<f64>().sqrt().max(1e-9);
        for j in 0..c {
            out.set2(p, j, z.at2(p, j) / norm);
        }
    }
    out
}

fn main() {
    let params = SceneParams {
        height: 96,
        width: 96,
        min_objects: 2,
        max_objects: 4,
        min_size: 32.0,
        max_size: 56.0,
        noise_std: 0.02,
    };
    let (gh, gw) = (12usize, 12usize);
    for channels in [16usize, 32, 64] {
        let encoder = ToyEncoder::new(derive_seed(0, 1), channels);
        let mut scene_rng = StreamRng::new(7777);
        let mut km_rng = StreamRng::new(99);
        let mut scores = vec![Vec::new(); 4];
        for _ in 0..16 {
            let scene = generate_scene(&params, &mut scene_rng);
            let z0 = encoder.encode(&scene.image);
            let raw = Tensor::new(vec![gh * gw, channels], z0.data.clone());
            let variants =
                [raw.clone(), per_cell_ln(&raw), per_channel_std(&raw), l2norm(&raw)];
            for (vi, z) in variants.iter().enumerate() {
                let mut best = -1.0;
                for _ in 0..8 {
                    let assign = kmeans(z, 6, &mut km_rng);
                    let grid =
                        IntGrid::new(gh, gw, assign.iter().map(|&a| a as i32).collect());
                    let s = ari_fg(&scene.labels, &upsample(&grid, 8));
                    if s > best {
                        best = s;
                    }
                }
                scores[vi].push(best);
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
        println!(
            "c={channels}: raw {:.3}/{:.3} ln {:.3}/{:.3} chstd {:.3}/{:.3} l2 {:.3}/{:.3}",
            mean(&scores[0]), min(&scores[0]),
            mean(&scores[1]), min(&scores[1]),
            mean(&scores[2]), min(&scores[2]),
            mean(&scores[3]), min(&scores[3]),
        );
    }
}

//! Throwaway diagnostic: ceiling sweep over candidate data configurations.

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

/// Bilinear upsample of per-label one-hot maps, then per-pixel argmax.
fn bilinear_argmax(grid: &IntGrid, f: usize, labels: &[i32]) -> IntGrid {
    let (gh, gw) = (grid.h, grid.w);
    let (h, w) = (gh * f, gw * f);
    let mut out = IntGrid::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let gy = ((y as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (gh - 1) as f64);
            let gx = ((x as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (gw - 1) as f64);
            let y0 = gy.floor() as usize;
            let x0 = gx.floor() as usize;
            let y1 = (y0 + 1).min(gh - 1);
            let x1 = (x0 + 1).min(gw - 1);
            let fy = gy - y0 as f64;
            let fx = gx - x0 as f64;
            let mut best = (f64::NEG_INFINITY, 0i32);
            for &l in labels {
                let v = |yy: usize, xx: usize| if grid.at(yy, xx) == l { 1.0 } else { 0.0 };
                let val = v(y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + v(y0, x1) * (1.0 - fy) * fx
                    + v(y1, x0) * fy * (1.0 - fx)
                    + v(y1, x1) * fy * fx;
                if val > best.0 {
                    best = (val, l);
                }
            }
            out.set(y, x, best.1);
        }
    }
    out
}

/// Ideal soft masks: per-cell coverage fraction of each label, bilinearly
/// upsampled, then per-pixel argmax. The best any grid-resolution soft
/// attention could do.
fn soft_coverage_argmax(labels: &IntGrid, f: usize) -> IntGrid {
    let (gh, gw) = (labels.h / f, labels.w / f);
    let dist = labels.distinct();
    let nl = dist.len();
    let mut cover = vec![vec![0.0f64; nl]; gh * gw];
    let idx: std::collections::BTreeMap<i32, usize> =
        dist.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    for y in 0..labels.h {
        for x in 0..labels.w {
            cover[(y / f) * gw + x / f][idx[&labels.at(y, x)]] += 1.0 / (f * f) as f64;
        }
    }
    let (h, w) = (labels.h, labels.w);
    let mut out = IntGrid::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let gy = ((y as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (gh - 1) as f64);
            let gx = ((x as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (gw - 1) as f64);
            let y0 = gy.floor() as usize;
            let x0 = gx.floor() as usize;
            let y1 = (y0 + 1).min(gh - 1);
            let x1 = (x0 + 1).min(gw - 1);
            let fy = gy - y0 as f64;
            let fx = gx - x0 as f64;
            let mut best = (f64::NEG_INFINITY, 0i32);
            for (li, &l) in dist.iter().enumerate() {
                let val = cover[y0 * gw + x0][li] * (1.0 - fy) * (1.0 - fx)
                    + cover[y0 * gw + x1][li] * (1.0 - fy) * fx
                    + cover[y1 * gw + x0][li] * fy * (1.0 - fx)
                    + cover[y1 * gw + x1][li] * fy * fx;
                if val > best.0 {
                    best = (val, l);
                }
            }
            out.set(y, x, best.1);
        }
    }
    out
}

fn majority_downsample(labels: &IntGrid, f: usize) -> IntGrid {
    let (gh, gw) = (labels.h / f, labels.w / f);
    let mut out = IntGrid::zeros(gh, gw);
    for cy in 0..gh {
        for cx in 0..gw {
            let mut counts = std::collections::BTreeMap::new();
            for y in cy * f..(cy + 1) * f {
                for x in cx * f..(cx + 1) * f {
                    *counts.entry(labels.at(y, x)).or_insert(0usize) += 1;
                }
            }
            let best = counts.iter().max_by_key(|(_, &c)| c).map(|(&l, _)| l).unwrap();
            out.set(cy, cx, best);
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

fn main() {
    let candidates: Vec<(&str, SceneParams, usize)> = vec![
        (
            "A 64px sz24-40 2-3obj",
            SceneParams { height: 64, width: 64, min_objects: 2, max_objects: 3, min_size: 24.0, max_size: 40.0, noise_std: 0.02 },
            5,
        ),
        (
            "B 64px sz32-48 2-3obj",
            SceneParams { height: 64, width: 64, min_objects: 2, max_objects: 3, min_size: 32.0, max_size: 48.0, noise_std: 0.02 },
            5,
        ),
        (
            "C 96px sz32-56 2-4obj",
            SceneParams { height: 96, width: 96, min_objects: 2, max_objects: 4, min_size: 32.0, max_size: 56.0, noise_std: 0.02 },
            6,
        ),
        (
            "D 128px sz40-72 2-4obj",
            SceneParams { height: 128, width: 128, min_objects: 2, max_objects: 4, min_size: 40.0, max_size: 72.0, noise_std: 0.02 },
            6,
        ),
        (
            "E 128px sz48-88 2-3obj",
            SceneParams { height: 128, width: 128, min_objects: 2, max_objects: 3, min_size: 48.0, max_size: 88.0, noise_std: 0.02 },
            5,
        ),
    ];

    let encoder = ToyEncoder::new(derive_seed(0, 1), 16);
    for (name, params, k) in candidates {
        let mut scene_rng = StreamRng::new(7777);
        let mut km_rng = StreamRng::new(99);
        let (gh, gw) = (params.height / 8, params.width / 8);
        let mut res = Vec::new();
        let mut km = Vec::new();
        let mut res_bi = Vec::new();
        let mut km_bi = Vec::new();
        for _ in 0..16 {
            let scene = generate_scene(&params, &mut scene_rng);
            let truth = &scene.labels;
            let ideal = majority_downsample(truth, 8);
            res.push(ari_fg(truth, &upsample(&ideal, 8)));
            res_bi.push(ari_fg(truth, &soft_coverage_argmax(truth, 8)));

            let z0 = encoder.encode(&scene.image);
            let z = Tensor::new(vec![gh * gw, 16], z0.data.clone());
            let mut best = -1.0;
            let mut best_bi = -1.0;
            for _ in 0..5 {
                let assign = kmeans(&z, k, &mut km_rng);
                let grid = IntGrid::new(gh, gw, assign.iter().map(|&a| a as i32).collect());
                let s = ari_fg(truth, &upsample(&grid, 8));
                if s > best {
                    best = s;
                }
                let labels: Vec<i32> = (0..k as i32).collect();
                let sb = ari_fg(truth, &bilinear_argmax(&grid, 8, &labels));
                if sb > best_bi {
                    best_bi = sb;
                }
            }
            km.push(best);
            km_bi.push(best_bi);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
        println!(
            "{name}: res {:.3}/{:.3} bi {:.3}/{:.3} | km {:.3}/{:.3} km-bi {:.3}/{:.3}",
            mean(&res),
            min(&res),
            mean(&res_bi),
            min(&res_bi),
            mean(&km),
            min(&km),
            mean(&km_bi),
            min(&km_bi)
        );
    }
}

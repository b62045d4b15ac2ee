//! Throwaway diagnostic: ceilings after placement change.

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
    let cands: Vec<(&str, SceneParams, usize)> = vec![
        ("C 96 32-56 2-4", SceneParams { height: 96, width: 96, min_objects: 2, max_objects: 4, min_size: 32.0, max_size: 56.0, noise_std: 0.02 }, 6),
        ("F 96 28-44 3-3", SceneParams { height: 96, width: 96, min_objects: 3, max_objects: 3, min_size: 28.0, max_size: 44.0, noise_std: 0.02 }, 5),
        ("G 96 32-48 2-3", SceneParams { height: 96, width: 96, min_objects: 2, max_objects: 3, min_size: 32.0, max_size: 48.0, noise_std: 0.02 }, 5),
        ("H 112 32-56 3-3", SceneParams { height: 112, width: 112, min_objects: 3, max_objects: 3, min_size: 32.0, max_size: 56.0, noise_std: 0.02 }, 5),
        ("I 96 28-44 3-3 n01", SceneParams { height: 96, width: 96, min_objects: 3, max_objects: 3, min_size: 28.0, max_size: 44.0, noise_std: 0.01 }, 5),
    ];
    for (name, params, k) in cands {
        let encoder = ToyEncoder::new(derive_seed(0, 1), 16);
        let mut scene_rng = StreamRng::new(7777);
        let mut km_rng = StreamRng::new(99);
        let (gh, gw) = (params.height / 8, params.width / 8);
        let mut res_bi = Vec::new();
        let mut km = Vec::new();
        for _ in 0..24 {
            let scene = generate_scene(&params, &mut scene_rng);
            res_bi.push(ari_fg(&scene.labels, &soft_coverage_argmax(&scene.labels, 8)));
            let z0 = encoder.encode(&scene.image);
            let z = Tensor::new(vec![gh * gw, 16], z0.data.clone());
            let mut best = -1.0;
            for _ in 0..8 {
                let assign = kmeans(&z, k, &mut km_rng);
                let grid = IntGrid::new(gh, gw, assign.iter().map(|&a| a as i32).collect());
                let s = ari_fg(&scene.labels, &upsample(&grid, 8));
                if s > best {
                    best = s;
                }
            }
            km.push(best);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
        println!(
            "{name}: res-bi {:.3}/{:.3} km {:.3}/{:.3}",
            mean(&res_bi), min(&res_bi), mean(&km), min(&km)
        );
    }
}

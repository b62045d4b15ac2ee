//! Throwaway diagnostic: segmentation ceilings at the 8x8 feature grid.
//!
//! 1. Resolution ceiling: majority-vote truth labels per cell, upsampled.
//! 2. Clustering ceiling: k-means on encoder features, upsampled.

use vvo_core::encoder::ToyEncoder;
use vvo_core::metrics::{ari_fg, miou};
use vvo_core::scenegen::DatasetDir;
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
    let args: Vec<String> = std::env::args().collect();
    let data_root = args.get(1).map(String::as_str).unwrap_or("/tmp/bench7b/data");
    let data = DatasetDir::open(data_root.as_ref()).unwrap();
    let encoder = ToyEncoder::new(derive_seed(0, 1), 16);
    let mut rng = StreamRng::new(99);

    let mut res_scores = Vec::new();
    let mut km_scores = Vec::new();
    let mut km_miou = Vec::new();
    for i in 32..data.len() {
        let truth = data.labels(i).unwrap();
        let ideal8 = majority_downsample(&truth, 8);
        let res = ari_fg(&truth, &upsample(&ideal8, 8));
        res_scores.push(res);

        let image = data.image(i).unwrap();
        let z0 = encoder.encode(&image);
        let z = Tensor::new(vec![64, 16], z0.data.clone());
        // best over 5 restarts, k = 5
        let mut best = -1.0;
        let mut best_miou = -1.0;
        for _ in 0..5 {
            let assign = kmeans(&z, 5, &mut rng);
            let grid8 = IntGrid::new(8, 8, assign.iter().map(|&a| a as i32).collect());
            let s = ari_fg(&truth, &upsample(&grid8, 8));
            let m = miou(&truth, &upsample(&grid8, 8));
            if s > best {
                best = s;
            }
            if m > best_miou {
                best_miou = m;
            }
        }
        km_scores.push(best);
        km_miou.push(best_miou);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("resolution ceiling ari_fg (ideal 8x8 masks): mean {:.4}", mean(&res_scores));
    println!("kmeans-on-features ari_fg:                   mean {:.4}", mean(&km_scores));
    println!("kmeans-on-features miou:                     mean {:.4}", mean(&km_miou));
    println!("per-sample kmeans ari_fg: {:?}", km_scores.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>());
}

//! Throwaway diagnostic: per-sample mask inspection for a trained checkpoint.

use std::path::Path;
use vvo_core::harness::{run_eval, Split};
use vvo_core::metrics::ari_fg;
use vvo_core::scenegen::DatasetDir;
use vvo_core::tensor::IntGrid;
use vvo_core::tensorio::{read_tensor, RunConfig, TensorData};

fn load_mask(path: &Path) -> IntGrid {
    let tf = read_tensor(path).unwrap();
    let (h, w) = (tf.dims[0] as usize, tf.dims[1] as usize);
    let data = match tf.data {
        TensorData::U8(v) => v.into_iter().map(|b| b as i32).collect(),
        _ => panic!("expected u8 mask"),
    };
    IntGrid::new(h, w, data)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = Path::new(&args[1]);
    let data_root = Path::new(&args[2]);
    let cfg = RunConfig::load(&ckpt.join("meta.txt"), vvo_core::harness::CONFIG_SCHEMA).unwrap();
    let masks_dir = ckpt.join("diag_masks");
    let report = run_eval(&cfg, data_root, ckpt, Split::Eval, Some(&masks_dir)).unwrap();
    println!("report: {}", serde_json::to_string(&report).unwrap());

    let data = DatasetDir::open(data_root).unwrap();
    let total = data.len();
    let eval_count: usize = 16;
    let first_eval = total - eval_count;
    let mut scored = Vec::new();
    for i in first_eval..total {
        let truth = data.labels(i).unwrap();
        let pred = load_mask(&masks_dir.join(format!("{i:04}.vvot")));
        scored.push((ari_fg(&truth, &pred), i));
    }
    scored.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!(
        "per-sample ari_fg: {:?}",
        scored.iter().map(|(s, i)| (format!("{s:.2}"), *i)).collect::<Vec<_>>()
    );
    for &(s, i) in scored.iter().take(3) {
        let truth = data.labels(i).unwrap();
        let pred = load_mask(&masks_dir.join(format!("{i:04}.vvot")));
        println!("-- sample {i} ari_fg {s:.3}: pred (8px cells, majority) | truth");
        let f = 8;
        let (gh, gw) = (truth.h / f, truth.w / f);
        for y in 0..gh {
            let mut left = String::new();
            let mut right = String::new();
            for x in 0..gw {
                let majority = |g: &IntGrid, fg_only: bool| {
                    let mut counts = std::collections::BTreeMap::new();
                    for yy in y * f..(y + 1) * f {
                        for xx in x * f..(x + 1) * f {
                            let v = g.at(yy, xx);
                            if fg_only && v == 0 {
                                continue;
                            }
                            *counts.entry(v).or_insert(0usize) += 1;
                        }
                    }
                    counts.into_iter().max_by_key(|&(_, c)| c).map(|(l, _)| l)
                };
                let p = majority(&pred, false).unwrap();
                left.push(char::from_digit(p as u32 % 36, 36).unwrap());
                let t = majority(&truth, false).unwrap();
                right.push(if t == 0 {
                    '.'
                } else {
                    char::from_digit(t as u32 % 36, 36).unwrap()
                });
            }
            println!("  {left}   {right}");
        }
    }
}

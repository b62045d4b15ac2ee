//! Segmentation metrics (ARI, mIoU, mBO) and codebook usage statistics.
//!
//! Conventions: instance label 0 is background. `ari` scores the full pixel
//! partition; `ari_fg` restricts to pixels whose ground-truth label is
//! positive. `miou` uses the best one-to-one matching between truth objects
//! (labels > 0) and predicted segments; `mbo` relaxes that to the best
//! overlap per truth object, so `mbo >= miou` always.

use crate::tensor::{IntGrid, Tensor};
use serde::Serialize;
use std::collections::BTreeMap;

fn choose2(n: f64) -> f64 {
    n * (n - 1.0) / 2.0
}

fn contingency(truth: &[i32], pred: &[i32]) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>, f64) {
    let mut tmap = BTreeMap::new();
    let mut pmap = BTreeMap::new();
    for &t in truth {
        let next = tmap.len();
        tmap.entry(t).or_insert(next);
    }
    for &p in pred {
        let next = pmap.len();
        pmap.entry(p).or_insert(next);
    }
    let (r, c) = (tmap.len(), pmap.len());
    let mut table = vec![vec![0.0; c]; r];
    for (&t, &p) in truth.iter().zip(pred) {
        table[tmap[&t]][pmap[&p]] += 1.0;
    }
    let a: Vec<f64> = table.iter().map(|row| row.iter().sum()).collect();
    let mut b = vec![0.0; c];
    for row in &table {
        for (j, v) in row.iter().enumerate() {
            b[j] += v;
        }
    }
    (table, a, b, truth.len() as f64)
}

/// Adjusted Rand index between two labelings of the same pixels. Returns 1.0
/// when the correction term makes the denominator zero (both partitions
/// trivial).
pub fn ari_from_labels(truth: &[i32], pred: &[i32]) -> f64 {
    assert_eq!(truth.len(), pred.len(), "label vectors must align");
    if truth.is_empty() {
        return 1.0;
    }
    let (table, a, b, n) = contingency(truth, pred);
    let sum_ij: f64 = table.iter().flatten().map(|&v| choose2(v)).sum();
    let sum_a: f64 = a.iter().map(|&v| choose2(v)).sum();
    let sum_b: f64 = b.iter().map(|&v| choose2(v)).sum();
    let total = choose2(n);
    if total == 0.0 {
        return 1.0;
    }
    let expected = sum_a * sum_b / total;
    let max_index = 0.5 * (sum_a + sum_b);
    let denom = max_index - expected;
    if denom == 0.0 {
        return 1.0;
    }
    (sum_ij - expected) / denom
}

/// ARI over a full label grid.
pub fn ari(truth: &IntGrid, pred: &IntGrid) -> f64 {
    assert_eq!((truth.h, truth.w), (pred.h, pred.w), "grid size mismatch");
    ari_from_labels(&truth.data, &pred.data)
}

/// ARI restricted to foreground pixels (truth label > 0).
pub fn ari_fg(truth: &IntGrid, pred: &IntGrid) -> f64 {
    assert_eq!((truth.h, truth.w), (pred.h, pred.w), "grid size mismatch");
    let mut t = Vec::new();
    let mut p = Vec::new();
    for (tv, pv) in truth.data.iter().zip(&pred.data) {
        if *tv > 0 {
            t.push(*tv);
            p.push(*pv);
        }
    }
    ari_from_labels(&t, &p)
}

/// IoU matrix between truth objects (labels > 0, ascending) and every
/// predicted segment (all labels, ascending). Returns (matrix, truth labels,
/// pred labels).
fn iou_matrix(truth: &IntGrid, pred: &IntGrid) -> (Vec<Vec<f64>>, Vec<i32>, Vec<i32>) {
    let tl: Vec<i32> = truth.distinct().into_iter().filter(|&v| v > 0).collect();
    let pl: Vec<i32> = pred.distinct();
    let mut inter = vec![vec![0.0f64; pl.len()]; tl.len()];
    let mut tsize = vec![0.0f64; tl.len()];
    let mut psize = vec![0.0f64; pl.len()];
    let tidx: BTreeMap<i32, usize> = tl.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let pidx: BTreeMap<i32, usize> = pl.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    for (tv, pv) in truth.data.iter().zip(&pred.data) {
        let pj = pidx[pv];
        psize[pj] += 1.0;
        if *tv > 0 {
            let ti = tidx[tv];
            tsize[ti] += 1.0;
            inter[ti][pj] += 1.0;
        }
    }
    let mut iou = vec![vec![0.0f64; pl.len()]; tl.len()];
    for i in 0..tl.len() {
        for j in 0..pl.len() {
            let u = tsize[i] + psize[j] - inter[i][j];
            if u > 0.0 {
                iou[i][j] = inter[i][j] / u;
            }
        }
    }
    (iou, tl, pl)
}

/// Exhaustive best one-to-one assignment (small instances): maximum total
/// weight over injections of rows into columns.
fn assign_exhaustive(w: &[Vec<f64>]) -> f64 {
    let rows = w.len();
    if rows == 0 {
        return 0.0;
    }
    let cols = w[0].len();
    fn rec(w: &[Vec<f64>], i: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if i == w.len() {
            if acc > *best {
                *best = acc;
            }
            return;
        }
        let cols = used.len();
        for j in 0..cols {
            if !used[j] {
                used[j] = true;
                rec(w, i + 1, used, acc + w[i][j], best);
                used[j] = false;
            }
        }
        // a row may stay unmatched so a later row can take its column
        rec(w, i + 1, used, acc, best);
    }
    let mut best = f64::NEG_INFINITY;
    let mut used = vec![false; cols];
    rec(w, 0, &mut used, 0.0, &mut best);
    best
}

/// O(n^3) Hungarian algorithm, minimizing cost over a square matrix; returns
/// the column matched to each row.
fn hungarian_min(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut ans = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            ans[p[j] - 1] = j - 1;
        }
    }
    ans
}

/// Maximum-total-weight one-to-one assignment value. Exhaustive search for
/// up to 8 rows and columns, Hungarian beyond that.
fn assign_best(w: &[Vec<f64>]) -> f64 {
    let rows = w.len();
    if rows == 0 {
        return 0.0;
    }
    let cols = w[0].len();
    if rows.max(cols) <= 8 {
        return assign_exhaustive(w);
    }
    let n = rows.max(cols);
    let mut cost = vec![vec![0.0f64; n]; n];
    for (i, row) in cost.iter_mut().enumerate() {
        for (j, c) in row.iter_mut().enumerate() {
            let val = if i < rows && j < cols { w[i][j] } else { 0.0 };
            *c = -val;
        }
    }
    let assign = hungarian_min(&cost);
    let mut total = 0.0;
    for i in 0..rows {
        if assign[i] < cols {
            total += w[i][assign[i]];
        }
    }
    total
}

/// Mean IoU under the best one-to-one matching of truth objects to predicted
/// segments. 1.0 when the scene has no foreground objects.
pub fn miou(truth: &IntGrid, pred: &IntGrid) -> f64 {
    assert_eq!((truth.h, truth.w), (pred.h, pred.w), "grid size mismatch");
    let (iou, tl, _) = iou_matrix(truth, pred);
    if tl.is_empty() {
        return 1.0;
    }
    assign_best(&iou) / tl.len() as f64
}

/// Mean best overlap: each truth object takes its best-IoU predicted
/// segment, with reuse allowed. 1.0 when the scene has no foreground.
pub fn mbo(truth: &IntGrid, pred: &IntGrid) -> f64 {
    assert_eq!((truth.h, truth.w), (pred.h, pred.w), "grid size mismatch");
    let (iou, tl, _) = iou_matrix(truth, pred);
    if tl.is_empty() {
        return 1.0;
    }
    let sum: f64 = iou
        .iter()
        .map(|row| row.iter().cloned().fold(0.0, f64::max))
        .sum();
    sum / tl.len() as f64
}

/// Per-pixel argmax over slot masks. `masks: [k, n]` (slot-major), ties to
/// the lowest slot index.
pub fn masks_to_labels(masks: &Tensor, h: usize, w: usize) -> IntGrid {
    let (k, n) = (masks.rows(), masks.cols());
    assert_eq!(n, h * w, "mask pixels do not match grid");
    let mut out = IntGrid::zeros(h, w);
    for p in 0..n {
        let mut best = 0usize;
        for s in 1..k {
            if masks.at2(s, p) > masks.at2(best, p) {
                best = s;
            }
        }
        out.data[p] = best as i32;
    }
    out
}

/// Codebook usage over a stream of selected indices: number of distinct
/// codes, and the coefficient of variation (population std over mean) of the
/// nonzero histogram bins. Uniform usage gives cv 0.
pub fn code_usage_stats(indices: &[usize], num_codes: usize) -> (usize, f64) {
    if indices.is_empty() {
        return (0, 0.0);
    }
    let mut hist = vec![0usize; num_codes];
    for &i in indices {
        assert!(i < num_codes, "code index {i} out of range {num_codes}");
        hist[i] += 1;
    }
    let nonzero: Vec<f64> = hist.iter().filter(|&&c| c > 0).map(|&c| c as f64).collect();
    let unique = nonzero.len();
    let mean = nonzero.iter().sum::<f64>() / unique as f64;
    let var = nonzero.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / unique as f64;
    (unique, var.sqrt() / mean)
}

/// Aggregate segmentation report; field order fixes the JSON key order.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub ari: f64,
    pub ari_fg: f64,
    pub miou: f64,
    pub mbo: f64,
    pub n_samples: usize,
}

/// Means over per-sample metric tuples `(ari, ari_fg, miou, mbo)`.
pub fn aggregate_eval(per_sample: &[(f64, f64, f64, f64)]) -> EvalReport {
    let n = per_sample.len();
    assert!(n > 0, "aggregate_eval needs at least one sample");
    let inv = 1.0 / n as f64;
    EvalReport {
        ari: per_sample.iter().map(|s| s.0).sum::<f64>() * inv,
        ari_fg: per_sample.iter().map(|s| s.1).sum::<f64>() * inv,
        miou: per_sample.iter().map(|s| s.2).sum::<f64>() * inv,
        mbo: per_sample.iter().map(|s| s.3).sum::<f64>() * inv,
        n_samples: n,
    }
}

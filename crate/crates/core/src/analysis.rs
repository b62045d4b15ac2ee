//! Monte Carlo verification of the aggregation-probability and target-bias
//! arguments.
//!
//! `estimate_p2` measures how often a noisy query lands closer to a sample
//! from its own object region than to one from a competing region.
//! `compare_objectness` quantifies intra- versus inter-object feature
//! distances and the centroid shift between two feature distributions.
//! `residual_bias_experiment` contrasts the mean reconstruction residual
//! against a shared target with the residual against a shifted one.

use serde::Serialize;

use crate::tensor::{matmul_tn, Tensor};
use crate::tensorio::StreamRng;

/// Distance used by `estimate_p2`. Squared Euclidean matches the quantizer's
/// matching metric and is the default; minus inner product is kept behind a
/// flag for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    SqEuclidean,
    NegInner,
}

impl Metric {
    fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::SqEuclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
            Metric::NegInner => -a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>(),
        }
    }
}

/// Two Gaussian object regions plus a Gaussian query centered at `s_star`.
#[derive(Debug, Clone)]
pub struct ClusterWorld {
    pub dim: usize,
    pub s_star: Vec<f64>,
    /// Query standard deviation (isotropic).
    pub sigma: f64,
    pub o1_center: Vec<f64>,
    pub o1_spread: f64,
    pub o2_center: Vec<f64>,
    pub o2_spread: f64,
    pub metric: Metric,
}

impl ClusterWorld {
    /// 1-D world whose correct-aggregation probability has the closed form
    /// Phi(b): query N(0, 1), own region degenerate at 0, competing region
    /// degenerate at -2b. The decision boundary sits at -b. A floor keeps
    /// the two centers distinct when b = 0.
    pub fn two_point(b: f64) -> Self {
        let sep = (2.0 * b).max(1e-9);
        ClusterWorld {
            dim: 1,
            s_star: vec![0.0],
            sigma: 1.0,
            o1_center: vec![-sep],
            o1_spread: 0.0,
            o2_center: vec![0.0],
            o2_spread: 0.0,
            metric: Metric::SqEuclidean,
        }
    }

    fn validate(&self) {
        assert_eq!(self.s_star.len(), self.dim);
        assert_eq!(self.o1_center.len(), self.dim);
        assert_eq!(self.o2_center.len(), self.dim);
        assert!(self.sigma > 0.0, "query sigma must be positive");
        assert!(self.o1_spread >= 0.0 && self.o2_spread >= 0.0);
        let gap: f64 = self
            .o1_center
            .iter()
            .zip(&self.o2_center)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        assert!(gap > 0.0, "object centroids must be distinct");
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct P2Estimate {
    pub p2: f64,
    /// Binomial standard error sqrt(p (1-p) / n).
    pub se: f64,
    pub n_trials: usize,
}

/// Fraction of trials where the query is farther from the competing region's
/// sample than from its own: d(s, v1) > d(s, v2) with v1 from o1, v2 from o2.
pub fn estimate_p2(world: &ClusterWorld, n_trials: usize, rng: &mut StreamRng) -> P2Estimate {
    assert!(n_trials >= 1000, "need at least 1000 trials");
    world.validate();
    let d = world.dim;
    let mut s = vec![0.0f64; d];
    let mut v1 = vec![0.0f64; d];
    let mut v2 = vec![0.0f64; d];
    let mut hits = 0usize;
    for _ in 0..n_trials {
        for j in 0..d {
            s[j] = world.s_star[j] + world.sigma * rng.normal();
            v1[j] = world.o1_center[j] + world.o1_spread * rng.normal();
            v2[j] = world.o2_center[j] + world.o2_spread * rng.normal();
        }
        if world.metric.eval(&s, &v1) > world.metric.eval(&s, &v2) {
            hits += 1;
        }
    }
    let p2 = hits as f64 / n_trials as f64;
    P2Estimate { p2, se: (p2 * (1.0 - p2) / n_trials as f64).sqrt(), n_trials }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub separations: Vec<f64>,
    /// Median p2 over the seeds at each separation.
    pub p2_median: Vec<f64>,
}

/// p2 across inter-centroid separations, holding the query and intra-cluster
/// spreads fixed. The query sits at its own region's centroid.
pub fn p2_separation_sweep(
    dim: usize,
    separations: &[f64],
    sigma: f64,
    spread: f64,
    n_trials: usize,
    seeds: &[u64],
) -> SweepReport {
    assert!(!separations.is_empty() && !seeds.is_empty());
    let mut medians = Vec::with_capacity(separations.len());
    for &sep in separations {
        assert!(sep > 0.0, "separation must be positive");
        let mut o1_center = vec![0.0; dim];
        o1_center[0] = -sep;
        let world = ClusterWorld {
            dim,
            s_star: vec![0.0; dim],
            sigma,
            o1_center,
            o1_spread: spread,
            o2_center: vec![0.0; dim],
            o2_spread: spread,
            metric: Metric::SqEuclidean,
        };
        let mut vals: Vec<f64> = seeds
            .iter()
            .map(|&s| estimate_p2(&world, n_trials, &mut StreamRng::new(s)).p2)
            .collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        medians.push(vals[vals.len() / 2]);
    }
    SweepReport { separations: separations.to_vec(), p2_median: medians }
}

// ---------------------------------------------------------------------------
// Objectness comparison
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ObjectnessReport {
    pub intra_a: f64,
    pub inter_a: f64,
    pub intra_b: f64,
    pub inter_b: f64,
    /// Distance between set centroids in the top-2 principal-component space
    /// of the union.
    pub shift: f64,
}

/// Top-k principal directions of already-centered rows, `[c, k]`, by power
/// iteration with deflation. Deterministic: fixed start vectors, fixed
/// iteration count.
fn principal_components(centered: &Tensor, k: usize) -> Tensor {
    let (n, c) = (centered.rows(), centered.cols());
    assert!(k <= c);
    let mut cov = matmul_tn(centered, centered);
    for v in cov.data.iter_mut() {
        *v /= n as f64;
    }
    let mut comps = Tensor::zeros(vec![c, k]);
    for comp in 0..k {
        let mut v = vec![1.0 / (c as f64).sqrt(); c];
        v[comp % c] += 0.5; // break symmetry differently per component
        for _ in 0..300 {
            // Orthogonalize against previously found components.
            for prev in 0..comp {
                let dot: f64 = (0..c).map(|j| v[j] * comps.at2(j, prev)).sum();
                for j in 0..c {
                    v[j] -= dot * comps.at2(j, prev);
                }
            }
            let mut next = vec![0.0f64; c];
            for i in 0..c {
                for j in 0..c {
                    next[i] += cov.at2(i, j) * v[j];
                }
            }
            let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-300 {
                break; // direction annihilated; keep the previous iterate
            }
            for j in 0..c {
                v[j] = next[j] / norm;
            }
        }
        for j in 0..c {
            comps.set2(j, comp, v[j]);
        }
    }
    comps
}

/// Mean pairwise normalized distances within and across objects for two
/// feature sets over the same labeled pixels, plus their centroid shift in
/// the union's top-2 PCA space. Normalized distance is Euclidean / sqrt(c).
pub fn compare_objectness(
    features_a: &Tensor,
    features_b: &Tensor,
    labels: &[usize],
) -> ObjectnessReport {
    let (n, c) = (features_a.rows(), features_a.cols());
    assert_eq!(features_b.shape, features_a.shape, "feature sets must align");
    assert_eq!(labels.len(), n, "one label per row");
    let distinct: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    assert!(distinct.len() >= 2, "need at least two objects");

    let pairwise = |f: &Tensor| {
        let (mut intra, mut inter) = ((0.0, 0usize), (0.0, 0usize));
        for i in 0..n {
            for j in i + 1..n {
                let mut d2 = 0.0;
                for t in 0..c {
                    let diff = f.at2(i, t) - f.at2(j, t);
                    d2 += diff * diff;
                }
                let d = (d2 / c as f64).sqrt();
                if labels[i] == labels[j] {
                    intra = (intra.0 + d, intra.1 + 1);
                } else {
                    inter = (inter.0 + d, inter.1 + 1);
                }
            }
        }
        assert!(intra.1 > 0 && inter.1 > 0, "degenerate label partition");
        (intra.0 / intra.1 as f64, inter.0 / inter.1 as f64)
    };
    let (intra_a, inter_a) = pairwise(features_a);
    let (intra_b, inter_b) = pairwise(features_b);

    // Centroid shift in the top-2 PCA space of the union.
    let mut union = Tensor::zeros(vec![2 * n, c]);
    let mut mean = vec![0.0f64; c];
    for i in 0..n {
        for j in 0..c {
            union.set2(i, j, features_a.at2(i, j));
            union.set2(n + i, j, features_b.at2(i, j));
            mean[j] += features_a.at2(i, j) + features_b.at2(i, j);
        }
    }
    for m in mean.iter_mut() {
        *m /= (2 * n) as f64;
    }
    for i in 0..2 * n {
        for j in 0..c {
            let v = union.at2(i, j) - mean[j];
            union.set2(i, j, v);
        }
    }
    let comps = principal_components(&union, 2.min(c));
    let mut diff = vec![0.0f64; c];
    for j in 0..c {
        let ma: f64 = (0..n).map(|i| features_a.at2(i, j)).sum::<f64>() / n as f64;
        let mb: f64 = (0..n).map(|i| features_b.at2(i, j)).sum::<f64>() / n as f64;
        diff[j] = ma - mb;
    }
    let mut shift2 = 0.0;
    for comp in 0..comps.cols() {
        let proj: f64 = (0..c).map(|j| diff[j] * comps.at2(j, comp)).sum();
        shift2 += proj * proj;
    }

    ObjectnessReport { intra_a, inter_a, intra_b, inter_b, shift: shift2.sqrt() }
}

// ---------------------------------------------------------------------------
// Residual bias
// ---------------------------------------------------------------------------

/// A fixed target `q`, reconstructions `q + noise`, and a shifted target
/// `q2 = q + delta` standing in for an independently trained encoder's
/// version of the same content.
#[derive(Debug, Clone)]
pub struct BiasWorld {
    pub dim: usize,
    pub q: Vec<f64>,
    pub noise_std: f64,
    pub delta: Vec<f64>,
}

impl BiasWorld {
    pub fn new(dim: usize, noise_std: f64, delta_norm: f64, rng: &mut StreamRng) -> Self {
        assert!(noise_std > 0.0 && delta_norm >= 0.0);
        let q: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let mut delta: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let norm = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
        for d in delta.iter_mut() {
            *d *= if norm > 0.0 { delta_norm / norm } else { 0.0 };
        }
        BiasWorld { dim, q, noise_std, delta }
    }

    pub fn delta_norm(&self) -> f64 {
        self.delta.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BiasReport {
    /// `|| mean(Q' - Q) ||` — residual against the target the reconstructions
    /// were drawn around.
    pub mean_residual_shared: f64,
    /// `|| mean(Q' - Q2) ||` — residual against the shifted target.
    pub mean_residual_separate: f64,
    pub delta_norm: f64,
    /// Scale of the shared residual norm under pure noise:
    /// `noise_std * sqrt(dim / n)`.
    pub se: f64,
}

pub fn residual_bias_experiment(
    world: &BiasWorld,
    n_samples: usize,
    rng: &mut StreamRng,
) -> BiasReport {
    assert!(n_samples >= 1000, "need at least 1000 samples");
    assert_eq!(world.q.len(), world.dim);
    assert_eq!(world.delta.len(), world.dim);
    let d = world.dim;
    let mut mean_noise = vec![0.0f64; d];
    for _ in 0..n_samples {
        for m in mean_noise.iter_mut() {
            *m += world.noise_std * rng.normal();
        }
    }
    for m in mean_noise.iter_mut() {
        *m /= n_samples as f64;
    }
    let shared: f64 = mean_noise.iter().map(|v| v * v).sum::<f64>().sqrt();
    let separate: f64 = mean_noise
        .iter()
        .zip(&world.delta)
        .map(|(m, d)| (m - d) * (m - d))
        .sum::<f64>()
        .sqrt();
    BiasReport {
        mean_residual_shared: shared,
        mean_residual_separate: separate,
        delta_norm: world.delta_norm(),
        se: world.noise_std * (d as f64 / n_samples as f64).sqrt(),
    }
}

//! Brute-force reference implementations and random instance builders shared
//! by the integration tests.
#![allow(dead_code)]

pub mod gradcheck;

use eqface::aggregate::FeatureRecord;
use eqface::eval::{RocPoint, SimilarityMatrix};
use eqface::linalg;
use eqface::seeding;
use rand::Rng;
use rand_distr::StandardNormal;

/// Genuine and impostor scores split by label equality, in row-major order.
pub fn split_scores(sim: &SimilarityMatrix) -> (Vec<f64>, Vec<f64>) {
    let (mut g, mut i) = (Vec::new(), Vec::new());
    for r in 0..sim.rows() {
        for c in 0..sim.cols() {
            if sim.row_labels[r] == sim.col_labels[c] {
                g.push(sim.get(r, c));
            } else {
                i.push(sim.get(r, c));
            }
        }
    }
    (g, i)
}

/// (tar, threshold, far) from sorting impostor scores and indexing directly.
pub fn oracle_tar_at_far(genuine: &[f64], impostor: &[f64], target: f64) -> (f64, f64, f64) {
    let mut imp = impostor.to_vec();
    imp.sort_by(|a, b| b.total_cmp(a));
    let n = imp.len();
    let k_max = (0..=n).filter(|&c| c as f64 / n as f64 <= target).max().unwrap();
    let threshold = if k_max >= n {
        genuine.iter().chain(impostor).copied().fold(f64::INFINITY, f64::min)
    } else {
        let v = imp[k_max];
        genuine.iter().chain(impostor).copied().filter(|&s| s > v).fold(f64::INFINITY, f64::min)
    };
    let tar = genuine.iter().filter(|&&s| s >= threshold).count() as f64 / genuine.len() as f64;
    let far = impostor.iter().filter(|&&s| s >= threshold).count() as f64 / n as f64;
    (tar, threshold, far)
}

/// Enumerates every distinct score as a threshold and counts acceptances directly.
pub fn oracle_roc(genuine: &[f64], impostor: &[f64]) -> Vec<RocPoint> {
    let mut thresholds: Vec<f64> = genuine.iter().chain(impostor).copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut out = vec![RocPoint { threshold: f64::INFINITY, far: 0.0, tar: 0.0 }];
    for t in thresholds {
        out.push(RocPoint {
            threshold: t,
            far: impostor.iter().filter(|&&s| s >= t).count() as f64 / impostor.len() as f64,
            tar: genuine.iter().filter(|&&s| s >= t).count() as f64 / genuine.len() as f64,
        });
    }
    out.push(RocPoint { threshold: f64::NEG_INFINITY, far: 1.0, tar: 1.0 });
    out
}

/// Full sort of each query's column with index tie-breaking.
pub fn oracle_rank_n(sim: &SimilarityMatrix, n_values: &[usize]) -> Option<Vec<(usize, f64)>> {
    let mut ranks = Vec::new();
    for c in 0..sim.cols() {
        if !sim.row_labels.contains(&sim.col_labels[c]) {
            continue;
        }
        let mut order: Vec<usize> = (0..sim.rows()).collect();
        order.sort_by(|&a, &b| sim.get(b, c).total_cmp(&sim.get(a, c)).then(a.cmp(&b)));
        let pos = order.iter().position(|&r| sim.row_labels[r] == sim.col_labels[c]).unwrap();
        ranks.push(pos + 1);
    }
    if ranks.is_empty() {
        return None;
    }
    Some(n_values.iter().map(|&n| (n, ranks.iter().filter(|&&k| k <= n).count() as f64 / ranks.len() as f64)).collect())
}

/// Random matrix with scores quantized to `levels` steps (ties are common)
/// and labels drawn from `n_ids` identities.
pub fn random_matrix(seed: u64, rows: usize, cols: usize, n_ids: usize, levels: u32) -> SimilarityMatrix {
    let mut rng = seeding::rng(seed);
    let values = (0..rows * cols)
        .map(|_| {
            let k = rng.random_range(0..=levels) as f64;
            2.0 * k / levels as f64 - 1.0
        })
        .collect();
    let rl = (0..rows).map(|_| rng.random_range(0..n_ids)).collect();
    let cl = (0..cols).map(|_| rng.random_range(0..n_ids)).collect();
    SimilarityMatrix::from_values(values, rl, cl).unwrap()
}

pub fn unit_vector<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok(v) = linalg::l2_normalize(&g) {
            return v;
        }
    }
}

/// One identity's stream of `len` unit features with qualities in (0.01, 1).
pub fn random_stream(seed: u64, len: usize, d: usize) -> Vec<FeatureRecord> {
    let mut rng = seeding::rng(seed);
    (0..len)
        .map(|order| FeatureRecord { identity: 0, order, s: rng.random_range(0.01..1.0), f: unit_vector(&mut rng, d) })
        .collect()
}

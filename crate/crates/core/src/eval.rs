//! Verification and identification metrics over reference × query similarity
//! matrices: TAR at fixed FAR, ROC curves, rank-N accuracy, plus Spearman
//! rank correlation used to check quality scores against corruption.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::linalg;

/// Slack allowed on `|cos| <= 1` for unit inputs.
pub const SIM_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    pub row_labels: Vec<usize>,
    pub col_labels: Vec<usize>,
}

impl SimilarityMatrix {
    /// Row-major scores with their reference (row) and query (column) labels.
    pub fn from_values(values: Vec<f64>, row_labels: Vec<usize>, col_labels: Vec<usize>) -> Result<Self> {
        let (rows, cols) = (row_labels.len(), col_labels.len());
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyInput("similarity matrix"));
        }
        if values.len() != rows * cols {
            return Err(Error::DimensionMismatch { expected: rows * cols, got: values.len() });
        }
        if let Some(v) = values.iter().find(|v| !(v.abs() <= 1.0 + SIM_SLACK)) {
            return Err(Error::InvalidConfig(format!("similarity {v} outside [-1, 1]")));
        }
        Ok(SimilarityMatrix { rows, cols, values, row_labels, col_labels })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_same(&self, r: usize, c: usize) -> bool {
        self.row_labels[r] == self.col_labels[c]
    }
}

/// Entry `(i, j)` is `refs[i] · queries[j]`.
pub fn similarity_matrix(
    refs: &[Vec<f64>],
    ref_labels: &[usize],
    queries: &[Vec<f64>],
    query_labels: &[usize],
) -> Result<SimilarityMatrix> {
    if refs.is_empty() {
        return Err(Error::EmptyInput("reference features"));
    }
    if queries.is_empty() {
        return Err(Error::EmptyInput("query features"));
    }
    if ref_labels.len() != refs.len() {
        return Err(Error::DimensionMismatch { expected: refs.len(), got: ref_labels.len() });
    }
    if query_labels.len() != queries.len() {
        return Err(Error::DimensionMismatch { expected: queries.len(), got: query_labels.len() });
    }
    let d = refs[0].len();
    for v in refs.iter().chain(queries) {
        if v.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: v.len() });
        }
    }
    let mut values = Vec::with_capacity(refs.len() * queries.len());
    for r in refs {
        for q in queries {
            values.push(linalg::dot_unchecked(r, q));
        }
    }
    Ok(SimilarityMatrix {
        rows: refs.len(),
        cols: queries.len(),
        values,
        row_labels: ref_labels.to_vec(),
        col_labels: query_labels.to_vec(),
    })
}

/// Genuine (same identity) and impostor scores of a matrix.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSets {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScoreSets {
    pub fn from_matrix(sim: &SimilarityMatrix) -> Self {
        let mut s = ScoreSets::default();
        for r in 0..sim.rows {
            for (c, &v) in sim.row(r).iter().enumerate() {
                if sim.is_same(r, c) {
                    s.genuine.push(v);
                } else {
                    s.impostor.push(v);
                }
            }
        }
        s
    }

    fn check(&self) -> Result<()> {
        if self.genuine.is_empty() || self.impostor.is_empty() {
            return Err(Error::InsufficientPairs(format!(
                "{} genuine and {} impostor pairs; need at least one of each",
                self.genuine.len(),
                self.impostor.len()
            )));
        }
        if let Some(v) = self.genuine.iter().chain(&self.impostor).find(|v| v.is_nan()) {
            return Err(Error::InsufficientPairs(format!("score {v} is not comparable")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub tar: f64,
}

/// Accept-if-`score >= threshold` operating points: `+inf`, every distinct
/// score in descending order, then `-inf`.
pub fn roc_points(scores: &ScoreSets) -> Result<Vec<RocPoint>> {
    scores.check()?;
    let mut all: Vec<(f64, bool)> =
        scores.genuine.iter().map(|&v| (v, true)).chain(scores.impostor.iter().map(|&v| (v, false))).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n_gen = scores.genuine.len() as f64;
    let n_imp = scores.impostor.len() as f64;
    let mut out = vec![RocPoint { threshold: f64::INFINITY, far: 0.0, tar: 0.0 }];
    let (mut g, mut i) = (0usize, 0usize);
    let mut k = 0;
    while k < all.len() {
        let t = all[k].0;
        while k < all.len() && all[k].0 == t {
            if all[k].1 {
                g += 1;
            } else {
                i += 1;
            }
            k += 1;
        }
        out.push(RocPoint { threshold: t, far: i as f64 / n_imp, tar: g as f64 / n_gen });
    }
    out.push(RocPoint { threshold: f64::NEG_INFINITY, far: 1.0, tar: 1.0 });
    Ok(out)
}

pub fn roc_curve(sim: &SimilarityMatrix) -> Result<Vec<RocPoint>> {
    roc_points(&ScoreSets::from_matrix(sim))
}

pub fn roc_to_csv(points: &[RocPoint]) -> String {
    let mut out = String::from("threshold,far,tar\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", p.threshold, p.far, p.tar);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TarAtFar {
    pub far_target: f64,
    pub tar: f64,
    pub threshold: f64,
    /// Empirical FAR at `threshold`.
    pub far: f64,
    /// False when the impostor set is too small to resolve `far_target`;
    /// the result is then the achievable floor.
    pub reliable: bool,
}

/// For each target, the smallest observed threshold whose empirical FAR does
/// not exceed the target (no interpolation), and the TAR there.
pub fn tar_at_far_scores(scores: &ScoreSets, far_targets: &[f64]) -> Result<Vec<TarAtFar>> {
    let points = roc_points(scores)?;
    let n_imp = scores.impostor.len() as f64;
    far_targets
        .iter()
        .map(|&target| {
            if !(target > 0.0 && target <= 1.0) {
                return Err(Error::InvalidConfig(format!("FAR target {target} outside (0, 1]")));
            }
            // points[1..len-1] carry observed thresholds; FAR is non-decreasing along them
            let observed = &points[..points.len() - 1];
            let best = observed.iter().rev().find(|p| p.far <= target).expect("the +inf point has FAR 0");
            Ok(TarAtFar {
                far_target: target,
                tar: best.tar,
                threshold: best.threshold,
                far: best.far,
                reliable: n_imp * target >= 1.0,
            })
        })
        .collect()
}

pub fn tar_at_far(sim: &SimilarityMatrix, far_targets: &[f64]) -> Result<Vec<TarAtFar>> {
    tar_at_far_scores(&ScoreSets::from_matrix(sim), far_targets)
}

/// Closed-set rank-N accuracy. Queries whose identity has no reference entry
/// are skipped. Equal similarities rank the lower reference index first.
pub fn rank_n(sim: &SimilarityMatrix, n_values: &[usize]) -> Result<Vec<(usize, f64)>> {
    let mut ranks = Vec::new();
    for c in 0..sim.cols {
        let label = sim.col_labels[c];
        let mut best: Option<(usize, f64)> = None;
        for r in 0..sim.rows {
            if sim.row_labels[r] == label {
                let v = sim.get(r, c);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((r, v));
                }
            }
        }
        let Some((br, bv)) = best else { continue };
        let ahead = (0..sim.rows)
            .filter(|&r| {
                let v = sim.get(r, c);
                v > bv || (v == bv && r < br)
            })
            .count();
        ranks.push(ahead + 1);
    }
    if ranks.is_empty() {
        return Err(Error::NoInGalleryQueries);
    }
    let total = ranks.len() as f64;
    Ok(n_values.iter().map(|&n| (n, ranks.iter().filter(|&&k| k <= n).count() as f64 / total)).collect())
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Spearman rank correlation; zero when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    if a.len() < 2 {
        return Err(Error::EmptyInput("spearman needs at least two points"));
    }
    Ok(pearson(&average_ranks(a), &average_ranks(b)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub operating_point: String,
    pub value: f64,
}

pub fn summary_rows(tars: &[TarAtFar], ranks: &[(usize, f64)]) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for t in tars {
        let op = format!("far={:e}", t.far_target);
        rows.push(MetricRow { metric: "tar".into(), operating_point: op.clone(), value: t.tar });
        rows.push(MetricRow { metric: "threshold".into(), operating_point: op.clone(), value: t.threshold });
        rows.push(MetricRow { metric: "far_observed".into(), operating_point: op.clone(), value: t.far });
        rows.push(MetricRow {
            metric: "reliable".into(),
            operating_point: op,
            value: if t.reliable { 1.0 } else { 0.0 },
        });
    }
    for &(n, acc) in ranks {
        rows.push(MetricRow { metric: "rank".into(), operating_point: n.to_string(), value: acc });
    }
    rows
}

pub fn metrics_to_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("metric,operating_point,value\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.metric, r.operating_point, r.value);
    }
    out
}

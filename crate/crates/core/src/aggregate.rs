//! Quality-weighted feature aggregation over a template or a stream.
//!
//! * [`qwfa`]: quality-weighted mean of unit features, L2-normalized.
//! * [`qwfaf`]: `qwfa` restricted to records with `s >= s_th`, falling back to
//!   the plain mean of all features when the template's mean quality is below
//!   `s_th`.
//! * [`progressive_init`] / [`progressive_update`]: online fusion gated by
//!   similarity to the current fused feature (`> f_th`) and quality (`> s_th`).
//!
//! The progressive state keeps the weighted sum unnormalized and only
//! normalizes on read, so with both gates disabled it reproduces `qwfa`
//! bit for bit on the same order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::csvio::{self, Table};
use crate::error::{Error, Result};
use crate::linalg;

/// Quality mass below this is treated as zero.
pub const MIN_QUALITY_MASS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub identity: usize,
    /// Position in the identity's stream.
    pub order: usize,
    pub s: f64,
    pub f: Vec<f64>,
}

fn weighted_sum<'a>(records: impl Iterator<Item = &'a FeatureRecord>, d: usize) -> Result<(Vec<f64>, f64)> {
    let mut acc = vec![0.0; d];
    let mut mass = 0.0;
    for r in records {
        if r.f.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: r.f.len() });
        }
        linalg::axpy_unchecked(r.s, &r.f, &mut acc);
        mass += r.s;
    }
    Ok((acc, mass))
}

fn read_out(acc: &[f64], mass: f64) -> Result<Vec<f64>> {
    if !(mass >= MIN_QUALITY_MASS) {
        return Err(Error::ZeroQualityMass(mass));
    }
    let mean: Vec<f64> = acc.iter().map(|v| v / mass).collect();
    linalg::l2_normalize(&mean)
}

pub fn qwfa(records: &[FeatureRecord]) -> Result<Vec<f64>> {
    let first = records.first().ok_or(Error::EmptyInput("qwfa records"))?;
    let (acc, mass) = weighted_sum(records.iter(), first.f.len())?;
    read_out(&acc, mass)
}

/// Unweighted mean of the features, L2-normalized.
pub fn mean_feature(records: &[FeatureRecord]) -> Result<Vec<f64>> {
    let first = records.first().ok_or(Error::EmptyInput("mean records"))?;
    let d = first.f.len();
    let mut acc = vec![0.0; d];
    for r in records {
        if r.f.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: r.f.len() });
        }
        linalg::axpy_unchecked(1.0, &r.f, &mut acc);
    }
    let n = records.len() as f64;
    let mean: Vec<f64> = acc.iter().map(|v| v / n).collect();
    linalg::l2_normalize(&mean)
}

pub fn qwfaf(records: &[FeatureRecord], s_th: f64) -> Result<Vec<f64>> {
    let first = records.first().ok_or(Error::EmptyInput("qwfaf records"))?;
    let mut total = 0.0;
    for r in records {
        total += r.s;
    }
    let mean_s = total / records.len() as f64;
    if mean_s >= s_th {
        let (acc, mass) = weighted_sum(records.iter().filter(|r| r.s >= s_th), first.f.len())?;
        read_out(&acc, mass)
    } else {
        mean_feature(records)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateState {
    /// Unnormalized running sum of `s_i f_i` over accepted records.
    acc: Vec<f64>,
    s_sum: f64,
    /// Normalized read-out of `acc / s_sum`.
    fused: Vec<f64>,
    pub f_th: f64,
    pub s_th: f64,
    count_accepted: usize,
}

impl AggregateState {
    pub fn feature(&self) -> &[f64] {
        &self.fused
    }

    pub fn s_sum(&self) -> f64 {
        self.s_sum
    }

    pub fn count_accepted(&self) -> usize {
        self.count_accepted
    }

    fn accepts(&self, rec: &FeatureRecord) -> bool {
        linalg::dot_unchecked(&self.fused, &rec.f) > self.f_th && rec.s > self.s_th
    }
}

/// Seeds the state with the first record, whatever its quality.
pub fn progressive_init(first: &FeatureRecord, f_th: f64, s_th: f64) -> Result<AggregateState> {
    let acc = linalg::scale(&first.f, first.s);
    let fused = read_out(&acc, first.s)?;
    Ok(AggregateState { acc, s_sum: first.s, fused, f_th, s_th, count_accepted: 1 })
}

/// Accepts `rec` when `F · f > f_th` and `s > s_th`; otherwise the state is returned unchanged.
pub fn progressive_update(state: &AggregateState, rec: &FeatureRecord) -> Result<AggregateState> {
    if rec.f.len() != state.acc.len() {
        return Err(Error::DimensionMismatch { expected: state.acc.len(), got: rec.f.len() });
    }
    if !state.accepts(rec) {
        return Ok(state.clone());
    }
    let mut next = state.clone();
    linalg::axpy_unchecked(rec.s, &rec.f, &mut next.acc);
    next.s_sum += rec.s;
    next.fused = read_out(&next.acc, next.s_sum)?;
    next.count_accepted += 1;
    Ok(next)
}

/// A fusion rule applied to one identity's ordered stream.
pub trait Aggregator: Send + Sync {
    fn name(&self) -> &'static str;

    /// The fused feature available after each record of `stream` arrives.
    fn prefix_features(&self, stream: &[FeatureRecord]) -> Result<Vec<Vec<f64>>>;
}

/// Every record stands alone.
pub struct NoFusion;

impl Aggregator for NoFusion {
    fn name(&self) -> &'static str {
        "none"
    }

    fn prefix_features(&self, stream: &[FeatureRecord]) -> Result<Vec<Vec<f64>>> {
        Ok(stream.iter().map(|r| r.f.clone()).collect())
    }
}

type BatchRule = Box<dyn Fn(&[FeatureRecord]) -> Result<Vec<f64>> + Send + Sync>;

/// Batch rule re-evaluated on every prefix.
struct PrefixBatch {
    name: &'static str,
    rule: BatchRule,
}

impl Aggregator for PrefixBatch {
    fn name(&self) -> &'static str {
        self.name
    }

    fn prefix_features(&self, stream: &[FeatureRecord]) -> Result<Vec<Vec<f64>>> {
        (1..=stream.len()).map(|i| (self.rule)(&stream[..i])).collect()
    }
}

pub struct Progressive {
    pub f_th: f64,
    pub s_th: f64,
}

impl Aggregator for Progressive {
    fn name(&self) -> &'static str {
        "progressive"
    }

    fn prefix_features(&self, stream: &[FeatureRecord]) -> Result<Vec<Vec<f64>>> {
        let Some(first) = stream.first() else {
            return Ok(Vec::new());
        };
        let mut state = progressive_init(first, self.f_th, self.s_th)?;
        let mut out = vec![state.feature().to_vec()];
        for rec in &stream[1..] {
            state = progressive_update(&state, rec)?;
            out.push(state.feature().to_vec());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregationParams {
    pub f_th: f64,
    pub s_th: f64,
}

impl Default for AggregationParams {
    fn default() -> Self {
        AggregationParams { f_th: 0.5, s_th: 0.3 }
    }
}

type Builder = fn(&AggregationParams) -> Box<dyn Aggregator>;

pub struct AggregatorRegistry {
    builders: BTreeMap<&'static str, Builder>,
}

impl Default for AggregatorRegistry {
    fn default() -> Self {
        let mut r = AggregatorRegistry { builders: BTreeMap::new() };
        r.register("none", |_| Box::new(NoFusion));
        r.register("mean", |_| Box::new(PrefixBatch { name: "mean", rule: Box::new(mean_feature) }));
        r.register("qwfa", |_| Box::new(PrefixBatch { name: "qwfa", rule: Box::new(qwfa) }));
        r.register("qwfaf", |p| {
            let s_th = p.s_th;
            Box::new(PrefixBatch { name: "qwfaf", rule: Box::new(move |r| qwfaf(r, s_th)) })
        });
        r.register("progressive", |p| Box::new(Progressive { f_th: p.f_th, s_th: p.s_th }));
        r
    }
}

impl AggregatorRegistry {
    pub fn register(&mut self, name: &'static str, builder: Builder) {
        self.builders.insert(name, builder);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.builders.keys().copied().collect()
    }

    pub fn build(&self, name: &str, params: &AggregationParams) -> Result<Box<dyn Aggregator>> {
        let b = self
            .builders
            .get(name)
            .ok_or_else(|| Error::UnknownStrategy { kind: "aggregation", name: name.to_string() })?;
        Ok(b(params))
    }
}

/// Replaces every record's feature by the fused feature of its identity's
/// stream up to and including that record. Streams are ordered by `order`;
/// with `max_frames`, records past the cap keep the capped template.
/// Output is aligned with `records`.
pub fn fuse_streams(
    records: &[FeatureRecord],
    agg: &dyn Aggregator,
    max_frames: Option<usize>,
) -> Result<Vec<Vec<f64>>> {
    let mut streams: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        streams.entry(r.identity).or_default().push(i);
    }
    let mut out: Vec<Option<Vec<f64>>> = vec![None; records.len()];
    for idx in streams.values_mut() {
        idx.sort_by_key(|&i| (records[i].order, i));
        let cap = max_frames.map_or(idx.len(), |m| m.clamp(1, idx.len()));
        let stream: Vec<FeatureRecord> = idx[..cap].iter().map(|&i| records[i].clone()).collect();
        let fused = agg.prefix_features(&stream)?;
        for (k, &i) in idx.iter().enumerate() {
            out[i] = Some(fused[k.min(cap - 1)].clone());
        }
    }
    Ok(out.into_iter().map(|f| f.expect("every record belongs to a stream")).collect())
}

pub fn features_to_csv(records: &[FeatureRecord]) -> String {
    let d = records.first().map_or(0, |r| r.f.len());
    let mut out = csvio::indexed_header("f", &["identity", "order", "s"], d);
    for r in records {
        out.push_str(&format!("{},{},{}", r.identity, r.order, r.s));
        csvio::push_floats(&mut out, &r.f);
        out.push('\n');
    }
    out
}

pub fn features_from_csv(source: &str, text: &str) -> Result<Vec<FeatureRecord>> {
    parse_features(&Table::parse(source, text)?)
}

fn parse_features(t: &Table) -> Result<Vec<FeatureRecord>> {
    t.expect_prefix(&["identity", "order", "s"])?;
    let d = t.header.len() - 3;
    t.rows
        .iter()
        .map(|(line, f)| {
            let feat = t.floats(*line, f, 3)?;
            if feat.len() != d {
                return Err(Error::parse(
                    format!("{}:{line}", t.source),
                    format!("expected {d} feature values, found {}", feat.len()),
                ));
            }
            Ok(FeatureRecord {
                identity: t.field(*line, f, 0)?,
                order: t.field(*line, f, 1)?,
                s: t.field(*line, f, 2)?,
                f: feat,
            })
        })
        .collect()
}

pub fn write_features(path: &Path, records: &[FeatureRecord]) -> Result<()> {
    fs::write(path, features_to_csv(records))?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Vec<FeatureRecord>> {
    parse_features(&Table::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_1_SQRT_2;

    fn rec(f: &[f64], s: f64) -> FeatureRecord {
        FeatureRecord { identity: 0, order: 0, s, f: f.to_vec() }
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn qwfa_examples() {
        let single = [rec(&[0.6, 0.8], 0.4)];
        assert!(close(&qwfa(&single).unwrap(), &[0.6, 0.8], 1e-15));
        let eq = [rec(&[1.0, 0.0], 0.5), rec(&[0.0, 1.0], 0.5)];
        assert!(close(&qwfa(&eq).unwrap(), &[FRAC_1_SQRT_2, FRAC_1_SQRT_2], 1e-8));
        let w = [rec(&[1.0, 0.0], 0.75), rec(&[0.0, 1.0], 0.25)];
        assert!(close(&qwfa(&w).unwrap(), &[0.94868330, 0.31622777], 1e-8));
    }

    #[test]
    fn qwfa_errors() {
        assert!(matches!(qwfa(&[]), Err(Error::EmptyInput(_))));
        assert!(matches!(qwfa(&[rec(&[1.0, 0.0], 0.0)]), Err(Error::ZeroQualityMass(_))));
        assert!(matches!(qwfa(&[rec(&[1.0, 0.0], 0.5), rec(&[1.0], 0.5)]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn qwfaf_branches() {
        let rs = [rec(&[1.0, 0.0], 0.9), rec(&[0.0, 1.0], 0.1)];
        assert_eq!(qwfaf(&rs, 0.3).unwrap(), vec![1.0, 0.0]);
        assert_eq!(qwfaf(&rs, 0.0).unwrap(), qwfa(&rs).unwrap());
        let low = [rec(&[1.0, 0.0], 0.05), rec(&[0.0, 1.0], 0.15)];
        assert_eq!(qwfaf(&low, 0.3).unwrap(), mean_feature(&low).unwrap());
        assert!(qwfaf(&[], 0.3).is_err());
    }

    #[test]
    fn progressive_examples() {
        let st = progressive_init(&rec(&[1.0, 0.0], 0.7), 0.5, 0.3).unwrap();
        assert_eq!(st.feature(), &[1.0, 0.0]);
        assert_eq!(st.s_sum(), 0.7);
        assert_eq!(st.count_accepted(), 1);
        assert_eq!(st, progressive_init(&rec(&[1.0, 0.0], 0.7), 0.5, 0.3).unwrap());

        // below-threshold first record still seeds the state
        let low = progressive_init(&rec(&[0.0, 1.0], 0.1), 0.5, 0.3).unwrap();
        assert_eq!(low.feature(), &[0.0, 1.0]);

        // reject: dissimilar, then low quality
        let a = progressive_update(&st, &rec(&[0.0, 1.0], 0.9)).unwrap();
        assert_eq!(a, st);
        let b = progressive_update(&st, &rec(&[1.0, 0.0], 0.3)).unwrap();
        assert_eq!(b, st);

        let open = progressive_init(&rec(&[1.0, 0.0], 0.5), -1.0, 0.0).unwrap();
        let next = progressive_update(&open, &rec(&[0.0, 1.0], 0.5)).unwrap();
        assert!(close(next.feature(), &[FRAC_1_SQRT_2, FRAC_1_SQRT_2], 1e-8));
        assert_eq!(next.s_sum(), 1.0);
        assert_eq!(next.count_accepted(), 2);
    }

    #[test]
    fn registry_and_prefix_fusion() {
        let reg = AggregatorRegistry::default();
        assert_eq!(reg.names(), vec!["mean", "none", "progressive", "qwfa", "qwfaf"]);
        assert!(reg.build("attention", &AggregationParams::default()).is_err());
        let stream = [
            FeatureRecord { identity: 3, order: 1, s: 0.5, f: vec![0.0, 1.0] },
            FeatureRecord { identity: 3, order: 0, s: 0.5, f: vec![1.0, 0.0] },
            FeatureRecord { identity: 4, order: 0, s: 0.5, f: vec![0.6, 0.8] },
        ];
        let qwfa_agg = reg.build("qwfa", &AggregationParams::default()).unwrap();
        let fused = fuse_streams(&stream, qwfa_agg.as_ref(), None).unwrap();
        assert!(close(&fused[0], &[FRAC_1_SQRT_2, FRAC_1_SQRT_2], 1e-8));
        assert!(close(&fused[1], &[1.0, 0.0], 1e-15));
        assert!(close(&fused[2], &[0.6, 0.8], 1e-15));
        let capped = fuse_streams(&stream, qwfa_agg.as_ref(), Some(1)).unwrap();
        assert!(close(&capped[0], &[1.0, 0.0], 1e-15));
        let none = reg.build("none", &AggregationParams::default()).unwrap();
        assert_eq!(fuse_streams(&stream, none.as_ref(), None).unwrap()[0], vec![0.0, 1.0]);
    }

    #[test]
    fn feature_csv_round_trip() {
        let rs = vec![
            FeatureRecord { identity: 2, order: 0, s: 0.123456789, f: vec![0.6, -0.8] },
            FeatureRecord { identity: 5, order: 1, s: 0.5, f: vec![1.0, 0.0] },
        ];
        let text = features_to_csv(&rs);
        assert!(text.starts_with("identity,order,s,f_0,f_1\n"));
        assert_eq!(features_from_csv("mem", &text).unwrap(), rs);
        assert!(features_from_csv("mem", "id,order,s\n").is_err());
    }
}

//! Labeled synthetic data on the unit hypersphere.
//!
//! Each identity owns a prototype direction. A sample is the prototype plus
//! isotropic Gaussian corruption of scale `sigma`, renormalized, and then
//! lifted into input space by a fixed random matrix shared by the whole
//! dataset. `sigma` is kept per sample as the ground-truth (inverse) quality.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::csvio::{self, Table};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::seeding;

/// Standard deviation of the input-space observation noise.
pub const OBSERVATION_NOISE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLevel {
    pub sigma: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub d_in: usize,
    pub d: usize,
    pub noise_levels: Vec<NoiseLevel>,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_classes: 50,
            samples_per_class: 40,
            d_in: 32,
            d: 16,
            noise_levels: vec![NoiseLevel { sigma: 0.1, fraction: 0.7 }, NoiseLevel { sigma: 1.0, fraction: 0.3 }],
            seed: 7,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_classes < 2 {
            return bad(format!("n_classes must be >= 2, got {}", self.n_classes));
        }
        if self.samples_per_class == 0 || self.d == 0 || self.d_in == 0 {
            return bad("samples_per_class, d and d_in must be positive".into());
        }
        let mut total = 0.0;
        for lvl in &self.noise_levels {
            if !(lvl.sigma >= 0.0 && lvl.sigma.is_finite()) {
                return bad(format!("noise sigma {} must be finite and >= 0", lvl.sigma));
            }
            if !(0.0..=1.0).contains(&lvl.fraction) {
                return bad(format!("noise fraction {} outside [0, 1]", lvl.fraction));
            }
            total += lvl.fraction;
        }
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("noise fractions sum to {total}, expected 1"));
        }
        let mut sigmas: Vec<f64> = self.noise_levels.iter().map(|l| l.sigma).collect();
        sigmas.sort_by(f64::total_cmp);
        sigmas.dedup();
        if sigmas.len() < 2 {
            return bad("at least two distinct noise sigmas are required".into());
        }
        Ok(())
    }

    /// Per-class sample count for every noise tier (largest-remainder rounding).
    pub fn tier_counts(&self) -> Vec<usize> {
        let n = self.samples_per_class;
        let exact: Vec<f64> = self.noise_levels.iter().map(|l| l.fraction * n as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut left = n - counts.iter().sum::<usize>().min(n);
        let mut order: Vec<usize> = (0..exact.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = exact[a] - exact[a].floor();
            let rb = exact[b] - exact[b].floor();
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for &i in order.iter().cycle().take(exact.len() * n) {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSample {
    pub sample_id: u64,
    pub label: usize,
    pub sigma_gt: f64,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<EmbeddingSample>,
    /// Unit-norm class prototypes in embedding space, indexed by label.
    pub prototypes: Vec<Vec<f64>>,
    /// Clean embedding of every sample, aligned with `samples`.
    pub embeddings: Vec<Vec<f64>>,
}

fn gaussian_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_gaussian<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    loop {
        if let Ok(v) = linalg::l2_normalize(&gaussian_vec(rng, n)) {
            return v;
        }
    }
}

pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = seeding::rng(cfg.seed);
    let prototypes: Vec<Vec<f64>> = (0..cfg.n_classes).map(|_| unit_gaussian(&mut rng, cfg.d)).collect();
    let lift = Mat::from_vec(cfg.d_in, cfg.d, gaussian_vec(&mut rng, cfg.d_in * cfg.d))?;
    let counts = cfg.tier_counts();

    let total = cfg.n_classes * cfg.samples_per_class;
    let mut samples = Vec::with_capacity(total);
    let mut embeddings = Vec::with_capacity(total);
    for (label, proto) in prototypes.iter().enumerate() {
        let mut sigmas: Vec<f64> =
            counts.iter().zip(&cfg.noise_levels).flat_map(|(&c, lvl)| std::iter::repeat_n(lvl.sigma, c)).collect();
        sigmas.shuffle(&mut rng);
        for sigma in sigmas {
            let g = gaussian_vec(&mut rng, cfg.d);
            let noisy: Vec<f64> = proto.iter().zip(&g).map(|(p, gi)| p + sigma * gi).collect();
            let f_true = match linalg::l2_normalize(&noisy) {
                Ok(v) => v,
                // prototype cancelled by noise: fall back to the pure noise direction
                Err(_) => unit_gaussian(&mut rng, cfg.d),
            };
            let obs = gaussian_vec(&mut rng, cfg.d_in);
            let mut x = lift.matvec_unchecked(&f_true);
            linalg::axpy_unchecked(OBSERVATION_NOISE, &obs, &mut x);
            samples.push(EmbeddingSample { sample_id: samples.len() as u64, label, sigma_gt: sigma, x });
            embeddings.push(f_true);
        }
    }
    Ok(Dataset { samples, prototypes, embeddings })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub reference: Vec<T>,
    pub query: Vec<T>,
    pub reference_ids: Vec<usize>,
    pub disturbance_ids: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitConfig {
    pub n_ref_ids: usize,
    pub n_ref_per_id: usize,
    pub n_query_per_id: usize,
    pub n_disturb_ids: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    /// 300 gallery identities with 5 reference images each (1500 rows) and
    /// 600 query identities with 5 images each (3000 columns).
    fn default() -> Self {
        SplitConfig { n_ref_ids: 300, n_ref_per_id: 5, n_query_per_id: 5, n_disturb_ids: 300, seed: 11 }
    }
}

/// Reference/query split over any labeled items. Identities are drawn at
/// random; within an identity the original item order is kept, so streams
/// stay in arrival order. The first `n_ref_per_id` items of a gallery
/// identity go to the reference set, the next `n_query_per_id` to the query set.
pub fn split_by_identity<T: Clone>(items: &[T], label_of: impl Fn(&T) -> usize, cfg: &SplitConfig) -> Result<Split<T>> {
    let mut by_id: BTreeMap<usize, Vec<&T>> = BTreeMap::new();
    for it in items {
        by_id.entry(label_of(it)).or_default().push(it);
    }
    let needed_ids = cfg.n_ref_ids + cfg.n_disturb_ids;
    if by_id.len() < needed_ids {
        return Err(Error::InsufficientData(format!("{} identities requested, {} available", needed_ids, by_id.len())));
    }
    let mut ids: Vec<usize> = by_id.keys().copied().collect();
    ids.shuffle(&mut seeding::rng(cfg.seed));
    let mut reference_ids = ids[..cfg.n_ref_ids].to_vec();
    let mut disturbance_ids = ids[cfg.n_ref_ids..needed_ids].to_vec();
    reference_ids.sort_unstable();
    disturbance_ids.sort_unstable();

    let mut reference = Vec::new();
    let mut query = Vec::new();
    for id in &reference_ids {
        let members = &by_id[id];
        if members.len() < cfg.n_ref_per_id + cfg.n_query_per_id {
            return Err(Error::InsufficientData(format!(
                "identity {id} has {} items, {} needed",
                members.len(),
                cfg.n_ref_per_id + cfg.n_query_per_id
            )));
        }
        reference.extend(members[..cfg.n_ref_per_id].iter().map(|t| (*t).clone()));
    }
    for id in &reference_ids {
        let members = &by_id[id];
        query.extend(members[cfg.n_ref_per_id..cfg.n_ref_per_id + cfg.n_query_per_id].iter().map(|t| (*t).clone()));
    }
    for id in &disturbance_ids {
        let members = &by_id[id];
        if members.len() < cfg.n_query_per_id {
            return Err(Error::InsufficientData(format!(
                "disturbance identity {id} has {} items, {} needed",
                members.len(),
                cfg.n_query_per_id
            )));
        }
        query.extend(members[..cfg.n_query_per_id].iter().map(|t| (*t).clone()));
    }
    Ok(Split { reference, query, reference_ids, disturbance_ids })
}

pub fn split_reference_query(samples: &[EmbeddingSample], cfg: &SplitConfig) -> Result<Split<EmbeddingSample>> {
    split_by_identity(samples, |s| s.label, cfg)
}

pub fn to_csv(samples: &[EmbeddingSample]) -> String {
    let d_in = samples.first().map_or(0, |s| s.x.len());
    let mut out = csvio::indexed_header("x", &["sample_id", "label", "sigma_gt"], d_in);
    for s in samples {
        out.push_str(&format!("{},{},{}", s.sample_id, s.label, s.sigma_gt));
        csvio::push_floats(&mut out, &s.x);
        out.push('\n');
    }
    out
}

pub fn from_csv(source: &str, text: &str) -> Result<Vec<EmbeddingSample>> {
    parse_table(&Table::parse(source, text)?)
}

fn parse_table(table: &Table) -> Result<Vec<EmbeddingSample>> {
    table.expect_prefix(&["sample_id", "label", "sigma_gt"])?;
    let d_in = table.header.len() - 3;
    table
        .rows
        .iter()
        .map(|(line, f)| {
            let x = table.floats(*line, f, 3)?;
            if x.len() != d_in {
                return Err(Error::parse(
                    format!("{}:{line}", table.source),
                    format!("expected {d_in} input values, found {}", x.len()),
                ));
            }
            Ok(EmbeddingSample {
                sample_id: table.field(*line, f, 0)?,
                label: table.field(*line, f, 1)?,
                sigma_gt: table.field(*line, f, 2)?,
                x,
            })
        })
        .collect()
}

pub fn write_csv(path: &Path, samples: &[EmbeddingSample]) -> Result<()> {
    fs::write(path, to_csv(samples))?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<EmbeddingSample>> {
    parse_table(&Table::read(path)?)
}

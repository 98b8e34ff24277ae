//! The `gen`, `train`, `extract` and `eval` subcommands as library calls.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::aggregate::{self, AggregatorRegistry, FeatureRecord};
use crate::checkpoint;
use crate::config::{EvalSettings, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{self, MetricRow};
use crate::model::{self, Mode, ModelParams};
use crate::synthgen::{self, EmbeddingSample, SplitConfig};
use crate::trainer::{self, PipelineOutput, StageReport, StepLabel};

/// Process exit code for an error: 2 for usage and configuration problems,
/// 1 for everything that fails while running.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) | Error::UnknownStrategy { .. } => 2,
        _ => 1,
    }
}

fn guard_output(path: &Path, force: bool) -> Result<()> {
    if !force && path.exists() {
        return Err(Error::InvalidConfig(format!("{} already exists; pass --force to overwrite", path.display())));
    }
    Ok(())
}

/// `<base><suffix>` without touching the base's extension.
pub fn sibling(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn cmd_gen(cfg: &RunConfig, out: &Path, force: bool) -> Result<usize> {
    let gen = cfg.gen_config()?;
    guard_output(out, force)?;
    let data = synthgen::generate(&gen)?;
    synthgen::write_csv(out, &data.samples)?;
    Ok(data.samples.len())
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub iterations: Option<usize>,
    /// Train only the quality head on top of `init`.
    pub quality_head_only: bool,
    /// Run Step 1 alone: a plain recognition baseline.
    pub baseline_only: bool,
    pub init: Option<PathBuf>,
    pub force: bool,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: Vec<StepLabel>,
    pub checkpoints: Vec<PathBuf>,
    pub quality_table: PathBuf,
    pub log: PathBuf,
}

pub fn n_classes_of(data: &[EmbeddingSample]) -> Result<usize> {
    data.iter().map(|s| s.label + 1).max().ok_or(Error::EmptyInput("training data"))
}

pub fn cmd_train(cfg: &RunConfig, data_path: &Path, out: &Path, opts: &TrainOptions) -> Result<TrainSummary> {
    if opts.quality_head_only && opts.baseline_only {
        return Err(Error::InvalidConfig("--quality-head-only and --baseline-only are exclusive".into()));
    }
    if opts.quality_head_only && opts.init.is_none() {
        return Err(Error::InvalidConfig("--quality-head-only needs --init <checkpoint>".into()));
    }
    let loss_cfg = cfg.loss_config()?;
    let mut pcfg = cfg.pipeline_config()?;
    if let Some(it) = opts.iterations {
        pcfg.iterations = it;
        pcfg.validate()?;
    }
    guard_output(out, opts.force)?;
    let data = synthgen::read_csv(data_path)?;
    let n_classes = n_classes_of(&data)?;
    let params = match &opts.init {
        Some(p) => checkpoint::load(p)?,
        None => {
            let d_in = data[0].x.len();
            let dims = cfg.model_dims(d_in, cfg.get_or("data.d", 16)?, n_classes)?;
            model::init(&dims, cfg.init_seed()?)
        }
    };
    if params.dims().d_in != data[0].x.len() {
        return Err(Error::DimensionMismatch { expected: params.dims().d_in, got: data[0].x.len() });
    }
    if params.dims().n_classes < n_classes {
        return Err(Error::DimensionMismatch { expected: params.dims().n_classes, got: n_classes });
    }

    let mut written = Vec::new();
    let mut observer = |label: &StepLabel, p: &ModelParams, _: &StageReport| -> Result<()> {
        let path = sibling(out, &format!(".{label}"));
        checkpoint::save(&path, p)?;
        written.push(path);
        Ok(())
    };
    let result: PipelineOutput = if opts.quality_head_only {
        trainer::run_quality_head_only(&data, params, &loss_cfg, &pcfg.step2, &mut observer)?
    } else if opts.baseline_only {
        let mut p = params;
        let variant = loss_cfg.build()?;
        let r = trainer::run_step1(&data, &mut p, variant.as_ref(), &pcfg.step1)?;
        observer(&r.label, &p, &r)?;
        PipelineOutput {
            checkpoints: vec![(r.label, p.clone())],
            reports: vec![r],
            quality_tables: Vec::new(),
            params: p,
        }
    } else {
        trainer::run_pipeline(&data, params, &loss_cfg, &pcfg, &mut observer)?
    };

    checkpoint::save(out, &result.params)?;
    for (iteration, table) in &result.quality_tables {
        table.write(&sibling(out, &format!(".iter{iteration}.step3.quality.csv")))?;
    }
    let quality_table = sibling(out, ".quality.csv");
    trainer::build_quality_table(&result.params, &data)?.write(&quality_table)?;
    let log = sibling(out, ".log.csv");
    fs::write(&log, trainer::training_log_csv(&result.reports))?;
    Ok(TrainSummary { steps: result.executed(), checkpoints: written, quality_table, log })
}

/// Eval-mode features for every sample; `order` counts a sample's position
/// among its identity's samples in input order.
pub fn extract_features(params: &ModelParams, data: &[EmbeddingSample]) -> Result<Vec<FeatureRecord>> {
    let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(256) {
        let xs: Vec<&[f64]> = chunk.iter().map(|s| s.x.as_slice()).collect();
        let fwd = model::forward_batch(params, &xs, Mode::Eval)?;
        for (sample, r) in chunk.iter().zip(fwd.results) {
            let order = seen.entry(sample.label).or_insert(0);
            out.push(FeatureRecord { identity: sample.label, order: *order, s: r.s, f: r.f });
            *order += 1;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct SplitOutputs {
    pub reference: PathBuf,
    pub query: PathBuf,
}

pub fn split_features(
    records: &[FeatureRecord],
    cfg: &SplitConfig,
) -> Result<(Vec<FeatureRecord>, Vec<FeatureRecord>)> {
    let split = synthgen::split_by_identity(records, |r| r.identity, cfg)?;
    Ok((split.reference, split.query))
}

pub fn cmd_extract(
    cfg: &RunConfig,
    ckpt: &Path,
    data_path: &Path,
    out: &Path,
    split: Option<&SplitOutputs>,
    force: bool,
) -> Result<usize> {
    let split_cfg = split.map(|_| cfg.split_config()).transpose()?;
    guard_output(out, force)?;
    if let Some(s) = split {
        guard_output(&s.reference, force)?;
        guard_output(&s.query, force)?;
    }
    let params = checkpoint::load(ckpt)?;
    let data = synthgen::read_csv(data_path)?;
    if let Some(first) = data.first() {
        if first.x.len() != params.dims().d_in {
            return Err(Error::DimensionMismatch { expected: params.dims().d_in, got: first.x.len() });
        }
    }
    let records = extract_features(&params, &data)?;
    aggregate::write_features(out, &records)?;
    if let (Some(s), Some(sc)) = (split, split_cfg) {
        let (reference, query) = split_features(&records, &sc)?;
        aggregate::write_features(&s.reference, &reference)?;
        aggregate::write_features(&s.query, &query)?;
    }
    Ok(records.len())
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub tars: Vec<eval::TarAtFar>,
    pub ranks: Vec<(usize, f64)>,
    pub roc: Vec<eval::RocPoint>,
    pub rows: Vec<MetricRow>,
}

/// Fuses both sides per identity stream with the chosen mode, then scores
/// every reference entry against every query entry.
pub fn evaluate_features(
    reference: &[FeatureRecord],
    query: &[FeatureRecord],
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let d = reference.first().ok_or(Error::EmptyInput("reference features"))?.f.len();
    if let Some(r) = query.iter().chain(reference).find(|r| r.f.len() != d) {
        return Err(Error::DimensionMismatch { expected: d, got: r.f.len() });
    }
    let agg = AggregatorRegistry::default().build(&settings.mode, &settings.params)?;
    let ref_f = aggregate::fuse_streams(reference, agg.as_ref(), settings.max_frames)?;
    let query_f = aggregate::fuse_streams(query, agg.as_ref(), settings.max_frames)?;
    let ref_labels: Vec<usize> = reference.iter().map(|r| r.identity).collect();
    let query_labels: Vec<usize> = query.iter().map(|r| r.identity).collect();
    let sim = eval::similarity_matrix(&ref_f, &ref_labels, &query_f, &query_labels)?;
    let scores = eval::ScoreSets::from_matrix(&sim);
    let tars = eval::tar_at_far_scores(&scores, &settings.far_targets)?;
    let roc = eval::roc_points(&scores)?;
    let ranks = eval::rank_n(&sim, &settings.rank_n)?;
    let rows = eval::summary_rows(&tars, &ranks);
    Ok(EvalReport { tars, ranks, roc, rows })
}

pub fn cmd_eval(
    cfg: &RunConfig,
    reference: &Path,
    query: &Path,
    out: &Path,
    roc_out: Option<&Path>,
    force: bool,
) -> Result<EvalReport> {
    let settings = cfg.eval_settings()?;
    AggregatorRegistry::default().build(&settings.mode, &settings.params)?;
    let roc_path = roc_out.map_or_else(|| sibling(out, ".roc.csv"), Path::to_path_buf);
    guard_output(out, force)?;
    guard_output(&roc_path, force)?;
    let r = aggregate::read_features(reference)?;
    let q = aggregate::read_features(query)?;
    let report = evaluate_features(&r, &q, &settings)?;
    fs::write(out, eval::metrics_to_csv(&report.rows))?;
    fs::write(&roc_path, eval::roc_to_csv(&report.roc))?;
    Ok(report)
}

//! Momentum SGD and the three-step training pipeline.
//!
//! Step 1 trains backbone and classifier with the quality fixed to 1.
//! Step 2 freezes them and trains only the quality head from the same loss.
//! Step 3 freezes the head, tabulates a quality for every training sample and
//! retrains backbone and classifier with those qualities as constants,
//! optionally dropping samples whose quality is below a threshold.
//! The pipeline runs Step 1, then (Step 2, Step 3) for every iteration but
//! the last, and finishes with Step 2.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::csvio::Table;
use crate::error::{Error, Result};
use crate::loss::{self, LossConfig, LossOutput, LossVariant};
use crate::model::{self, Component, Gradients, Mode, ModelParams, QualityRouting};
use crate::seeding;
use crate::synthgen::EmbeddingSample;

/// Smallest batch the quality head's batch norm is trained on.
pub const MIN_BATCH: usize = 4;
/// Training aborts after this many consecutive non-finite batch losses.
pub const DIVERGENCE_PATIENCE: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl OptimConfig {
    pub fn new(lr0: f64, decay_epochs: Vec<usize>, total_epochs: usize) -> Self {
        OptimConfig {
            lr0,
            momentum: 0.9,
            weight_decay: 5e-4,
            decay_epochs,
            decay_factor: 10.0,
            total_epochs,
            batch_size: 64,
            seed: 1,
        }
    }

    /// Step 1 at desk scale: 30 epochs, decays at 10 and 20.
    pub fn desk_step1() -> Self {
        OptimConfig::new(0.1, vec![10, 20], 30)
    }

    /// Step 2: 15 epochs from 0.01, decays at 5 and 10.
    pub fn desk_step2() -> Self {
        OptimConfig::new(0.01, vec![5, 10], 15)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr0 >= 0.0) {
            return bad(format!("lr0 must be >= 0, got {}", self.lr0));
        }
        if self.batch_size < MIN_BATCH {
            return bad(format!("batch_size must be >= {MIN_BATCH}, got {}", self.batch_size));
        }
        if !self.decay_epochs.windows(2).all(|w| w[0] < w[1]) {
            return bad("decay_epochs must be strictly ascending".into());
        }
        if self.decay_epochs.iter().any(|&e| e >= self.total_epochs) {
            return bad("decay_epochs must all be < total_epochs".into());
        }
        if !(self.decay_factor > 0.0) {
            return bad("decay_factor must be > 0".into());
        }
        Ok(())
    }

    /// `lr0 / decay_factor^(number of decay epochs <= epoch)`, epochs counted from 0.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr0 / self.decay_factor.powi(k as i32)
    }
}

/// `v ← μ v + g + λ θ;  θ ← θ − lr v`
pub fn sgd_update(param: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) {
    for ((p, g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState {
    velocity: BTreeMap<Component, Vec<Vec<f64>>>,
}

/// One optimizer step on every component that has gradients and is not frozen.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut SgdState,
    lr: f64,
    cfg: &OptimConfig,
) -> Result<()> {
    for c in Component::ALL {
        let Some(g) = grads.get(c) else { continue };
        if params.is_frozen(c) {
            continue;
        }
        let mut tensors = params.trainable_mut(c);
        if tensors.len() != g.len() {
            return Err(Error::ShapeMismatch { name: c.to_string(), expected: tensors.len(), got: g.len() });
        }
        for (i, (t, gt)) in tensors.iter().zip(g).enumerate() {
            if t.len() != gt.len() {
                return Err(Error::ShapeMismatch { name: format!("{c}[{i}]"), expected: t.len(), got: gt.len() });
            }
        }
        let vel = state.velocity.entry(c).or_insert_with(|| tensors.iter().map(|t| vec![0.0; t.len()]).collect());
        for ((t, gt), v) in tensors.iter_mut().zip(g).zip(vel.iter_mut()) {
            sgd_update(t, gt, v, lr, cfg.momentum, cfg.weight_decay);
        }
    }
    Ok(())
}

/// Frozen per-sample qualities keyed by sample id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QualityTable(pub BTreeMap<u64, f64>);

impl QualityTable {
    pub fn get(&self, id: u64) -> Result<f64> {
        self.0.get(&id).copied().ok_or(Error::IncompleteQualityTable(id))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,s\n");
        for (id, s) in &self.0 {
            out.push_str(&format!("{id},{s}\n"));
        }
        out
    }

    pub fn from_csv(source: &str, text: &str) -> Result<QualityTable> {
        let t = Table::parse(source, text)?;
        t.expect_prefix(&["sample_id", "s"])?;
        let mut map = BTreeMap::new();
        for (line, f) in &t.rows {
            map.insert(t.field(*line, f, 0)?, t.field(*line, f, 1)?);
        }
        Ok(QualityTable(map))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<QualityTable> {
        QualityTable::from_csv(&path.display().to_string(), &fs::read_to_string(path)?)
    }
}

/// Eval-mode quality of every sample.
pub fn build_quality_table(params: &ModelParams, data: &[EmbeddingSample]) -> Result<QualityTable> {
    let mut map = BTreeMap::new();
    for chunk in data.chunks(256) {
        let xs: Vec<&[f64]> = chunk.iter().map(|s| s.x.as_slice()).collect();
        let fwd = model::forward_batch(params, &xs, Mode::Eval)?;
        for (s, r) in chunk.iter().zip(&fwd.results) {
            map.insert(s.sample_id, r.s);
        }
    }
    Ok(QualityTable(map))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum StepKind {
    Step1,
    Step2,
    Step3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct StepLabel {
    pub kind: StepKind,
    pub iteration: usize,
}

impl StepLabel {
    pub fn step_name(&self) -> &'static str {
        match self.kind {
            StepKind::Step1 => "step1",
            StepKind::Step2 => "step2",
            StepKind::Step3 => "step3",
        }
    }
}

impl fmt::Display for StepLabel {
    /// `step1`, `iter1.step2`, `iter1.step3`, ...
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            StepKind::Step1 => f.write_str("step1"),
            _ => write!(f, "iter{}.{}", self.iteration, self.step_name()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum QualitySource<'a> {
    FixedOne,
    Live,
    Table(&'a QualityTable),
}

impl QualitySource<'_> {
    fn routing(&self) -> QualityRouting {
        match self {
            QualitySource::FixedOne => QualityRouting::FixedOne,
            QualitySource::Live => QualityRouting::Live,
            QualitySource::Table(_) => QualityRouting::Frozen,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StageSpec<'a> {
    pub label: StepLabel,
    pub trainable: &'a [Component],
    pub quality: QualitySource<'a>,
    pub sched: &'a OptimConfig,
    /// Samples whose tabulated quality is below this contribute nothing.
    pub qwdf_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub contributing: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub label: StepLabel,
    pub epochs: Vec<EpochRecord>,
    /// Names of tensors whose bits changed during the stage.
    pub changed: Vec<String>,
}

/// Splits an epoch's order into batches; a tail shorter than [`MIN_BATCH`]
/// joins the previous batch.
fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = (start + batch_size).min(order.len());
        if order.len() - end < MIN_BATCH && end < order.len() {
            end = order.len();
        }
        out.push(&order[start..end]);
        start = end;
    }
    out
}

fn batch_losses(
    variant: &dyn LossVariant,
    params: &ModelParams,
    data: &[EmbeddingSample],
    batch: &[usize],
    source: QualitySource<'_>,
) -> Result<(model::BatchForward, Vec<LossOutput>)> {
    let xs: Vec<&[f64]> = batch.iter().map(|&i| data[i].x.as_slice()).collect();
    let fwd = model::forward_batch(params, &xs, Mode::Train)?;
    let w_hat = params.classifier.normalized()?;
    let mut losses = Vec::with_capacity(batch.len());
    for (&i, r) in batch.iter().zip(&fwd.results) {
        let s = match source {
            QualitySource::FixedOne => 1.0,
            QualitySource::Live => r.s,
            QualitySource::Table(t) => t.get(data[i].sample_id)?,
        };
        losses.push(loss::evaluate(variant, &r.f, &w_hat, data[i].label, s)?);
    }
    Ok((fwd, losses))
}

/// Runs one training stage in place.
pub fn run_stage(
    data: &[EmbeddingSample],
    params: &mut ModelParams,
    variant: &dyn LossVariant,
    spec: &StageSpec<'_>,
) -> Result<StageReport> {
    spec.sched.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("training data"));
    }
    for c in Component::ALL {
        if spec.trainable.contains(&c) {
            params.unfreeze(c);
        } else {
            params.freeze(c);
        }
    }
    let before = params.clone();

    let mut eligible: Vec<usize> = Vec::with_capacity(data.len());
    for (i, s) in data.iter().enumerate() {
        let keep = match (spec.quality, spec.qwdf_threshold) {
            (QualitySource::Table(t), Some(th)) => t.get(s.sample_id)? >= th,
            (QualitySource::Table(t), None) => {
                t.get(s.sample_id)?;
                true
            }
            _ => true,
        };
        if keep {
            eligible.push(i);
        }
    }

    let routing = spec.quality.routing();
    let update_bn = routing == QualityRouting::Live && !params.is_frozen(Component::Quality);
    let mut state = SgdState::default();
    let mut epochs = Vec::with_capacity(spec.sched.total_epochs);
    let mut bad_streak = 0;
    for epoch in 0..spec.sched.total_epochs {
        let lr = spec.sched.lr_at(epoch);
        let mut order = eligible.clone();
        order.shuffle(&mut seeding::child_rng(spec.sched.seed, epoch as u64));
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for batch in batches(&order, spec.sched.batch_size) {
            let (fwd, losses) = batch_losses(variant, params, data, batch, spec.quality)?;
            let batch_sum: f64 = losses.iter().map(|l| l.value).sum();
            if !batch_sum.is_finite() {
                bad_streak += 1;
                if bad_streak >= DIVERGENCE_PATIENCE {
                    return Err(Error::DivergenceDetected { epoch, consecutive: bad_streak });
                }
                continue;
            }
            bad_streak = 0;
            loss_sum += batch_sum;
            loss_count += losses.len();
            let grads = model::backward_batch(params, &fwd, &losses, routing)?;
            sgd_step(params, &grads, &mut state, lr, spec.sched)?;
            if update_bn {
                if let Some(st) = &fwd.stats {
                    params.quality.bn.update_running(st);
                }
            }
        }
        epochs.push(EpochRecord {
            epoch,
            mean_loss: if loss_count > 0 { loss_sum / loss_count as f64 } else { f64::NAN },
            lr,
            contributing: order.len(),
        });
    }
    Ok(StageReport { label: spec.label, epochs, changed: params.changed_tensors(&before) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step3Restart {
    Continue,
    Scratch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub step1: OptimConfig,
    pub step2: OptimConfig,
    pub step3: OptimConfig,
    pub iterations: usize,
    pub step3_restart: Step3Restart,
    pub qwdf_threshold: Option<f64>,
    /// Seed for re-initializing backbone and classifier on a scratch restart.
    pub init_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            step1: OptimConfig::desk_step1(),
            step2: OptimConfig::desk_step2(),
            step3: OptimConfig::desk_step1(),
            iterations: 2,
            step3_restart: Step3Restart::Continue,
            qwdf_threshold: None,
            init_seed: 1,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::InvalidConfig("iterations must be >= 1".into()));
        }
        self.step1.validate()?;
        self.step2.validate()?;
        self.step3.validate()
    }
}

const BACKBONE_AND_CLASSIFIER: [Component; 2] = [Component::Backbone, Component::Classifier];
const QUALITY_ONLY: [Component; 1] = [Component::Quality];

pub fn run_step1(
    data: &[EmbeddingSample],
    params: &mut ModelParams,
    variant: &dyn LossVariant,
    sched: &OptimConfig,
) -> Result<StageReport> {
    let spec = StageSpec {
        label: StepLabel { kind: StepKind::Step1, iteration: 1 },
        trainable: &BACKBONE_AND_CLASSIFIER,
        quality: QualitySource::FixedOne,
        sched,
        qwdf_threshold: None,
    };
    run_stage(data, params, variant, &spec)
}

pub fn run_step2(
    data: &[EmbeddingSample],
    params: &mut ModelParams,
    variant: &dyn LossVariant,
    sched: &OptimConfig,
    iteration: usize,
) -> Result<StageReport> {
    let spec = StageSpec {
        label: StepLabel { kind: StepKind::Step2, iteration },
        trainable: &QUALITY_ONLY,
        quality: QualitySource::Live,
        sched,
        qwdf_threshold: None,
    };
    run_stage(data, params, variant, &spec)
}

pub fn run_step3(
    data: &[EmbeddingSample],
    params: &mut ModelParams,
    table: &QualityTable,
    variant: &dyn LossVariant,
    sched: &OptimConfig,
    qwdf_threshold: Option<f64>,
    iteration: usize,
) -> Result<StageReport> {
    let spec = StageSpec {
        label: StepLabel { kind: StepKind::Step3, iteration },
        trainable: &BACKBONE_AND_CLASSIFIER,
        quality: QualitySource::Table(table),
        sched,
        qwdf_threshold,
    };
    run_stage(data, params, variant, &spec)
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub params: ModelParams,
    pub checkpoints: Vec<(StepLabel, ModelParams)>,
    pub reports: Vec<StageReport>,
    /// Table used by each Step 3, keyed by iteration.
    pub quality_tables: Vec<(usize, QualityTable)>,
}

impl PipelineOutput {
    pub fn executed(&self) -> Vec<StepLabel> {
        self.reports.iter().map(|r| r.label).collect()
    }
}

/// Observer invoked after every completed step (checkpointing, logging).
pub type StepObserver<'a> = dyn FnMut(&StepLabel, &ModelParams, &StageReport) -> Result<()> + 'a;

pub fn run_pipeline(
    data: &[EmbeddingSample],
    mut params: ModelParams,
    loss_cfg: &LossConfig,
    pcfg: &PipelineConfig,
    observer: &mut StepObserver<'_>,
) -> Result<PipelineOutput> {
    pcfg.validate()?;
    let variant = loss_cfg.build()?;
    let mut out = PipelineOutput {
        params: params.clone(),
        checkpoints: Vec::new(),
        reports: Vec::new(),
        quality_tables: Vec::new(),
    };
    let mut record = |out: &mut PipelineOutput, params: &ModelParams, report: StageReport| -> Result<()> {
        observer(&report.label, params, &report)?;
        out.checkpoints.push((report.label, params.clone()));
        out.reports.push(report);
        Ok(())
    };

    let r = run_step1(data, &mut params, variant.as_ref(), &pcfg.step1)?;
    record(&mut out, &params, r)?;
    for iteration in 1..=pcfg.iterations {
        let r = run_step2(data, &mut params, variant.as_ref(), &pcfg.step2, iteration)?;
        record(&mut out, &params, r)?;
        if iteration == pcfg.iterations {
            break;
        }
        let table = build_quality_table(&params, data)?;
        if pcfg.step3_restart == Step3Restart::Scratch {
            let fresh = model::init(&params.dims(), seeding::mix(pcfg.init_seed, iteration as u64));
            params.backbone = fresh.backbone;
            params.classifier = fresh.classifier;
        }
        let r = run_step3(data, &mut params, &table, variant.as_ref(), &pcfg.step3, pcfg.qwdf_threshold, iteration)?;
        record(&mut out, &params, r)?;
        out.quality_tables.push((iteration, table));
    }
    out.params = params;
    Ok(out)
}

/// Trains only the quality head on top of an externally trained backbone
/// and classifier: the pipeline's Step 2 alone.
pub fn run_quality_head_only(
    data: &[EmbeddingSample],
    mut params: ModelParams,
    loss_cfg: &LossConfig,
    sched: &OptimConfig,
    observer: &mut StepObserver<'_>,
) -> Result<PipelineOutput> {
    let variant = loss_cfg.build()?;
    let r = run_step2(data, &mut params, variant.as_ref(), sched, 1)?;
    observer(&r.label, &params, &r)?;
    Ok(PipelineOutput {
        checkpoints: vec![(r.label, params.clone())],
        reports: vec![r],
        quality_tables: Vec::new(),
        params,
    })
}

/// `step,iteration,epoch,mean_loss,lr` rows for every executed epoch.
pub fn training_log_csv(reports: &[StageReport]) -> String {
    let mut out = String::from("step,iteration,epoch,mean_loss,lr\n");
    for r in reports {
        for e in &r.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.label.step_name(),
                r.label.iteration,
                e.epoch,
                e.mean_loss,
                e.lr
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_steps() {
        let mut p = [1.0];
        let mut v = [0.0];
        sgd_update(&mut p, &[0.0], &mut v, 0.1, 0.9, 0.0);
        assert_eq!(p, [1.0]);
        sgd_update(&mut p, &[1.0], &mut v, 0.1, 0.0, 0.0);
        assert!((p[0] - 0.9).abs() < 1e-15);

        let mut p = [0.0];
        let mut v = [0.0];
        sgd_update(&mut p, &[1.0], &mut v, 0.1, 0.9, 0.0);
        sgd_update(&mut p, &[1.0], &mut v, 0.1, 0.9, 0.0);
        assert!((p[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut p = [2.0];
        let mut v = [0.0];
        sgd_update(&mut p, &[0.0], &mut v, 0.1, 0.0, 0.5);
        assert!((p[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn lr_schedule() {
        let c = OptimConfig::new(0.1, vec![30, 60, 90], 100);
        assert_eq!(c.lr_at(0), 0.1);
        assert_eq!(c.lr_at(29), 0.1);
        assert!((c.lr_at(30) - 0.01).abs() < 1e-18);
        assert!((c.lr_at(99) - 1e-4).abs() < 1e-18);
        assert!(OptimConfig::new(0.1, vec![20, 10], 30).validate().is_err());
        assert!(OptimConfig::new(0.1, vec![30], 30).validate().is_err());
        assert!(OptimConfig { batch_size: 3, ..OptimConfig::desk_step1() }.validate().is_err());
    }

    #[test]
    fn batching_merges_short_tail() {
        let order: Vec<usize> = (0..10).collect();
        let b = batches(&order, 4);
        assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![4, 6]);
        let order: Vec<usize> = (0..12).collect();
        assert_eq!(batches(&order, 4).len(), 3);
        let order: Vec<usize> = (0..2).collect();
        assert_eq!(batches(&order, 4).len(), 1);
    }

    #[test]
    fn quality_table_csv_round_trip() {
        let t = QualityTable([(0u64, 0.25), (7, 0.9125), (3, 1e-3)].into_iter().collect());
        let text = t.to_csv();
        assert!(text.starts_with("sample_id,s\n0,0.25\n3,"));
        assert_eq!(QualityTable::from_csv("mem", &text).unwrap(), t);
        assert!(matches!(t.get(5), Err(Error::IncompleteQualityTable(5))));
    }

    #[test]
    fn step_labels() {
        let l = StepLabel { kind: StepKind::Step1, iteration: 1 };
        assert_eq!(l.to_string(), "step1");
        let l = StepLabel { kind: StepKind::Step3, iteration: 2 };
        assert_eq!(l.to_string(), "iter2.step3");
    }
}

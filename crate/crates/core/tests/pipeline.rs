//! Freeze discipline, step ordering, reductions and filtering of the
//! training pipeline on a small synthetic problem.

use std::collections::{BTreeMap, BTreeSet};

use eqface::loss::LossConfig;
use eqface::model::{self, Component, ModelDims, ModelParams};
use eqface::synthgen::{self, EmbeddingSample, GenConfig};
use eqface::trainer::{self, OptimConfig, PipelineConfig, QualityTable, StepKind, StepLabel};

fn data() -> Vec<EmbeddingSample> {
    let cfg = GenConfig { n_classes: 8, samples_per_class: 12, d_in: 10, d: 6, ..GenConfig::default() };
    synthgen::generate(&cfg).unwrap().samples
}

fn params() -> ModelParams {
    let mut dims = ModelDims::new(10, 6, 8);
    dims.hidden = 12;
    dims.q = 8;
    model::init(&dims, 5)
}

fn sched(lr0: f64, epochs: usize) -> OptimConfig {
    let mut o = OptimConfig::new(lr0, vec![epochs - 1], epochs);
    o.batch_size = 16;
    o
}

fn small_pipeline(iterations: usize) -> PipelineConfig {
    PipelineConfig {
        step1: sched(0.1, 3),
        step2: sched(0.01, 2),
        step3: sched(0.1, 2),
        iterations,
        ..PipelineConfig::default()
    }
}

fn tensor_names(p: &ModelParams, components: &[Component]) -> BTreeSet<String> {
    p.tensors().into_iter().filter(|t| components.contains(&t.component)).map(|t| t.name).collect()
}

#[test]
fn two_iterations_run_steps_in_order_and_touch_only_unfrozen_tensors() {
    let d = data();
    let p0 = params();
    let mut seen = Vec::new();
    let out = trainer::run_pipeline(&d, p0.clone(), &LossConfig::default(), &small_pipeline(2), &mut |l, _, _| {
        seen.push(*l);
        Ok(())
    })
    .unwrap();
    let expected = [
        StepLabel { kind: StepKind::Step1, iteration: 1 },
        StepLabel { kind: StepKind::Step2, iteration: 1 },
        StepLabel { kind: StepKind::Step3, iteration: 1 },
        StepLabel { kind: StepKind::Step2, iteration: 2 },
    ];
    assert_eq!(out.executed(), expected);
    assert_eq!(seen, expected);

    let bc = tensor_names(&p0, &[Component::Backbone, Component::Classifier]);
    let q = tensor_names(&p0, &[Component::Quality]);
    let mut prev = p0;
    for ((label, after), report) in out.checkpoints.iter().zip(&out.reports) {
        let want = if label.kind == StepKind::Step2 { &q } else { &bc };
        let changed: BTreeSet<String> = after.changed_tensors(&prev).into_iter().collect();
        assert_eq!(&changed, want, "{label}");
        assert_eq!(report.changed.iter().cloned().collect::<BTreeSet<_>>(), changed);
        prev = after.clone();
    }
    assert_eq!(out.quality_tables.len(), 1);
}

#[test]
fn single_iteration_is_step1_then_step2() {
    let out =
        trainer::run_pipeline(&data(), params(), &LossConfig::default(), &small_pipeline(1), &mut |_, _, _| Ok(()))
            .unwrap();
    let names: Vec<String> = out.executed().iter().map(ToString::to_string).collect();
    assert_eq!(names, ["step1", "iter1.step2"]);
}

#[test]
fn step3_with_unit_qualities_reproduces_step1() {
    let d = data();
    let variant = LossConfig::default().build().unwrap();
    let sc = sched(0.1, 3);
    let mut a = params();
    trainer::run_step1(&d, &mut a, variant.as_ref(), &sc).unwrap();
    let ones = QualityTable(d.iter().map(|s| (s.sample_id, 1.0)).collect());
    let mut b = params();
    trainer::run_step3(&d, &mut b, &ones, variant.as_ref(), &sc, None, 1).unwrap();
    assert!(a.changed_tensors(&b).is_empty());
}

#[test]
fn qwdf_contributing_count_matches_table() {
    let d = data();
    let variant = LossConfig::default().build().unwrap();
    let table = QualityTable(
        d.iter()
            .enumerate()
            .map(|(i, s)| (s.sample_id, [0.05, 0.2, 0.199_999_999, 0.7, 0.9][i % 5]))
            .collect::<BTreeMap<_, _>>(),
    );
    let expected = table.0.values().filter(|&&s| s >= 0.2).count();
    let mut p = params();
    let r = trainer::run_step3(&d, &mut p, &table, variant.as_ref(), &sched(0.1, 3), Some(0.2), 1).unwrap();
    assert_eq!(r.epochs.len(), 3);
    for e in &r.epochs {
        assert_eq!(e.contributing, expected);
    }
    let all = trainer::run_step3(&d, &mut params(), &table, variant.as_ref(), &sched(0.1, 1), None, 1).unwrap();
    assert_eq!(all.epochs[0].contributing, d.len());
}

#[test]
fn missing_table_entry_is_an_error() {
    let d = data();
    let variant = LossConfig::default().build().unwrap();
    let table = QualityTable(d.iter().skip(1).map(|s| (s.sample_id, 0.5)).collect());
    let err = trainer::run_step3(&d, &mut params(), &table, variant.as_ref(), &sched(0.1, 1), None, 1).unwrap_err();
    assert!(matches!(err, eqface::Error::IncompleteQualityTable(_)));
}

#[test]
fn pipeline_is_deterministic() {
    let run = || {
        trainer::run_pipeline(&data(), params(), &LossConfig::default(), &small_pipeline(2), &mut |_, _, _| Ok(()))
            .unwrap()
    };
    let (a, b) = (run(), run());
    assert!(a.params.changed_tensors(&b.params).is_empty());
    assert_eq!(trainer::training_log_csv(&a.reports), trainer::training_log_csv(&b.reports));
}

#[test]
fn quality_head_only_leaves_backbone_and_classifier_untouched() {
    let d = data();
    let start = params();
    let out =
        trainer::run_quality_head_only(&d, start.clone(), &LossConfig::default(), &sched(0.01, 2), &mut |_, _, _| {
            Ok(())
        })
        .unwrap();
    let changed: BTreeSet<String> = out.params.changed_tensors(&start).into_iter().collect();
    assert_eq!(changed, tensor_names(&start, &[Component::Quality]));
}

#[test]
fn training_log_has_one_row_per_epoch() {
    let out =
        trainer::run_pipeline(&data(), params(), &LossConfig::default(), &small_pipeline(2), &mut |_, _, _| Ok(()))
            .unwrap();
    let log = trainer::training_log_csv(&out.reports);
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("step,iteration,epoch,mean_loss,lr"));
    assert_eq!(lines.count(), 3 + 2 + 2 + 2);
}

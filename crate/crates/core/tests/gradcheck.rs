//! Central finite differences against the analytic gradients of the loss and
//! of the full model (backbone, quality head with batch norm, classifier).

mod common;

use common::gradcheck::{rel_err, suite_instance, H, REL_TOL};
use eqface::loss::{self, LossConfig};
use eqface::model::{self, Component, Mode, ModelDims, ModelParams, QualityRouting};
use eqface::seeding;
use rand::Rng;
use rand_distr::StandardNormal;

#[test]
fn eqface_loss_gradients_match_finite_differences() {
    for i in 0..100u64 {
        let e = suite_instance(i);
        assert!(e < REL_TOL, "instance {i}: relative error {e:e}");
    }
}

fn batch(params: &ModelParams, seed: u64, b: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let dims = params.dims();
    let mut rng = seeding::rng(seed);
    let xs = (0..b).map(|_| (0..dims.d_in).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).collect();
    let ys = (0..b).map(|_| rng.random_range(0..dims.n_classes)).collect();
    (xs, ys)
}

fn batch_loss(params: &ModelParams, xs: &[Vec<f64>], ys: &[usize], routing: QualityRouting, cfg: &LossConfig) -> f64 {
    let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let fwd = model::forward_batch(params, &refs, Mode::Train).unwrap();
    let w = params.classifier.normalized().unwrap();
    let total: f64 = fwd
        .results
        .iter()
        .zip(ys)
        .map(|(r, &y)| {
            let s = if routing == QualityRouting::Live { r.s } else { 1.0 };
            loss::loss_eqface(&r.f, &w, y, s, cfg).unwrap().value
        })
        .sum();
    total / xs.len() as f64
}

fn model_worst_error(params: &mut ModelParams, component: Component, routing: QualityRouting, b: usize) -> f64 {
    let cfg = LossConfig { scale: 16.0, ..LossConfig::default() };
    let (xs, ys) = batch(params, 99, b);
    let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    for c in Component::ALL {
        if c == component {
            params.unfreeze(c);
        } else {
            params.freeze(c);
        }
    }
    let fwd = model::forward_batch(params, &refs, Mode::Train).unwrap();
    let w = params.classifier.normalized().unwrap();
    let losses: Vec<_> = fwd
        .results
        .iter()
        .zip(&ys)
        .map(|(r, &y)| {
            let s = if routing == QualityRouting::Live { r.s } else { 1.0 };
            loss::loss_eqface(&r.f, &w, y, s, &cfg).unwrap()
        })
        .collect();
    let grads = model::backward_batch(params, &fwd, &losses, routing).unwrap();
    let g = grads.get(component).expect("component is trainable").clone();
    let sizes = params.trainable_sizes(component);
    let mut worst: f64 = 0.0;
    for (t, &len) in sizes.iter().enumerate() {
        for k in (0..len).step_by(len.div_ceil(12).max(1)) {
            let orig = params.trainable_mut(component)[t][k];
            params.trainable_mut(component)[t][k] = orig + H;
            let lp = batch_loss(params, &xs, &ys, routing, &cfg);
            params.trainable_mut(component)[t][k] = orig - H;
            let lm = batch_loss(params, &xs, &ys, routing, &cfg);
            params.trainable_mut(component)[t][k] = orig;
            worst = worst.max(rel_err(g[t][k], (lp - lm) / (2.0 * H)));
        }
    }
    worst
}

#[test]
fn model_gradients_match_finite_differences() {
    let dims = ModelDims { d_in: 6, hidden: 8, d: 5, q: 4, n_classes: 4 };
    let mut params = model::init(&dims, 17);
    for (c, routing) in [
        (Component::Backbone, QualityRouting::FixedOne),
        (Component::Classifier, QualityRouting::FixedOne),
        (Component::Quality, QualityRouting::Live),
    ] {
        for b in [4, 7] {
            let e = model_worst_error(&mut params, c, routing, b);
            assert!(e < REL_TOL, "{c} with batch {b}: relative error {e:e}");
        }
    }
}

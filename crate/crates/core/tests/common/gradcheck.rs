//! Finite-difference checks of the EQFace loss against its analytic gradients.

use eqface::linalg::{self, Mat};
use eqface::loss::{self, LossConfig};
use eqface::seeding;
use rand::Rng;
use rand_distr::StandardNormal;

pub const H: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

/// Gradients below this magnitude are compared on absolute error instead:
/// central differences of an O(10^2) loss carry roundoff near 1e-9.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn unit<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    linalg::l2_normalize(&g).unwrap()
}

pub struct Instance {
    pub f: Vec<f64>,
    pub w: Mat,
    pub y: usize,
    pub s: f64,
    pub cfg: LossConfig,
}

pub fn instance(seed: u64, paper: bool) -> Instance {
    let mut rng = seeding::rng(seed);
    let d = rng.random_range(2..=16);
    let n = rng.random_range(2..=10);
    let f = unit(&mut rng, d);
    let mut w = Mat::zeros(d, n);
    for c in 0..n {
        for (r, v) in unit(&mut rng, d).into_iter().enumerate() {
            w.set(r, c, v);
        }
    }
    let cfg = if paper {
        LossConfig::default()
    } else {
        LossConfig {
            m1: rng.random_range(0.8..1.2),
            m2: rng.random_range(0.0..0.5),
            m3: rng.random_range(0.0..0.35),
            scale: rng.random_range(1.0..64.0),
            ..LossConfig::default()
        }
    };
    Instance { f, w, y: rng.random_range(0..n), s: rng.random_range(0.05..=1.0), cfg }
}

fn value(inst: &Instance, f: &[f64], w: &Mat, s: f64) -> f64 {
    loss::loss_eqface(f, w, inst.y, s, &inst.cfg).unwrap().value
}

/// Worst relative error over every coordinate of f, W and s.
pub fn check_instance(inst: &Instance) -> f64 {
    let out = loss::loss_eqface(&inst.f, &inst.w, inst.y, inst.s, &inst.cfg).unwrap();
    let gw = out.grad_w();
    let mut worst: f64 = 0.0;
    for k in 0..inst.f.len() {
        let (mut p, mut m) = (inst.f.clone(), inst.f.clone());
        p[k] += H;
        m[k] -= H;
        let num = (value(inst, &p, &inst.w, inst.s) - value(inst, &m, &inst.w, inst.s)) / (2.0 * H);
        worst = worst.max(rel_err(out.grad_f[k], num));
    }
    for r in 0..inst.w.rows() {
        for c in 0..inst.w.cols() {
            let (mut p, mut m) = (inst.w.clone(), inst.w.clone());
            p.set(r, c, p.get(r, c) + H);
            m.set(r, c, m.get(r, c) - H);
            let num = (value(inst, &inst.f, &p, inst.s) - value(inst, &inst.f, &m, inst.s)) / (2.0 * H);
            worst = worst.max(rel_err(gw.get(r, c), num));
        }
    }
    let (sp, sm) = ((inst.s + H).min(1.0), inst.s - H);
    let num = (value(inst, &inst.f, &inst.w, sp) - value(inst, &inst.f, &inst.w, sm)) / (sp - sm);
    worst.max(rel_err(out.grad_s, num))
}

/// Worst error of instance `i` of the fixed 100-instance suite; the first
/// ten use the default loss configuration.
pub fn suite_instance(i: u64) -> f64 {
    check_instance(&instance(seeding::mix(2024, i), i < 10))
}

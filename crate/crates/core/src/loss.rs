//! Normalized-softmax classification losses and their analytic gradients.
//!
//! Every variant is a rule that turns the cosines `cos θ_j = W_j · f` (and an
//! optional per-sample quality `s`) into logits; the cross-entropy on top of
//! them is shared. Variants are registered by name in [`LossRegistry`] and
//! selected at runtime from a [`LossConfig`].

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};

/// Cosines are clamped to `[-1 + CLAMP, 1 - CLAMP]` before `acos`.
pub const COS_CLAMP: f64 = 1e-7;

/// A logit and its partial derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Logit {
    pub value: f64,
    pub d_cos: f64,
    pub d_quality: f64,
}

pub trait LossVariant: Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether the per-sample quality enters the logits.
    fn uses_quality(&self) -> bool {
        false
    }

    fn check_quality(&self, _s: f64) -> Result<()> {
        Ok(())
    }

    fn target_logit(&self, cos: f64, s: f64) -> Logit;

    fn other_logit(&self, cos: f64, s: f64) -> Logit;
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad_logits: Vec<f64>,
    /// dL/dcos_j for every class column.
    pub grad_cos: Vec<f64>,
    pub grad_f: Vec<f64>,
    pub grad_s: f64,
    /// The feature the loss was evaluated at; column gradients are `grad_cos[j] * f`.
    f: Vec<f64>,
}

impl LossOutput {
    /// Gradient with respect to each classifier column that receives one.
    pub fn grad_w_cols(&self) -> Vec<(usize, Vec<f64>)> {
        self.grad_cos
            .iter()
            .enumerate()
            .filter(|(_, g)| **g != 0.0)
            .map(|(j, g)| (j, linalg::scale(&self.f, *g)))
            .collect()
    }

    /// Dense `d x n` gradient with respect to the classifier matrix.
    pub fn grad_w(&self) -> Mat {
        let mut m = Mat::zeros(self.f.len(), self.grad_cos.len());
        m.add_outer(1.0, &self.f, &self.grad_cos);
        m
    }
}

/// Angle of the clamped cosine and `d cos(θ + m) / d cos θ`.
fn angular_margin(cos: f64, margin: f64) -> (f64, f64) {
    let lo = -1.0 + COS_CLAMP;
    let hi = 1.0 - COS_CLAMP;
    let c = cos.clamp(lo, hi);
    let theta = c.acos();
    let value = (theta + margin).cos();
    let slope = if cos < lo || cos > hi { 0.0 } else { (theta + margin).sin() / theta.sin() };
    (value, slope)
}

/// Plain softmax on the raw cosines, bias fixed to zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct Softmax;

impl LossVariant for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn target_logit(&self, cos: f64, s: f64) -> Logit {
        self.other_logit(cos, s)
    }

    fn other_logit(&self, cos: f64, _s: f64) -> Logit {
        Logit { value: cos, d_cos: 1.0, d_quality: 0.0 }
    }
}

/// Additive angular margin on the target class with a fixed scale.
#[derive(Debug, Clone, Copy)]
pub struct ArcMargin {
    pub scale: f64,
    pub margin: f64,
}

impl LossVariant for ArcMargin {
    fn name(&self) -> &'static str {
        "arc"
    }

    fn target_logit(&self, cos: f64, _s: f64) -> Logit {
        let (v, dv) = angular_margin(cos, self.margin);
        Logit { value: self.scale * v, d_cos: self.scale * dv, d_quality: 0.0 }
    }

    fn other_logit(&self, cos: f64, _s: f64) -> Logit {
        Logit { value: self.scale * cos, d_cos: self.scale, d_quality: 0.0 }
    }
}

/// Combined multiplicative, additive-angle and additive-cosine margins:
/// target logit `S (m1 cos(θ + m2) - m3)`.
#[derive(Debug, Clone, Copy)]
pub struct UnifiedMargin {
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub scale: f64,
}

impl UnifiedMargin {
    fn margin_cos(&self, cos: f64) -> (f64, f64) {
        let (v, dv) = angular_margin(cos, self.m2);
        (self.m1 * v - self.m3, self.m1 * dv)
    }
}

impl LossVariant for UnifiedMargin {
    fn name(&self) -> &'static str {
        "unified"
    }

    fn target_logit(&self, cos: f64, _s: f64) -> Logit {
        let (v, dv) = self.margin_cos(cos);
        Logit { value: self.scale * v, d_cos: self.scale * dv, d_quality: 0.0 }
    }

    fn other_logit(&self, cos: f64, _s: f64) -> Logit {
        Logit { value: self.scale * cos, d_cos: self.scale, d_quality: 0.0 }
    }
}

/// Per-sample unbounded confidence in front of the logits with a single
/// additive margin on the target: `s cos θ_y - m`.
#[derive(Debug, Clone, Copy)]
pub struct ConfidenceAware {
    pub margin: f64,
}

impl LossVariant for ConfidenceAware {
    fn name(&self) -> &'static str {
        "confidence_aware"
    }

    fn uses_quality(&self) -> bool {
        true
    }

    fn check_quality(&self, s: f64) -> Result<()> {
        if s > 0.0 && s.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidQuality(s))
        }
    }

    fn target_logit(&self, cos: f64, s: f64) -> Logit {
        Logit { value: s * cos - self.margin, d_cos: s, d_quality: cos }
    }

    fn other_logit(&self, cos: f64, s: f64) -> Logit {
        Logit { value: s * cos, d_cos: s, d_quality: cos }
    }
}

/// The unified margin logits, all multiplied by a bounded quality `s`.
#[derive(Debug, Clone, Copy)]
pub struct QualityWeighted {
    pub inner: UnifiedMargin,
}

impl LossVariant for QualityWeighted {
    fn name(&self) -> &'static str {
        "eqface"
    }

    fn uses_quality(&self) -> bool {
        true
    }

    /// `s = 1` is accepted: it is the fixed quality of the first training step.
    fn check_quality(&self, s: f64) -> Result<()> {
        if s > 0.0 && s <= 1.0 {
            Ok(())
        } else {
            Err(Error::InvalidQuality(s))
        }
    }

    fn target_logit(&self, cos: f64, s: f64) -> Logit {
        let (v, dv) = self.inner.margin_cos(cos);
        let base = self.inner.scale * v;
        Logit { value: s * base, d_cos: s * self.inner.scale * dv, d_quality: base }
    }

    fn other_logit(&self, cos: f64, s: f64) -> Logit {
        let base = self.inner.scale * cos;
        Logit { value: s * base, d_cos: s * self.inner.scale, d_quality: base }
    }
}

/// Cross-entropy of the variant's logits for one sample.
///
/// `w` is `d x n` with unit columns; `f` is the unit feature.
pub fn evaluate(variant: &dyn LossVariant, f: &[f64], w: &Mat, y: usize, s: f64) -> Result<LossOutput> {
    if w.rows() != f.len() {
        return Err(Error::DimensionMismatch { expected: w.rows(), got: f.len() });
    }
    let n = w.cols();
    if y >= n {
        return Err(Error::DimensionMismatch { expected: n, got: y + 1 });
    }
    variant.check_quality(s)?;

    let cos = w.matvec_transposed_unchecked(f);
    let logits: Vec<Logit> = cos
        .iter()
        .enumerate()
        .map(|(j, &c)| if j == y { variant.target_logit(c, s) } else { variant.other_logit(c, s) })
        .collect();
    let z_max = logits.iter().map(|l| l.value).fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for l in &logits {
        sum += (l.value - z_max).exp();
    }
    let lse = z_max + sum.ln();
    let value = (lse - logits[y].value).max(0.0);

    let grad_logits: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(j, l)| {
            let p = (l.value - lse).exp();
            if j == y {
                p - 1.0
            } else {
                p
            }
        })
        .collect();
    let grad_cos: Vec<f64> = grad_logits.iter().zip(&logits).map(|(g, l)| g * l.d_cos).collect();
    let mut grad_s = 0.0;
    for (g, l) in grad_logits.iter().zip(&logits) {
        grad_s += g * l.d_quality;
    }
    let grad_f = w.matvec_unchecked(&grad_cos);
    Ok(LossOutput { value, grad_logits, grad_cos, grad_f, grad_s, f: f.to_vec() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub variant: String,
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub scale: f64,
    /// Single margin of the confidence-aware variant.
    pub m: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { variant: "eqface".into(), m1: 1.0, m2: 0.3, m3: 0.2, scale: 64.0, m: 0.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.scale > 0.0) {
            return bad(format!("scale S must be > 0, got {}", self.scale));
        }
        if !(self.m1 > 0.0) {
            return bad(format!("m1 must be > 0, got {}", self.m1));
        }
        if !(0.0..FRAC_PI_2).contains(&self.m2) {
            return bad(format!("m2 must lie in [0, pi/2), got {}", self.m2));
        }
        if !(self.m3 >= 0.0) {
            return bad(format!("m3 must be >= 0, got {}", self.m3));
        }
        Ok(())
    }

    pub fn unified(&self) -> UnifiedMargin {
        UnifiedMargin { m1: self.m1, m2: self.m2, m3: self.m3, scale: self.scale }
    }

    pub fn build(&self) -> Result<Box<dyn LossVariant>> {
        self.validate()?;
        LossRegistry::default().build(self)
    }
}

type Builder = fn(&LossConfig) -> Box<dyn LossVariant>;

/// Name → constructor table for the loss variants.
pub struct LossRegistry {
    builders: BTreeMap<&'static str, Builder>,
}

impl Default for LossRegistry {
    fn default() -> Self {
        let mut r = LossRegistry { builders: BTreeMap::new() };
        r.register("softmax", |_| Box::new(Softmax));
        r.register("arc", |c| Box::new(ArcMargin { scale: c.scale, margin: c.m2 }));
        r.register("unified", |c| Box::new(c.unified()));
        r.register("confidence_aware", |c| Box::new(ConfidenceAware { margin: c.m }));
        r.register("eqface", |c| Box::new(QualityWeighted { inner: c.unified() }));
        r
    }
}

impl LossRegistry {
    pub fn register(&mut self, name: &'static str, builder: Builder) {
        self.builders.insert(name, builder);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.builders.keys().copied().collect()
    }

    pub fn build(&self, cfg: &LossConfig) -> Result<Box<dyn LossVariant>> {
        let b = self
            .builders
            .get(cfg.variant.as_str())
            .ok_or_else(|| Error::UnknownStrategy { kind: "loss", name: cfg.variant.clone() })?;
        Ok(b(cfg))
    }
}

pub fn loss_softmax(f: &[f64], w: &Mat, y: usize) -> Result<LossOutput> {
    evaluate(&Softmax, f, w, y, 1.0)
}

pub fn loss_arc(f: &[f64], w: &Mat, y: usize, scale: f64, margin: f64) -> Result<LossOutput> {
    evaluate(&ArcMargin { scale, margin }, f, w, y, 1.0)
}

pub fn loss_unified(f: &[f64], w: &Mat, y: usize, cfg: &LossConfig) -> Result<LossOutput> {
    evaluate(&cfg.unified(), f, w, y, 1.0)
}

pub fn loss_confidence_aware(f: &[f64], w: &Mat, y: usize, s: f64, margin: f64) -> Result<LossOutput> {
    evaluate(&ConfidenceAware { margin }, f, w, y, s)
}

pub fn loss_eqface(f: &[f64], w: &Mat, y: usize, s: f64, cfg: &LossConfig) -> Result<LossOutput> {
    evaluate(&QualityWeighted { inner: cfg.unified() }, f, w, y, s)
}

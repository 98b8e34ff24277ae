//! Two-branch network: an MLP backbone producing the embedding and a small
//! quality head (FC → BN → ReLU → FC → sigmoid) reading the backbone's
//! pre-normalization output.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::loss::LossOutput;
use crate::seeding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Component {
    Backbone,
    Quality,
    Classifier,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Backbone, Component::Quality, Component::Classifier];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Backbone => "backbone",
            Component::Quality => "quality",
            Component::Classifier => "classifier",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub d_in: usize,
    pub hidden: usize,
    pub d: usize,
    pub q: usize,
    pub n_classes: usize,
}

impl ModelDims {
    /// Default hidden width 64 and quality width `d / 4`.
    pub fn new(d_in: usize, d: usize, n_classes: usize) -> Self {
        ModelDims { d_in, hidden: 64, d, q: (d / 4).max(1), n_classes }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out x in`
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl Dense {
    fn init<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Dense {
        let std = 1.0 / (fan_in as f64).sqrt();
        let values = (0..fan_in * fan_out).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        Dense { weight: Mat::from_vec(fan_out, fan_in, values).expect("sized"), bias: vec![0.0; fan_out] }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.weight.matvec_unchecked(x);
        for (yi, b) in y.iter_mut().zip(&self.bias) {
            *yi += b;
        }
        y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// running = momentum * running + (1 - momentum) * batch
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    fn new(width: usize) -> BatchNorm {
        BatchNorm {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    /// Folds a batch's mean and (unbiased) variance into the running statistics.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for i in 0..self.running_mean.len() {
            self.running_mean[i] = m * self.running_mean[i] + (1.0 - m) * stats.mean[i];
            self.running_var[i] = m * self.running_var[i] + (1.0 - m) * stats.unbiased_var[i];
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance, used for normalization.
    pub var: Vec<f64>,
    pub unbiased_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityBranch {
    pub fc1: Dense,
    pub bn: BatchNorm,
    /// `1 x q`
    pub fc2: Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    /// `d x n`, one column per class; columns are normalized at use time.
    pub weight: Mat,
}

impl Classifier {
    pub fn normalized(&self) -> Result<Mat> {
        let mut w = self.weight.clone();
        for c in 0..w.cols() {
            let col = linalg::l2_normalize(&w.column(c))?;
            for (r, v) in col.into_iter().enumerate() {
                w.set(r, c, v);
            }
        }
        Ok(w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FrozenSet {
    pub backbone: bool,
    pub quality: bool,
    pub classifier: bool,
}

impl FrozenSet {
    pub fn is_frozen(&self, c: Component) -> bool {
        match c {
            Component::Backbone => self.backbone,
            Component::Quality => self.quality,
            Component::Classifier => self.classifier,
        }
    }

    fn slot(&mut self, c: Component) -> &mut bool {
        match c {
            Component::Backbone => &mut self.backbone,
            Component::Quality => &mut self.quality,
            Component::Classifier => &mut self.classifier,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Weight,
    Bias,
    BnScale,
    BnShift,
    BnRunningMean,
    BnRunningVar,
}

impl TensorRole {
    pub fn as_str(self) -> &'static str {
        match self {
            TensorRole::Weight => "weight",
            TensorRole::Bias => "bias",
            TensorRole::BnScale => "bn_scale",
            TensorRole::BnShift => "bn_shift",
            TensorRole::BnRunningMean => "bn_running_mean",
            TensorRole::BnRunningVar => "bn_running_var",
        }
    }

    pub fn parse(s: &str) -> Option<TensorRole> {
        Some(match s {
            "weight" => TensorRole::Weight,
            "bias" => TensorRole::Bias,
            "bn_scale" => TensorRole::BnScale,
            "bn_shift" => TensorRole::BnShift,
            "bn_running_mean" => TensorRole::BnRunningMean,
            "bn_running_var" => TensorRole::BnRunningVar,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TensorView<'a> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub role: TensorRole,
    pub component: Component,
    pub values: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Layers chain `d_in → hidden → d` with ReLU between them.
    pub backbone: Vec<Dense>,
    pub quality: QualityBranch,
    pub classifier: Classifier,
    pub frozen: FrozenSet,
}

pub fn init(dims: &ModelDims, seed: u64) -> ModelParams {
    let mut rng = seeding::rng(seed);
    let backbone = vec![Dense::init(&mut rng, dims.d_in, dims.hidden), Dense::init(&mut rng, dims.hidden, dims.d)];
    let quality = QualityBranch {
        fc1: Dense::init(&mut rng, dims.d, dims.q),
        bn: BatchNorm::new(dims.q),
        fc2: Dense::init(&mut rng, dims.q, 1),
    };
    let mut weight = Mat::zeros(dims.d, dims.n_classes);
    for c in 0..dims.n_classes {
        let col: Vec<f64> = loop {
            let g: Vec<f64> = (0..dims.d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            if let Ok(v) = linalg::l2_normalize(&g) {
                break v;
            }
        };
        for (r, v) in col.into_iter().enumerate() {
            weight.set(r, c, v);
        }
    }
    ModelParams { backbone, quality, classifier: Classifier { weight }, frozen: FrozenSet::default() }
}

impl ModelParams {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            d_in: self.backbone[0].weight.cols(),
            hidden: self.backbone[0].weight.rows(),
            d: self.backbone.last().expect("non-empty backbone").weight.rows(),
            q: self.quality.fc1.weight.rows(),
            n_classes: self.classifier.weight.cols(),
        }
    }

    pub fn freeze(&mut self, c: Component) {
        *self.frozen.slot(c) = true;
    }

    pub fn unfreeze(&mut self, c: Component) {
        *self.frozen.slot(c) = false;
    }

    pub fn is_frozen(&self, c: Component) -> bool {
        self.frozen.is_frozen(c)
    }

    /// Every stored tensor, in checkpoint order.
    pub fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut out = Vec::new();
        for (i, l) in self.backbone.iter().enumerate() {
            dense_views(&mut out, format!("backbone.{i}"), Component::Backbone, l);
        }
        let q = &self.quality;
        dense_views(&mut out, "quality.fc1".into(), Component::Quality, &q.fc1);
        let bn_tensors: [(&str, TensorRole, &Vec<f64>); 4] = [
            ("quality.bn.gamma", TensorRole::BnScale, &q.bn.gamma),
            ("quality.bn.beta", TensorRole::BnShift, &q.bn.beta),
            ("quality.bn.running_mean", TensorRole::BnRunningMean, &q.bn.running_mean),
            ("quality.bn.running_var", TensorRole::BnRunningVar, &q.bn.running_var),
        ];
        for (name, role, v) in bn_tensors {
            out.push(TensorView {
                name: name.into(),
                rows: 1,
                cols: v.len(),
                role,
                component: Component::Quality,
                values: v,
            });
        }
        dense_views(&mut out, "quality.fc2".into(), Component::Quality, &q.fc2);
        out.push(TensorView {
            name: "classifier.weight".into(),
            rows: self.classifier.weight.rows(),
            cols: self.classifier.weight.cols(),
            role: TensorRole::Weight,
            component: Component::Classifier,
            values: self.classifier.weight.values(),
        });
        out
    }

    /// Optimizer-visible tensors of one component, in a fixed order matching
    /// [`Gradients`]. Batch-norm running statistics are state, not parameters.
    pub fn trainable_mut(&mut self, c: Component) -> Vec<&mut [f64]> {
        match c {
            Component::Backbone => {
                self.backbone.iter_mut().flat_map(|l| [l.weight.values_mut(), l.bias.as_mut_slice()]).collect()
            }
            Component::Quality => {
                let q = &mut self.quality;
                vec![
                    q.fc1.weight.values_mut(),
                    q.fc1.bias.as_mut_slice(),
                    q.bn.gamma.as_mut_slice(),
                    q.bn.beta.as_mut_slice(),
                    q.fc2.weight.values_mut(),
                    q.fc2.bias.as_mut_slice(),
                ]
            }
            Component::Classifier => vec![self.classifier.weight.values_mut()],
        }
    }

    pub fn trainable_sizes(&self, c: Component) -> Vec<usize> {
        let mut p = self.clone();
        p.trainable_mut(c).iter().map(|t| t.len()).collect()
    }

    /// Total number of scalar parameters whose bits differ from `other`, per tensor name.
    pub fn changed_tensors(&self, other: &ModelParams) -> Vec<String> {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .filter(|(a, b)| a.values.iter().zip(b.values).any(|(x, y)| x.to_bits() != y.to_bits()))
            .map(|(a, _)| a.name.clone())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.values.iter().all(|v| v.is_finite()))
    }
}

fn dense_views<'a>(out: &mut Vec<TensorView<'a>>, prefix: String, c: Component, l: &'a Dense) {
    out.push(TensorView {
        name: format!("{prefix}.weight"),
        rows: l.weight.rows(),
        cols: l.weight.cols(),
        role: TensorRole::Weight,
        component: c,
        values: l.weight.values(),
    });
    out.push(TensorView {
        name: format!("{prefix}.bias"),
        rows: 1,
        cols: l.bias.len(),
        role: TensorRole::Bias,
        component: c,
        values: &l.bias,
    });
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleCache {
    /// Input of every backbone layer (first entry is `x`).
    pub inputs: Vec<Vec<f64>>,
    /// Pre-activation of every backbone layer (last entry is `f_raw`).
    pub pre: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    pub f_raw: Vec<f64>,
    pub f: Vec<f64>,
    pub raw_norm: f64,
    pub s: f64,
    pub cache: Option<SampleCache>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityCache {
    pub mode: Mode,
    /// fc1 output per sample
    pub z: Vec<Vec<f64>>,
    pub xhat: Vec<Vec<f64>>,
    /// post-ReLU activation per sample
    pub h: Vec<Vec<f64>>,
    /// `1 / sqrt(var + eps)` of the statistics used
    pub inv_std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchForward {
    pub results: Vec<ForwardResult>,
    pub quality: QualityCache,
    /// Present in train mode.
    pub stats: Option<BatchStats>,
}

fn relu(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

fn backbone_forward(params: &ModelParams, x: &[f64]) -> Result<(Vec<f64>, SampleCache)> {
    let d_in = params.backbone[0].weight.cols();
    if x.len() != d_in {
        return Err(Error::DimensionMismatch { expected: d_in, got: x.len() });
    }
    let mut inputs = Vec::with_capacity(params.backbone.len());
    let mut pre = Vec::with_capacity(params.backbone.len());
    let mut a = x.to_vec();
    let last = params.backbone.len() - 1;
    for (i, layer) in params.backbone.iter().enumerate() {
        let z = layer.forward(&a);
        inputs.push(a);
        a = z.clone();
        if i < last {
            relu(&mut a);
        }
        pre.push(z);
    }
    Ok((a, SampleCache { inputs, pre }))
}

/// Forward pass over a batch. In train mode the quality head normalizes with
/// batch statistics (returned in `stats`, not written into `params`); in eval
/// mode it uses the running statistics.
pub fn forward_batch(params: &ModelParams, xs: &[&[f64]], mode: Mode) -> Result<BatchForward> {
    if xs.is_empty() {
        return Err(Error::EmptyInput("forward batch"));
    }
    let mut results = Vec::with_capacity(xs.len());
    for x in xs {
        let (f_raw, cache) = backbone_forward(params, x)?;
        let raw_norm = linalg::norm(&f_raw);
        let f = linalg::l2_normalize(&f_raw)?;
        results.push(ForwardResult { f_raw, f, raw_norm, s: f64::NAN, cache: Some(cache) });
    }

    let qb = &params.quality;
    let q = qb.fc1.weight.rows();
    let z: Vec<Vec<f64>> = results.iter().map(|r| qb.fc1.forward(&r.f_raw)).collect();
    let (mean, var, stats) = match mode {
        Mode::Train => {
            let b = z.len() as f64;
            let mut mean = vec![0.0; q];
            for zi in &z {
                linalg::axpy_unchecked(1.0 / b, zi, &mut mean);
            }
            let mut var = vec![0.0; q];
            for zi in &z {
                for k in 0..q {
                    let dlt = zi[k] - mean[k];
                    var[k] += dlt * dlt / b;
                }
            }
            let unbiased_var = if z.len() > 1 { var.iter().map(|v| v * b / (b - 1.0)).collect() } else { var.clone() };
            (mean.clone(), var.clone(), Some(BatchStats { mean, var, unbiased_var }))
        }
        Mode::Eval => (qb.bn.running_mean.clone(), qb.bn.running_var.clone(), None),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + qb.bn.eps).sqrt()).collect();
    let mut xhat = Vec::with_capacity(z.len());
    let mut h = Vec::with_capacity(z.len());
    for (zi, r) in z.iter().zip(results.iter_mut()) {
        let xh: Vec<f64> = (0..q).map(|k| (zi[k] - mean[k]) * inv_std[k]).collect();
        let mut hi: Vec<f64> = (0..q).map(|k| qb.bn.gamma[k] * xh[k] + qb.bn.beta[k]).collect();
        relu(&mut hi);
        let u = qb.fc2.forward(&hi)[0];
        r.s = sigmoid(u);
        xhat.push(xh);
        h.push(hi);
    }
    Ok(BatchForward { results, quality: QualityCache { mode, z, xhat, h, inv_std }, stats })
}

/// Single-sample forward. Eval mode is the usual choice; train mode with a
/// batch of one normalizes against its own (zero-variance) statistics.
pub fn forward(params: &ModelParams, x: &[f64], mode: Mode) -> Result<ForwardResult> {
    let mut b = forward_batch(params, &[x], mode)?;
    Ok(b.results.pop().expect("one result"))
}

/// Where the per-sample quality used by the loss comes from, and therefore
/// where its gradient goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QualityRouting {
    /// `s = 1`; nothing reaches the quality head.
    FixedOne,
    /// `s` is the head's output; `grad_s` trains only the head.
    Live,
    /// `s` is a precomputed constant; nothing reaches the quality head.
    Frozen,
}

/// Gradients of the batch-mean loss, one flat buffer per trainable tensor in
/// [`ModelParams::trainable_mut`] order. `None` for components that receive none.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gradients {
    pub backbone: Option<Vec<Vec<f64>>>,
    pub quality: Option<Vec<Vec<f64>>>,
    pub classifier: Option<Vec<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, c: Component) -> Option<&Vec<Vec<f64>>> {
        match c {
            Component::Backbone => self.backbone.as_ref(),
            Component::Quality => self.quality.as_ref(),
            Component::Classifier => self.classifier.as_ref(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.backbone.is_none() && self.quality.is_none() && self.classifier.is_none()
    }
}

/// Back-propagates per-sample loss outputs (averaged over the batch) into the
/// parameters of every unfrozen component.
///
/// `w_hat` is the column-normalized classifier the losses were evaluated with.
pub fn backward_batch(
    params: &ModelParams,
    fwd: &BatchForward,
    losses: &[LossOutput],
    routing: QualityRouting,
) -> Result<Gradients> {
    if losses.len() != fwd.results.len() {
        return Err(Error::DimensionMismatch { expected: fwd.results.len(), got: losses.len() });
    }
    let inv_b = 1.0 / losses.len() as f64;
    let mut grads = Gradients::default();

    if !params.is_frozen(Component::Classifier) {
        let w = &params.classifier.weight;
        let (d, n) = (w.rows(), w.cols());
        let mut g_hat = Mat::zeros(d, n);
        for (r, l) in fwd.results.iter().zip(losses) {
            g_hat.add_outer(inv_b, &r.f, &l.grad_cos);
        }
        let mut g_raw = Mat::zeros(d, n);
        for c in 0..n {
            let col = w.column(c);
            let len = linalg::norm(&col);
            let w_hat: Vec<f64> = col.iter().map(|v| v / len).collect();
            let g = g_hat.column(c);
            let along = linalg::dot_unchecked(&w_hat, &g);
            for r in 0..d {
                g_raw.set(r, c, (g[r] - w_hat[r] * along) / len);
            }
        }
        grads.classifier = Some(vec![g_raw.values().to_vec()]);
    }

    if !params.is_frozen(Component::Backbone) {
        let mut layer_grads: Vec<(Mat, Vec<f64>)> = params
            .backbone
            .iter()
            .map(|l| (Mat::zeros(l.weight.rows(), l.weight.cols()), vec![0.0; l.bias.len()]))
            .collect();
        for (r, l) in fwd.results.iter().zip(losses) {
            let cache = r.cache.as_ref().ok_or(Error::MissingCache("backbone activations"))?;
            // tangent projection of the normalization Jacobian
            let along = linalg::dot_unchecked(&r.f, &l.grad_f);
            let mut delta: Vec<f64> =
                l.grad_f.iter().zip(&r.f).map(|(g, fi)| inv_b * (g - fi * along) / r.raw_norm).collect();
            for i in (0..params.backbone.len()).rev() {
                let (gw, gb) = &mut layer_grads[i];
                gw.add_outer(1.0, &delta, &cache.inputs[i]);
                linalg::axpy_unchecked(1.0, &delta, gb);
                if i > 0 {
                    let mut up = params.backbone[i].weight.matvec_transposed_unchecked(&delta);
                    for (u, z) in up.iter_mut().zip(&cache.pre[i - 1]) {
                        if *z <= 0.0 {
                            *u = 0.0;
                        }
                    }
                    delta = up;
                }
            }
        }
        grads.backbone = Some(layer_grads.into_iter().flat_map(|(w, b)| [w.values().to_vec(), b]).collect());
    }

    if routing == QualityRouting::Live && !params.is_frozen(Component::Quality) {
        grads.quality = Some(quality_backward(params, fwd, losses, inv_b));
    }
    Ok(grads)
}

fn quality_backward(params: &ModelParams, fwd: &BatchForward, losses: &[LossOutput], inv_b: f64) -> Vec<Vec<f64>> {
    let qb = &params.quality;
    let qc = &fwd.quality;
    let q = qb.fc1.weight.rows();
    let d = qb.fc1.weight.cols();
    let b = losses.len();

    let mut g_fc2_w = vec![0.0; q];
    let mut g_fc2_b = 0.0;
    let mut g_gamma = vec![0.0; q];
    let mut g_beta = vec![0.0; q];
    let mut g_xhat: Vec<Vec<f64>> = Vec::with_capacity(b);
    for i in 0..b {
        let s = fwd.results[i].s;
        let g_u = inv_b * losses[i].grad_s * s * (1.0 - s);
        linalg::axpy_unchecked(g_u, &qc.h[i], &mut g_fc2_w);
        g_fc2_b += g_u;
        let mut gx = vec![0.0; q];
        for k in 0..q {
            if qc.h[i][k] > 0.0 {
                let g_a = g_u * qb.fc2.weight.get(0, k);
                g_gamma[k] += g_a * qc.xhat[i][k];
                g_beta[k] += g_a;
                gx[k] = g_a * qb.bn.gamma[k];
            }
        }
        g_xhat.push(gx);
    }

    let g_z: Vec<Vec<f64>> = match qc.mode {
        Mode::Eval => g_xhat.iter().map(|gx| gx.iter().zip(&qc.inv_std).map(|(g, s)| g * s).collect()).collect(),
        Mode::Train => {
            let bf = b as f64;
            let mut sum_g = vec![0.0; q];
            let mut sum_gx = vec![0.0; q];
            for i in 0..b {
                for k in 0..q {
                    sum_g[k] += g_xhat[i][k];
                    sum_gx[k] += g_xhat[i][k] * qc.xhat[i][k];
                }
            }
            (0..b)
                .map(|i| {
                    (0..q)
                        .map(|k| qc.inv_std[k] / bf * (bf * g_xhat[i][k] - sum_g[k] - qc.xhat[i][k] * sum_gx[k]))
                        .collect()
                })
                .collect()
        }
    };

    let mut g_fc1_w = Mat::zeros(q, d);
    let mut g_fc1_b = vec![0.0; q];
    for (gz, r) in g_z.iter().zip(&fwd.results) {
        g_fc1_w.add_outer(1.0, gz, &r.f_raw);
        linalg::axpy_unchecked(1.0, gz, &mut g_fc1_b);
    }
    vec![g_fc1_w.values().to_vec(), g_fc1_b, g_gamma, g_beta, g_fc2_w, vec![g_fc2_b]]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ModelDims {
        ModelDims::new(12, 8, 5)
    }

    fn inputs(n: usize, d_in: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = seeding::rng(seed);
        (0..n).map(|_| (0..d_in).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).collect()
    }

    #[test]
    fn forward_contracts() {
        let p = init(&dims(), 3);
        for x in inputs(10, 12, 1) {
            for mode in [Mode::Eval, Mode::Train] {
                let r = forward(&p, &x, mode).unwrap();
                assert!((linalg::norm(&r.f) - 1.0).abs() < 1e-9);
                assert!(r.s > 0.0 && r.s < 1.0);
            }
        }
    }

    #[test]
    fn zeroed_head_outputs_half() {
        let mut p = init(&dims(), 3);
        p.quality.fc2.weight.values_mut().fill(0.0);
        p.quality.fc2.bias[0] = 0.0;
        for x in inputs(5, 12, 2) {
            assert_eq!(forward(&p, &x, Mode::Eval).unwrap().s, 0.5);
        }
    }

    #[test]
    fn init_is_seeded_and_standard() {
        assert_eq!(init(&dims(), 9), init(&dims(), 9));
        assert_ne!(init(&dims(), 9), init(&dims(), 10));
        let p = init(&dims(), 9);
        assert!(p.quality.bn.running_mean.iter().all(|v| *v == 0.0));
        assert!(p.quality.bn.running_var.iter().all(|v| *v == 1.0));
        assert!(p.quality.bn.gamma.iter().all(|v| *v == 1.0));
        assert!(p.backbone.iter().all(|l| l.bias.iter().all(|b| *b == 0.0)));
        for c in 0..5 {
            assert!((linalg::norm(&p.classifier.weight.column(c)) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fan_in_scaling_keeps_unit_preactivation_std() {
        // hidden pre-activations for a fixed unit-norm input across many seeds
        let d = ModelDims { d_in: 32, ..ModelDims::new(32, 16, 4) };
        let x = linalg::l2_normalize(&inputs(1, 32, 77)[0]).unwrap();
        let mut all = Vec::new();
        for seed in 0..1000 {
            let p = init(&d, seed);
            // scale by sqrt(fan_in) so the unit-norm input has unit-variance coordinates
            let xs: Vec<f64> = x.iter().map(|v| v * (32f64).sqrt()).collect();
            all.extend(p.backbone[0].forward(&xs));
        }
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64;
        let std = var.sqrt();
        assert!((0.5..=2.0).contains(&std), "std = {std}");
    }

    #[test]
    fn eval_forward_is_pure() {
        let p = init(&dims(), 4);
        let x = &inputs(1, 12, 5)[0];
        assert_eq!(forward(&p, x, Mode::Eval).unwrap(), forward(&p, x, Mode::Eval).unwrap());
    }

    #[test]
    fn frozen_everything_yields_no_gradients() {
        let mut p = init(&dims(), 4);
        for c in Component::ALL {
            p.freeze(c);
        }
        let xs = inputs(4, 12, 6);
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let fwd = forward_batch(&p, &refs, Mode::Train).unwrap();
        let w = p.classifier.normalized().unwrap();
        let losses: Vec<LossOutput> =
            fwd.results.iter().map(|r| crate::loss::loss_softmax(&r.f, &w, 0).unwrap()).collect();
        assert!(backward_batch(&p, &fwd, &losses, QualityRouting::Live).unwrap().is_empty());
    }

    #[test]
    fn missing_cache_is_reported() {
        let p = init(&dims(), 4);
        let xs = inputs(4, 12, 6);
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let mut fwd = forward_batch(&p, &refs, Mode::Train).unwrap();
        fwd.results[0].cache = None;
        let w = p.classifier.normalized().unwrap();
        let losses: Vec<LossOutput> =
            fwd.results.iter().map(|r| crate::loss::loss_softmax(&r.f, &w, 0).unwrap()).collect();
        assert!(matches!(backward_batch(&p, &fwd, &losses, QualityRouting::FixedOne), Err(Error::MissingCache(_))));
    }

    #[test]
    fn normalization_jacobian_is_tangent() {
        let p = init(&dims(), 4);
        let xs = inputs(1, 12, 8);
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let fwd = forward_batch(&p, &refs, Mode::Eval).unwrap();
        let r = &fwd.results[0];
        let g = vec![0.3, -1.0, 2.0, 0.1, 0.0, 0.5, -0.2, 0.7];
        let along = linalg::dot_unchecked(&r.f, &g);
        let proj: Vec<f64> = g.iter().zip(&r.f).map(|(gi, fi)| (gi - fi * along) / r.raw_norm).collect();
        assert!(linalg::dot_unchecked(&proj, &r.f).abs() < 1e-9);
    }

    #[test]
    fn running_stats_track_batch_statistics() {
        let mut p = init(&dims(), 4);
        let mut batch_means = Vec::new();
        let mut batch_vars = Vec::new();
        for step in 0..200 {
            let xs = inputs(32, 12, 1000 + step);
            let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
            let fwd = forward_batch(&p, &refs, Mode::Train).unwrap();
            let st = fwd.stats.unwrap();
            p.quality.bn.update_running(&st);
            batch_means.push(st.mean);
            batch_vars.push(st.var);
        }
        let q = p.quality.bn.gamma.len();
        for k in 0..q {
            let m = batch_means.iter().map(|v| v[k]).sum::<f64>() / 200.0;
            let v = batch_vars.iter().map(|v| v[k]).sum::<f64>() / 200.0;
            let rm = p.quality.bn.running_mean[k];
            let rv = p.quality.bn.running_var[k];
            assert!((rv - v).abs() <= 0.1 * v, "var {rv} vs {v}");
            // means near zero: compare on the scale of the spread
            assert!((rm - m).abs() <= 0.1 * v.sqrt(), "mean {rm} vs {m}");
        }
    }

    #[test]
    fn tensor_listing_is_complete() {
        let p = init(&dims(), 1);
        let names: Vec<String> = p.tensors().iter().map(|t| t.name.clone()).collect();
        assert_eq!(names.len(), 13);
        assert_eq!(names[0], "backbone.0.weight");
        assert_eq!(names[12], "classifier.weight");
        assert_eq!(p.trainable_sizes(Component::Quality), vec![2 * 8, 2, 2, 2, 2, 1]);
        let mut q = p.clone();
        q.classifier.weight.values_mut()[0] += 1.0;
        assert_eq!(p.changed_tensors(&q), vec!["classifier.weight".to_string()]);
    }
}

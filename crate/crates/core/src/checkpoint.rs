//! Plain-text model checkpoints.
//!
//! ```text
//! EQFACE-CKPT v1
//! meta bn_momentum=0.9 bn_eps=1e-5
//! frozen backbone=false quality=true classifier=false
//! tensor name=backbone.0.weight shape=64x32 role=weight component=backbone
//! <rows*cols space-separated values>
//! ...
//! ```
//!
//! Values use the shortest round-trip representation, so a load after a save
//! reproduces every bit. Each tensor's value line depends only on that tensor.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::{BatchNorm, Classifier, Component, Dense, FrozenSet, ModelParams, QualityBranch, TensorRole};

pub const MAGIC: &str = "EQFACE-CKPT v1";

pub fn to_string(params: &ModelParams) -> String {
    let mut out = String::new();
    let bn = &params.quality.bn;
    let _ = writeln!(out, "{MAGIC}");
    let _ = writeln!(out, "meta bn_momentum={:e} bn_eps={:e}", bn.momentum, bn.eps);
    let f = params.frozen;
    let _ = writeln!(out, "frozen backbone={} quality={} classifier={}", f.backbone, f.quality, f.classifier);
    for t in params.tensors() {
        let _ = writeln!(
            out,
            "tensor name={} shape={}x{} role={} component={}",
            t.name,
            t.rows,
            t.cols,
            t.role.as_str(),
            t.component.as_str()
        );
        let mut first = true;
        for v in t.values {
            if !first {
                out.push(' ');
            }
            first = false;
            let _ = write!(out, "{v:e}");
        }
        out.push('\n');
    }
    out
}

pub fn save(path: &Path, params: &ModelParams) -> Result<()> {
    fs::write(path, to_string(params))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let text = fs::read_to_string(path)?;
    from_str(&path.display().to_string(), &text)
}

struct Block {
    rows: usize,
    cols: usize,
    role: TensorRole,
    values: Vec<f64>,
}

fn attrs<'a>(loc: &str, line: &'a str, keyword: &str) -> Result<BTreeMap<&'a str, &'a str>> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(keyword) {
        return Err(Error::parse(loc, format!("expected `{keyword}` line")));
    }
    parts.map(|p| p.split_once('=').ok_or_else(|| Error::parse(loc, format!("malformed attribute `{p}`")))).collect()
}

fn attr<T: std::str::FromStr>(loc: &str, map: &BTreeMap<&str, &str>, key: &str) -> Result<T> {
    let raw = map.get(key).ok_or_else(|| Error::parse(loc, format!("missing attribute `{key}`")))?;
    raw.parse().map_err(|_| Error::parse(loc, format!("cannot parse {key}=`{raw}`")))
}

pub fn from_str(source: &str, text: &str) -> Result<ModelParams> {
    let lines: Vec<&str> = text.lines().collect();
    let loc = |i: usize| format!("{source}:{}", i + 1);
    if lines.first().map(|l| l.trim()) != Some(MAGIC) {
        return Err(Error::parse(loc(0), format!("missing `{MAGIC}` header")));
    }
    let meta = attrs(&loc(1), lines.get(1).copied().unwrap_or(""), "meta")?;
    let momentum: f64 = attr(&loc(1), &meta, "bn_momentum")?;
    let eps: f64 = attr(&loc(1), &meta, "bn_eps")?;
    let fr = attrs(&loc(2), lines.get(2).copied().unwrap_or(""), "frozen")?;
    let frozen = FrozenSet {
        backbone: attr(&loc(2), &fr, "backbone")?,
        quality: attr(&loc(2), &fr, "quality")?,
        classifier: attr(&loc(2), &fr, "classifier")?,
    };

    let mut blocks: BTreeMap<String, Block> = BTreeMap::new();
    let mut i = 3;
    while i < lines.len() {
        if lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        let head = attrs(&loc(i), lines[i], "tensor")?;
        let name: String = attr(&loc(i), &head, "name")?;
        let shape: String = attr(&loc(i), &head, "shape")?;
        let (rows, cols) = shape
            .split_once('x')
            .and_then(|(r, c)| Some((r.parse().ok()?, c.parse().ok()?)))
            .ok_or_else(|| Error::parse(loc(i), format!("bad shape `{shape}`")))?;
        let role_raw: String = attr(&loc(i), &head, "role")?;
        let role =
            TensorRole::parse(&role_raw).ok_or_else(|| Error::parse(loc(i), format!("unknown role `{role_raw}`")))?;
        let body = lines.get(i + 1).copied().unwrap_or("");
        let values = body
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|_| Error::parse(loc(i + 1), format!("cannot parse value `{v}`"))))
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != rows * cols {
            return Err(Error::ShapeMismatch { name, expected: rows * cols, got: values.len() });
        }
        if blocks.insert(name.clone(), Block { rows, cols, role, values }).is_some() {
            return Err(Error::parse(loc(i), format!("duplicate tensor `{name}`")));
        }
        i += 2;
    }

    let mut take = |name: &str, role: TensorRole| -> Result<Block> {
        let b = blocks.remove(name).ok_or_else(|| Error::parse(source, format!("missing tensor `{name}`")))?;
        if b.role != role {
            return Err(Error::parse(source, format!("tensor `{name}` has role {}", b.role.as_str())));
        }
        Ok(b)
    };
    let mut dense = |prefix: &str| -> Result<Dense> {
        let w = take(&format!("{prefix}.weight"), TensorRole::Weight)?;
        let b = take(&format!("{prefix}.bias"), TensorRole::Bias)?;
        if b.values.len() != w.rows {
            return Err(Error::ShapeMismatch { name: format!("{prefix}.bias"), expected: w.rows, got: b.values.len() });
        }
        Ok(Dense { weight: Mat::from_vec(w.rows, w.cols, w.values)?, bias: b.values })
    };
    let backbone = vec![dense("backbone.0")?, dense("backbone.1")?];
    let fc1 = dense("quality.fc1")?;
    let fc2 = dense("quality.fc2")?;
    let q = fc1.weight.rows();
    let mut vector = |name: &str, role: TensorRole| -> Result<Vec<f64>> {
        let b = take(name, role)?;
        if b.values.len() != q {
            return Err(Error::ShapeMismatch { name: name.into(), expected: q, got: b.values.len() });
        }
        Ok(b.values)
    };
    let bn = BatchNorm {
        gamma: vector("quality.bn.gamma", TensorRole::BnScale)?,
        beta: vector("quality.bn.beta", TensorRole::BnShift)?,
        running_mean: vector("quality.bn.running_mean", TensorRole::BnRunningMean)?,
        running_var: vector("quality.bn.running_var", TensorRole::BnRunningVar)?,
        momentum,
        eps,
    };
    let cw = take("classifier.weight", TensorRole::Weight)?;
    let classifier = Classifier { weight: Mat::from_vec(cw.rows, cw.cols, cw.values)? };
    if let Some(extra) = blocks.keys().next() {
        return Err(Error::parse(source, format!("unexpected tensor `{extra}`")));
    }

    let chain = [
        ("backbone.1.weight", backbone[1].weight.cols(), backbone[0].weight.rows()),
        ("quality.fc1.weight", fc1.weight.cols(), backbone[1].weight.rows()),
        ("quality.fc2.weight", fc2.weight.cols(), q),
        ("classifier.weight", classifier.weight.rows(), backbone[1].weight.rows()),
    ];
    for (name, got, expected) in chain {
        if got != expected {
            return Err(Error::ShapeMismatch { name: name.into(), expected, got });
        }
    }
    if fc2.weight.rows() != 1 {
        return Err(Error::ShapeMismatch { name: "quality.fc2.weight".into(), expected: 1, got: fc2.weight.rows() });
    }
    Ok(ModelParams { backbone, quality: QualityBranch { fc1, bn, fc2 }, classifier, frozen })
}

/// Value lines of one component's tensors, as written by [`to_string`].
pub fn component_lines(text: &str, component: Component) -> Vec<String> {
    let tag = format!("component={}", component.as_str());
    let lines: Vec<&str> = text.lines().collect();
    lines
        .iter()
        .enumerate()
        .filter(|(_, l)| l.starts_with("tensor ") && l.ends_with(&tag))
        .flat_map(|(i, l)| [l.to_string(), lines.get(i + 1).unwrap_or(&"").to_string()])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init, ModelDims};

    #[test]
    fn round_trip_is_bit_exact() {
        let mut p = init(&ModelDims::new(8, 4, 5), 3);
        p.quality.bn.running_var[0] = 0.1 + 0.2;
        p.backbone[0].weight.values_mut()[0] = f64::MIN_POSITIVE / 3.0;
        p.freeze(Component::Quality);
        let text = to_string(&p);
        let back = from_str("mem", &text).unwrap();
        assert_eq!(back, p);
        assert!(back.changed_tensors(&p).is_empty());
        assert_eq!(to_string(&back), text);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let p = init(&ModelDims::new(8, 4, 5), 3);
        let text = to_string(&p);
        assert!(from_str("mem", "nope\n").is_err());
        let truncated: String = text.lines().take(6).map(|l| format!("{l}\n")).collect();
        assert!(from_str("mem", &truncated).is_err());
        let bad = text.replacen("shape=64x8", "shape=64x9", 1);
        assert!(matches!(from_str("mem", &bad), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn component_lines_select_blocks() {
        let p = init(&ModelDims::new(8, 4, 5), 3);
        let text = to_string(&p);
        assert_eq!(component_lines(&text, Component::Backbone).len(), 8);
        assert_eq!(component_lines(&text, Component::Classifier).len(), 2);
    }
}

//! `key = value` run configuration shared by the subcommands.
//!
//! One entry per line, `#` starts a comment, later entries override earlier
//! ones. Unknown keys are rejected. Command-line overrides go through
//! [`RunConfig::set`] after the file is loaded, so they win.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::aggregate::AggregationParams;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::ModelDims;
use crate::seeding;
use crate::synthgen::{GenConfig, NoiseLevel, SplitConfig};
use crate::trainer::{OptimConfig, PipelineConfig, Step3Restart};

/// Environment variable consulted when no `seed` key is given.
pub const SEED_ENV: &str = "EQFACE_SEED";

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master seed; every other seed is derived from it"),
    ("data.n_classes", "number of identities"),
    ("data.samples_per_class", "samples per identity"),
    ("data.d_in", "input dimension"),
    ("data.d", "embedding dimension"),
    ("data.noise_levels", "sigma:fraction pairs, comma separated"),
    ("model.hidden", "backbone hidden width (64)"),
    ("model.q", "quality head hidden width (64)"),
    ("loss.variant", "softmax | arc | unified | confidence_aware | eqface"),
    ("loss.m1", "multiplicative margin (1.0)"),
    ("loss.m2", "additive angular margin (0.3)"),
    ("loss.m3", "additive cosine margin (0.2)"),
    ("loss.scale", "logit scale S (64)"),
    ("loss.m", "confidence-aware margin (0)"),
    ("train.iterations", "pipeline iterations (2)"),
    ("train.batch_size", "mini-batch size (16)"),
    ("train.momentum", "SGD momentum (0.9)"),
    ("train.weight_decay", "L2 weight decay (5e-4)"),
    ("train.step3_restart", "continue | scratch"),
    ("train.qwdf_threshold", "drop Step-3 samples with s below this; `none` disables"),
    ("train.step1.lr0", "Step-1 initial learning rate (0.1)"),
    ("train.step1.decay_epochs", "Step-1 decay epochs (10,20)"),
    ("train.step1.epochs", "Step-1 epochs (30)"),
    ("train.step2.lr0", "Step-2 initial learning rate (0.01)"),
    ("train.step2.decay_epochs", "Step-2 decay epochs (5,10)"),
    ("train.step2.epochs", "Step-2 epochs (15)"),
    ("train.step3.lr0", "Step-3 initial learning rate (0.1)"),
    ("train.step3.decay_epochs", "Step-3 decay epochs (10,20)"),
    ("train.step3.epochs", "Step-3 epochs (30)"),
    ("split.ref_ids", "gallery identities (300)"),
    ("split.ref_per_id", "reference samples per gallery identity (5)"),
    ("split.query_per_id", "query samples per identity (5)"),
    ("split.disturb_ids", "query-only disturbance identities (300)"),
    ("eval.mode", "none | mean | qwfa | qwfaf | progressive"),
    ("eval.f_th", "progressive similarity gate (0.5)"),
    ("eval.s_th", "quality gate (0.3)"),
    ("eval.far_targets", "FAR operating points (1e-4,1e-3,1e-2)"),
    ("eval.rank_n", "identification ranks (1,5)"),
    ("eval.max_frames", "cap on fused frames per identity; 0 means no cap"),
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    entries: BTreeMap<String, String>,
}

fn is_known(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
}

fn bad(msg: String) -> Error {
    Error::InvalidConfig(msg)
}

fn list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| bad(format!("`{key}`: cannot parse `{s}`"))))
        .collect()
}

impl RunConfig {
    pub fn parse(source: &str, text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| bad(format!("{source}:{}: expected `key = value`", i + 1)))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| bad(format!("{source}:{}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| bad(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::parse(&path.display().to_string(), &text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !is_known(key) {
            return Err(bad(format!("unknown key `{key}`")));
        }
        self.entries.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair.split_once('=').ok_or_else(|| bad(format!("override `{pair}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    /// Fills `seed` from the environment value when the key is absent.
    pub fn with_seed_fallback(mut self, env_seed: Option<String>) -> Result<RunConfig> {
        if !self.entries.contains_key("seed") {
            if let Some(s) = env_seed {
                self.set("seed", s.trim())?;
            }
        }
        Ok(self)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key).map(|v| v.parse().map_err(|_| bad(format!("`{key}`: cannot parse `{v}`")))).transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?.ok_or_else(|| bad(format!("missing required key `{key}`")))
    }

    pub fn require_all(&self, keys: &[&str]) -> Result<()> {
        match keys.iter().find(|k| !self.entries.contains_key(**k)) {
            Some(k) => Err(bad(format!("missing required key `{k}`"))),
            None => Ok(()),
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.require("seed")
    }

    pub fn gen_config(&self) -> Result<GenConfig> {
        self.require_all(&[
            "seed",
            "data.n_classes",
            "data.samples_per_class",
            "data.d_in",
            "data.d",
            "data.noise_levels",
        ])?;
        let noise_raw: String = self.require("data.noise_levels")?;
        let noise_levels = noise_raw
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|pair| {
                let (s, f) = pair
                    .split_once(':')
                    .ok_or_else(|| bad(format!("`data.noise_levels`: `{pair}` is not sigma:fraction")))?;
                let parse = |x: &str| {
                    x.trim().parse::<f64>().map_err(|_| bad(format!("`data.noise_levels`: cannot parse `{x}`")))
                };
                Ok(NoiseLevel { sigma: parse(s)?, fraction: parse(f)? })
            })
            .collect::<Result<Vec<_>>>()?;
        let cfg = GenConfig {
            n_classes: self.require("data.n_classes")?,
            samples_per_class: self.require("data.samples_per_class")?,
            d_in: self.require("data.d_in")?,
            d: self.require("data.d")?,
            noise_levels,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_dims(&self, d_in: usize, d: usize, n_classes: usize) -> Result<ModelDims> {
        let mut dims = ModelDims::new(d_in, d, n_classes);
        dims.hidden = self.get_or("model.hidden", 64)?;
        dims.q = self.get_or("model.q", 64)?;
        if dims.hidden == 0 || dims.q == 0 {
            return Err(bad("model.hidden and model.q must be positive".into()));
        }
        Ok(dims)
    }

    /// Seed for parameter initialization.
    pub fn init_seed(&self) -> Result<u64> {
        Ok(seeding::mix(self.seed()?, 1))
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        let d = LossConfig::default();
        let cfg = LossConfig {
            variant: self.get_or("loss.variant", d.variant)?,
            m1: self.get_or("loss.m1", d.m1)?,
            m2: self.get_or("loss.m2", d.m2)?,
            m3: self.get_or("loss.m3", d.m3)?,
            scale: self.get_or("loss.scale", d.scale)?,
            m: self.get_or("loss.m", d.m)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn optim(&self, step: &str, base: OptimConfig, seed_tag: u64) -> Result<OptimConfig> {
        let mut o = base;
        o.lr0 = self.get_or(&format!("train.{step}.lr0"), o.lr0)?;
        if let Some(raw) = self.raw(&format!("train.{step}.decay_epochs")) {
            o.decay_epochs = list(&format!("train.{step}.decay_epochs"), raw)?;
        }
        o.total_epochs = self.get_or(&format!("train.{step}.epochs"), o.total_epochs)?;
        o.batch_size = self.get_or("train.batch_size", 16)?;
        o.momentum = self.get_or("train.momentum", o.momentum)?;
        o.weight_decay = self.get_or("train.weight_decay", o.weight_decay)?;
        o.seed = seeding::mix(self.seed()?, seed_tag);
        Ok(o)
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig> {
        let restart = match self.raw("train.step3_restart").unwrap_or("continue") {
            "continue" => Step3Restart::Continue,
            "scratch" => Step3Restart::Scratch,
            other => return Err(bad(format!("`train.step3_restart`: expected continue or scratch, got `{other}`"))),
        };
        let qwdf_threshold = match self.raw("train.qwdf_threshold") {
            None | Some("none") => None,
            Some(_) => Some(self.require::<f64>("train.qwdf_threshold")?),
        };
        let cfg = PipelineConfig {
            step1: self.optim("step1", OptimConfig::desk_step1(), 2)?,
            step2: self.optim("step2", OptimConfig::desk_step2(), 3)?,
            step3: self.optim("step3", OptimConfig::desk_step1(), 4)?,
            iterations: self.get_or("train.iterations", 2)?,
            step3_restart: restart,
            qwdf_threshold,
            init_seed: seeding::mix(self.seed()?, 5),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn split_config(&self) -> Result<SplitConfig> {
        let d = SplitConfig::default();
        Ok(SplitConfig {
            n_ref_ids: self.get_or("split.ref_ids", d.n_ref_ids)?,
            n_ref_per_id: self.get_or("split.ref_per_id", d.n_ref_per_id)?,
            n_query_per_id: self.get_or("split.query_per_id", d.n_query_per_id)?,
            n_disturb_ids: self.get_or("split.disturb_ids", d.n_disturb_ids)?,
            seed: match self.get::<u64>("seed")? {
                Some(s) => seeding::mix(s, 6),
                None => d.seed,
            },
        })
    }

    pub fn eval_settings(&self) -> Result<EvalSettings> {
        let d = AggregationParams::default();
        let max_frames: usize = self.get_or("eval.max_frames", 0)?;
        let s = EvalSettings {
            mode: self.get_or("eval.mode", "none".to_string())?,
            params: AggregationParams {
                f_th: self.get_or("eval.f_th", d.f_th)?,
                s_th: self.get_or("eval.s_th", d.s_th)?,
            },
            far_targets: match self.raw("eval.far_targets") {
                Some(raw) => list("eval.far_targets", raw)?,
                None => vec![1e-4, 1e-3, 1e-2],
            },
            rank_n: match self.raw("eval.rank_n") {
                Some(raw) => list("eval.rank_n", raw)?,
                None => vec![1, 5],
            },
            max_frames: (max_frames > 0).then_some(max_frames),
        };
        if s.far_targets.is_empty() || s.far_targets.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(bad("eval.far_targets must be non-empty values in (0, 1]".into()));
        }
        if s.rank_n.contains(&0) {
            return Err(bad("eval.rank_n values must be >= 1".into()));
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub mode: String,
    pub params: AggregationParams,
    pub far_targets: Vec<f64>,
    pub rank_n: Vec<usize>,
    pub max_frames: Option<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;

    const GEN: &str = "
        # desk dataset
        seed = 7
        data.n_classes = 50
        data.samples_per_class = 40   # per identity
        data.d_in = 32
        data.d = 16
        data.noise_levels = 0.1:0.7, 1.0:0.3
    ";

    #[test]
    fn parses_gen_config() {
        let c = RunConfig::parse("c.cfg", GEN).unwrap().gen_config().unwrap();
        assert_eq!(c, GenConfig::default());
    }

    #[test]
    fn rejects_unknown_and_missing_keys() {
        let e = RunConfig::parse("c.cfg", "seed = 1\nbogus.key = 3\n").unwrap_err();
        assert!(e.to_string().contains("bogus.key"));
        let no_d = GEN.replace("data.d = 16", "");
        let e = RunConfig::parse("c.cfg", &no_d).unwrap().gen_config().unwrap_err();
        assert!(e.to_string().contains("`data.d`"));
        assert!(RunConfig::parse("c.cfg", "seed 1").is_err());
    }

    #[test]
    fn overrides_and_seed_fallback() {
        let mut c = RunConfig::parse("c.cfg", "seed = 1\neval.f_th = 0.2\n").unwrap();
        c.set_pair("eval.f_th=-1").unwrap();
        assert_eq!(c.eval_settings().unwrap().params.f_th, -1.0);
        let env = RunConfig::default().with_seed_fallback(Some("9".into())).unwrap();
        assert_eq!(env.seed().unwrap(), 9);
        let file_wins = c.with_seed_fallback(Some("9".into())).unwrap();
        assert_eq!(file_wins.seed().unwrap(), 1);
        assert!(RunConfig::default().seed().is_err());
    }

    #[test]
    fn training_defaults() {
        let c = RunConfig::parse("c.cfg", "seed = 3\ntrain.qwdf_threshold = 0.2\ntrain.step2.decay_epochs = 2,4\n")
            .unwrap();
        let p = c.pipeline_config().unwrap();
        assert_eq!(p.iterations, 2);
        assert_eq!(p.qwdf_threshold, Some(0.2));
        assert_eq!(p.step1.batch_size, 16);
        assert_eq!(p.step2.decay_epochs, vec![2, 4]);
        assert_ne!(p.step1.seed, p.step2.seed);
        assert_eq!(c.model_dims(32, 16, 50).unwrap().q, 64);
        assert_eq!(c.loss_config().unwrap(), LossConfig::default());
        let e = c.eval_settings().unwrap();
        assert_eq!(e.far_targets, vec![1e-4, 1e-3, 1e-2]);
        assert_eq!(e.rank_n, vec![1, 5]);
        assert_eq!(e.max_frames, None);
    }
}

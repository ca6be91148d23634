use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use super::{ExperimentError, Result};
use crate::data::{self, BatchPlan, Dataset, DATA_DIR_ENV};
use crate::net::ArchSpec;
use crate::norm::{BrnClip, CovMode, NormKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
}

/// A complete, flat description of one training run.
///
/// Read from `key = value` lines (`#` starts a comment; lists are
/// comma-separated; `none` clears an optional value) or from a JSON object
/// with the same keys. Keys not given keep their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub synth_classes: usize,
    pub synth_train_per_class: usize,
    pub synth_test_per_class: usize,
    pub synth_channels: usize,
    pub synth_height: usize,
    pub synth_width: usize,
    pub synth_spread: f64,
    pub data_seed: u64,
    /// CIFAR-10 directory; falls back to the `KALNORM_DATA_DIR` environment variable.
    pub cifar_dir: Option<String>,
    pub cifar_train_limit: usize,
    pub cifar_test_limit: usize,

    pub widths: Vec<usize>,
    pub norm: NormKind,
    pub cov_mode: CovMode,
    pub gradient_batch: usize,
    pub statistics_batch: usize,

    pub lr: f64,
    pub momentum: f64,
    /// Multiply the learning rate by `lr_decay_factor` every this many steps; 0 disables.
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub alpha: f64,
    pub eps: f64,

    /// BRN clipping: `(1, 0)` for `brn_warmup_steps`, then linear to
    /// `(brn_r_max, brn_d_max)` over `brn_ramp_steps`.
    pub brn_r_max: f64,
    pub brn_d_max: f64,
    pub brn_warmup_steps: usize,
    pub brn_ramp_steps: usize,

    pub seed: u64,
    pub steps: usize,
    pub eval_every: usize,

    pub preset: Option<String>,
    /// The `(gradient, statistics)` setting this run scales down, if any.
    pub reference_setting: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Synthetic,
            synth_classes: 10,
            synth_train_per_class: 500,
            synth_test_per_class: 100,
            synth_channels: 16,
            synth_height: 1,
            synth_width: 1,
            synth_spread: 0.5,
            data_seed: 2024,
            cifar_dir: None,
            cifar_train_limit: 10_000,
            cifar_test_limit: 2_000,
            widths: vec![8, 16, 16, 32],
            norm: NormKind::Bkn,
            cov_mode: CovMode::Diag,
            gradient_batch: 128,
            statistics_batch: 128,
            lr: 0.05,
            momentum: 0.9,
            lr_decay_every: 0,
            lr_decay_factor: 0.1,
            alpha: crate::norm::DEFAULT_ALPHA,
            eps: crate::norm::DEFAULT_EPS,
            brn_r_max: 3.0,
            brn_d_max: 5.0,
            brn_warmup_steps: 50,
            brn_ramp_steps: 200,
            seed: 0,
            steps: 800,
            eval_every: 100,
            preset: None,
            reference_setting: None,
        }
    }
}

fn config_err(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Config(msg.into())
}

fn typed_value(key: &str, raw: &str, template: &Value) -> Result<Value> {
    let bad = |what: &str| config_err(format!("`{key}`: expected {what}, got `{raw}`"));
    Ok(match template {
        Value::Array(_) => Value::Array(
            raw.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<u64>().map(Value::from).map_err(|_| bad("a list of integers")))
                .collect::<Result<_>>()?,
        ),
        Value::Number(n) if n.is_f64() => Value::from(raw.parse::<f64>().map_err(|_| bad("a number"))?),
        Value::Number(_) => Value::from(raw.parse::<u64>().map_err(|_| bad("a nonnegative integer"))?),
        Value::Null if raw == "none" => Value::Null,
        Value::String(_) | Value::Null => Value::String(raw.to_string()),
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad("true or false"))?),
        Value::Object(_) => return Err(bad("a scalar")),
    })
}

impl ExperimentConfig {
    /// Parses `key = value` text on top of the defaults.
    pub fn from_kv(text: &str) -> Result<Self> {
        let defaults = serde_json::to_value(Self::default()).expect("config serializes");
        let template = defaults.as_object().expect("config is an object");
        let mut map = template.clone();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, raw) = line
                .split_once('=')
                .ok_or_else(|| config_err(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, raw) = (key.trim(), raw.trim());
            let t = template
                .get(key)
                .ok_or_else(|| config_err(format!("line {}: unknown key `{key}`", lineno + 1)))?;
            map.insert(key.to_string(), typed_value(key, raw, t)?);
        }
        Self::from_value(Value::Object(map))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| config_err(e.to_string()))?;
        Self::from_value(value)
    }

    /// JSON if the text is an object, `key = value` otherwise.
    pub fn parse(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            Self::from_json(text)
        } else {
            Self::from_kv(text)
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    fn from_value(value: Value) -> Result<Self> {
        let cfg: Self = serde_json::from_value(value).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical `key = value` text: keys sorted, shortest round-trip floats.
    pub fn to_kv(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let map: &Map<String, Value> = value.as_object().expect("config is an object");
        let mut out = String::new();
        for (k, v) in map {
            let text = match v {
                Value::Null => "none".to_string(),
                Value::String(s) => s.clone(),
                Value::Array(items) => items.iter().map(Value::to_string).collect::<Vec<_>>().join(","),
                other => other.to_string(),
            };
            let _ = writeln!(out, "{k} = {text}");
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of [`ExperimentConfig::to_kv`], hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_kv().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.statistics_batch == 0 || self.gradient_batch == 0 {
            return Err(config_err("batch sizes must be positive"));
        }
        if !self.gradient_batch.is_multiple_of(self.statistics_batch) {
            return Err(config_err(format!(
                "statistics_batch {} does not divide gradient_batch {}",
                self.statistics_batch, self.gradient_batch
            )));
        }
        if self.steps == 0 || self.eval_every == 0 {
            return Err(config_err("steps and eval_every must be positive"));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(config_err("widths must be a nonempty list of positive integers"));
        }
        if self.cov_mode == CovMode::Full && self.widths.iter().any(|&w| w > 64) {
            return Err(config_err("full covariance mode supports at most 64 channels"));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(config_err("need lr >= 0 and 0 <= momentum < 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) || !(self.eps > 0.0) {
            return Err(config_err("need 0 <= alpha <= 1 and eps > 0"));
        }
        if !(self.lr_decay_factor > 0.0) {
            return Err(config_err("lr_decay_factor must be positive"));
        }
        BrnClip::new(self.brn_r_max, self.brn_d_max).map_err(|e| config_err(e.to_string()))?;
        if self.dataset == DatasetKind::Synthetic {
            if self.synth_classes < 2 || self.synth_train_per_class == 0 || self.synth_test_per_class == 0 {
                return Err(config_err("synthetic data needs >= 2 classes and nonempty splits"));
            }
            if self.synth_channels * self.synth_height * self.synth_width == 0 {
                return Err(config_err("synthetic image dimensions must be positive"));
            }
        }
        Ok(())
    }

    pub fn plan(&self) -> Result<BatchPlan> {
        BatchPlan::new(self.gradient_batch, self.statistics_batch, self.seed).map_err(|e| config_err(e.to_string()))
    }

    pub fn classes(&self) -> usize {
        match self.dataset {
            DatasetKind::Synthetic => self.synth_classes,
            DatasetKind::Cifar10 => data::cifar::CLASSES,
        }
    }

    pub fn input_dims(&self) -> (usize, usize, usize) {
        match self.dataset {
            DatasetKind::Synthetic => (self.synth_channels, self.synth_height, self.synth_width),
            DatasetKind::Cifar10 => (data::cifar::CHANNELS, data::cifar::SIDE, data::cifar::SIDE),
        }
    }

    pub fn arch(&self) -> ArchSpec {
        ArchSpec {
            widths: self.widths.clone(),
            classes: self.classes(),
        }
    }

    /// The learning rate in effect at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.lr_decay_every == 0 {
            self.lr
        } else {
            self.lr * self.lr_decay_factor.powi((step / self.lr_decay_every) as i32)
        }
    }

    /// BRN clipping bounds in effect at `step` (0-based).
    pub fn brn_clip_at(&self, step: usize) -> BrnClip {
        let t = if step < self.brn_warmup_steps {
            0.0
        } else if self.brn_ramp_steps == 0 {
            1.0
        } else {
            ((step - self.brn_warmup_steps) as f64 / self.brn_ramp_steps as f64).min(1.0)
        };
        BrnClip {
            r_max: 1.0 + t * (self.brn_r_max - 1.0),
            d_max: t * self.brn_d_max,
        }
    }

    pub fn cifar_dir(&self) -> Result<PathBuf> {
        self.cifar_dir
            .clone()
            .or_else(|| std::env::var(DATA_DIR_ENV).ok())
            .map(PathBuf::from)
            .ok_or_else(|| config_err(format!("cifar10 needs `cifar_dir` or {DATA_DIR_ENV}")))
    }

    /// `(train, test)` as described by the dataset keys.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match self.dataset {
            DatasetKind::Synthetic => {
                let dims = self.input_dims();
                let k = self.synth_classes;
                let per = self.synth_train_per_class + self.synth_test_per_class;
                // one draw so train and test share class means
                let all = data::synth_gaussian_mixture(k, per, dims, self.synth_spread, self.data_seed)?;
                Ok(all.split_at(k * self.synth_train_per_class))
            }
            DatasetKind::Cifar10 => {
                let dir = self.cifar_dir()?;
                Ok(data::load_cifar10_subset(
                    &dir,
                    Some(self.cifar_train_limit),
                    Some(self.cifar_test_limit),
                )?)
            }
        }
    }
}

/// Names accepted by [`preset`].
pub const PRESETS: [&str; 7] = ["256x4", "256x1", "64x8", "16x4", "8x2", "128x2", "baseline"];

/// Desk-scale configurations named after `(gradient, statistics)` settings.
/// Every preset uses the default synthetic task and architecture.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let (g, s) = match name {
        "256x4" => (256, 4),
        "256x1" => (256, 1),
        "64x8" => (64, 8),
        "16x4" => (16, 4),
        "8x2" => (8, 2),
        "128x2" => (128, 2),
        "baseline" => (128, 128),
        other => {
            return Err(config_err(format!(
                "unknown preset `{other}` (known: {})",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(ExperimentConfig {
        gradient_batch: g,
        statistics_batch: s,
        preset: Some(name.to_string()),
        reference_setting: Some(format!("({g},{s})")),
        ..ExperimentConfig::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip_and_hash() {
        let cfg = preset("8x2").unwrap();
        assert_eq!((cfg.gradient_batch, cfg.statistics_batch), (8, 2));
        let back = ExperimentConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
        let json = ExperimentConfig::parse(&cfg.to_json()).unwrap();
        assert_eq!(json, cfg);
        let other = ExperimentConfig { seed: 1, ..cfg.clone() };
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn typed_parsing() {
        let cfg = ExperimentConfig::from_kv(
            "# comment\nnorm = bn\nwidths = 4, 8\nlr = 0.5\nsteps = 7 # trailing\ncifar_dir = /tmp/x\ncov_mode = full\n",
        )
        .unwrap();
        assert_eq!(cfg.norm, NormKind::Bn);
        assert_eq!(cfg.widths, vec![4, 8]);
        assert_eq!(cfg.lr, 0.5);
        assert_eq!(cfg.steps, 7);
        assert_eq!(cfg.cifar_dir.as_deref(), Some("/tmp/x"));
        assert_eq!(cfg.cov_mode, CovMode::Full);
        assert!(ExperimentConfig::from_kv("cifar_dir = none").unwrap().cifar_dir.is_none());
    }

    #[test]
    fn config_errors() {
        for bad in [
            "bogus = 1",
            "steps = -3",
            "lr = fast",
            "norm = ln",
            "gradient_batch = 8\nstatistics_batch = 3",
            "no equals sign",
            "widths = ",
        ] {
            assert!(matches!(ExperimentConfig::from_kv(bad), Err(ExperimentError::Config(_))), "{bad}");
        }
        assert!(ExperimentConfig::from_json("{\"nope\": 1}").is_err());
        assert!(preset("3x1").is_err());
    }

    #[test]
    fn presets() {
        for name in PRESETS {
            let cfg = preset(name).unwrap();
            assert_eq!(cfg.gradient_batch % cfg.statistics_batch, 0);
        }
        let b = preset("baseline").unwrap();
        assert_eq!(b.gradient_batch, b.statistics_batch);
        assert_eq!(preset("256x1").unwrap().statistics_batch, 1);
    }

    #[test]
    fn schedules() {
        let cfg = ExperimentConfig {
            lr: 1.0,
            lr_decay_every: 10,
            lr_decay_factor: 0.5,
            brn_warmup_steps: 5,
            brn_ramp_steps: 10,
            brn_r_max: 3.0,
            brn_d_max: 5.0,
            ..ExperimentConfig::default()
        };
        assert_eq!((cfg.lr_at(0), cfg.lr_at(9), cfg.lr_at(10), cfg.lr_at(25)), (1.0, 1.0, 0.5, 0.25));
        assert_eq!(cfg.brn_clip_at(4), BrnClip { r_max: 1.0, d_max: 0.0 });
        assert_eq!(cfg.brn_clip_at(10), BrnClip { r_max: 2.0, d_max: 2.5 });
        assert_eq!(cfg.brn_clip_at(100), BrnClip { r_max: 3.0, d_max: 5.0 });
    }

    #[test]
    fn synthetic_split_shares_means() {
        let cfg = ExperimentConfig {
            synth_train_per_class: 3,
            synth_test_per_class: 2,
            ..ExperimentConfig::default()
        };
        let (train, test) = cfg.load_data().unwrap();
        assert_eq!((train.len(), test.len()), (30, 20));
        assert_eq!(train.sample_dims(), (16, 1, 1));
    }
}

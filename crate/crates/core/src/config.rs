//! Experiment configuration: strict JSON schema, defaults, validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{ExternalSpec, Heterogeneity, SplitConfig, SynthSpec};
use crate::error::{Error, Result};
use crate::nn::Architecture;
use crate::server::{FederationSettings, MethodParams, Strategy, Toggles};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SynthSpec),
    Idx {
        images: PathBuf,
        labels: PathBuf,
        num_classes: usize,
    },
    Csv { path: PathBuf, num_classes: usize },
}

impl DataSource {
    pub fn num_classes(&self) -> usize {
        match self {
            DataSource::Synthetic(s) => s.num_classes,
            DataSource::Idx { num_classes, .. } | DataSource::Csv { num_classes, .. } => *num_classes,
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DataSource::Synthetic(_) => {}
            DataSource::Idx { images, labels, .. } => {
                fix(images);
                fix(labels);
            }
            DataSource::Csv { path, .. } => fix(path),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub heterogeneity: Heterogeneity,
    #[serde(default = "d_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "d_new_test_fraction")]
    pub new_test_fraction: f64,
    #[serde(default)]
    pub external: Option<ExternalSpec>,
}

impl DataConfig {
    pub fn split(&self) -> SplitConfig {
        SplitConfig {
            train_fraction: self.train_fraction,
            new_test_fraction: self.new_test_fraction,
            external: self.external,
        }
    }
}

fn d_train_fraction() -> f64 {
    SplitConfig::default().train_fraction
}
fn d_new_test_fraction() -> f64 {
    SplitConfig::default().new_test_fraction
}
fn d_rounds() -> usize {
    50
}
fn d_one() -> usize {
    1
}
fn d_batch() -> usize {
    128
}
fn d_lr() -> f64 {
    0.01
}
fn d_momentum() -> f64 {
    0.9
}
fn d_weight_decay() -> f64 {
    5e-4
}
fn d_p_max() -> f64 {
    0.5
}
fn d_lambda() -> f64 {
    1.0
}
fn d_beta_max() -> f64 {
    0.5
}
fn d_t0_fraction() -> f64 {
    0.1
}
fn d_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub strategy: Strategy,
    pub clients: usize,
    #[serde(default = "d_rounds")]
    pub rounds: usize,
    #[serde(default = "d_one")]
    pub local_epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "d_p_max")]
    pub p_max: f64,
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    #[serde(default = "d_beta_max")]
    pub beta_max: f64,
    #[serde(default = "d_t0_fraction")]
    pub t0_fraction: f64,
    #[serde(default)]
    pub toggles: Toggles,
    pub model: Architecture,
    pub data: DataConfig,
    /// Metrics are computed every `eval_every` rounds and after the last.
    #[serde(default = "d_one")]
    pub eval_every: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_output_dir")]
    pub output_dir: PathBuf,
}

impl FederationConfig {
    /// Parses and validates a config file. Relative data paths are taken
    /// relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data.source.resolve_paths(base);
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.p_max) {
            return bad(format!("p_max must lie in [0, 1], got {}", self.p_max));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1".into());
        }
        if self.rounds < 1 {
            return bad("rounds must be at least 1".into());
        }
        let classes = self.data.source.num_classes();
        if let Heterogeneity::LabelSkew { s } = self.data.heterogeneity {
            if s < 2 || s > classes {
                return bad(format!("label skew s must lie in [2, {classes}], got {s}"));
            }
        }
        if self.clients < 1 {
            return bad("clients must be at least 1".into());
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.beta_max) {
            return bad(format!("beta_max must lie in [0, 1], got {}", self.beta_max));
        }
        if !(self.t0_fraction > 0.0 && self.t0_fraction <= 1.0) {
            return bad(format!("t0_fraction must lie in (0, 1], got {}", self.t0_fraction));
        }
        if self.eval_every < 1 {
            return bad("eval_every must be at least 1".into());
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return bad(format!("train_fraction must lie in (0, 1), got {}", self.data.train_fraction));
        }
        if let Heterogeneity::FeatureSkew { strength } = self.data.heterogeneity {
            if strength.is_nan() || strength < 0.0 {
                return bad(format!("feature skew strength must be non-negative, got {strength}"));
            }
        }
        if self.model.num_classes() != classes {
            return bad(format!(
                "model emits {} classes, dataset has {classes}",
                self.model.num_classes()
            ));
        }
        if let DataSource::Synthetic(s) = &self.data.source {
            if self.model.input().len() != s.dims {
                return bad(format!(
                    "model expects {} input values, synthetic data has {} dims",
                    self.model.input().len(),
                    s.dims
                ));
            }
        }
        self.strategy.compile(&self.model, &self.method(), self.rounds)?;
        Ok(())
    }

    pub fn method(&self) -> MethodParams {
        MethodParams {
            p_max: self.p_max,
            lambda: self.lambda,
            beta_max: self.beta_max,
            t0_fraction: self.t0_fraction,
            toggles: self.toggles,
        }
    }

    pub fn settings(&self) -> FederationSettings {
        FederationSettings {
            rounds: self.rounds,
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed: self.seed,
        }
    }

    pub fn label(&self) -> String {
        self.strategy.label(&self.method())
    }

    /// Pretty JSON with every default filled in.
    pub fn resolved_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Hex SHA-256 of the compact resolved config.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(serde_json::to_vec(self)?);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> serde_json::Value {
        serde_json::json!({
            "strategy": {"name": "cd2pfed"},
            "clients": 4,
            "model": {
                "input": {"features": 8},
                "layers": [
                    {"kind": "dense", "in_units": 8, "out_units": 16},
                    {"kind": "relu"},
                    {"kind": "dense", "in_units": 16, "out_units": 5}
                ]
            },
            "data": {
                "source": {"kind": "synthetic", "num_classes": 5, "dims": 8, "per_class": 40, "spread": 0.2},
                "heterogeneity": {"kind": "label_skew", "s": 2}
            }
        })
    }

    fn parse(v: &serde_json::Value) -> Result<FederationConfig> {
        FederationConfig::from_json(&v.to_string())
    }

    #[test]
    fn defaults_are_filled() {
        let cfg = parse(&base()).unwrap();
        assert_eq!(cfg.rounds, 50);
        assert_eq!(cfg.batch_size, 128);
        assert_eq!(cfg.momentum, 0.9);
        assert_eq!(cfg.weight_decay, 5e-4);
        assert_eq!(cfg.lambda, 1.0);
        assert_eq!(cfg.beta_max, 0.5);
        assert_eq!(cfg.t0_fraction, 0.1);
        assert_eq!(cfg.toggles, Toggles::default());
        assert_eq!(cfg.label(), "cd2pfed-p0.5-li-ta-cd");
        let again = FederationConfig::from_json(&cfg.resolved_json().unwrap()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.hash().unwrap(), cfg.hash().unwrap());
        assert_eq!(cfg.hash().unwrap().len(), 64);
    }

    #[test]
    fn each_invalid_range_has_its_own_message() {
        let cases = [
            ("p_max", serde_json::json!(1.5), "p_max"),
            ("lambda", serde_json::json!(-0.1), "lambda"),
            ("batch_size", serde_json::json!(0), "batch_size"),
            ("rounds", serde_json::json!(0), "rounds"),
        ];
        let mut messages = Vec::new();
        for (key, value, needle) in cases {
            let mut v = base();
            v[key] = value;
            let err = parse(&v).unwrap_err();
            assert_eq!(err.exit_code(), 2);
            let msg = err.to_string();
            assert!(msg.contains(needle), "{msg}");
            messages.push(msg);
        }
        for s in [1, 6] {
            let mut v = base();
            v["data"]["heterogeneity"]["s"] = serde_json::json!(s);
            let msg = parse(&v).unwrap_err().to_string();
            assert!(msg.contains("label skew s"), "{msg}");
            messages.push(msg);
        }
        messages.dedup();
        assert_eq!(messages.len(), 6);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = base();
        v["learning_rate"] = serde_json::json!(0.1);
        assert!(matches!(parse(&v), Err(Error::Config(_))));
        let mut v = base();
        v["toggles"] = serde_json::json!({"li": true, "xx": false});
        assert!(matches!(parse(&v), Err(Error::Config(_))));
    }

    #[test]
    fn mismatched_model_is_rejected() {
        let mut v = base();
        v["data"]["source"]["num_classes"] = serde_json::json!(4);
        v["data"]["heterogeneity"]["s"] = serde_json::json!(2);
        assert!(parse(&v).unwrap_err().to_string().contains("classes"));
    }
}

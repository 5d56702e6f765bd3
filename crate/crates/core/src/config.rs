//! JSON experiment configuration with field-path diagnostics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterHyperparams;
use crate::error::{Error, Result};
use crate::harness::{Method, StreamSpec, TrainSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub r: usize,
    pub alpha: f64,
    pub n_experts: usize,
    pub top_k: usize,
    pub lambda: f64,
    #[serde(default)]
    pub freeze_width: Option<usize>,
    /// Number of stacked adapter layers.
    pub layers: usize,
}

impl AdapterConfig {
    pub fn hyperparams(&self) -> AdapterHyperparams {
        AdapterHyperparams {
            r: self.r,
            alpha: self.alpha,
            n_experts: self.n_experts,
            top_k: self.top_k,
            lambda: self.lambda,
            freeze_width: self.freeze_width,
        }
    }
}

impl Default for AdapterConfig {
    fn default() -> Self {
        let hp = AdapterHyperparams::desk_scale();
        Self {
            r: hp.r,
            alpha: hp.alpha,
            n_experts: hp.n_experts,
            top_k: hp.top_k,
            lambda: hp.lambda,
            freeze_width: hp.freeze_width,
            layers: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub stream: StreamSpec,
    pub seeds: Vec<u64>,
    pub adapter: AdapterConfig,
    pub training: TrainSpec,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub output_dir: Option<String>,
    /// Batches averaged for the per-batch training time.
    #[serde(default = "default_timing_batches")]
    pub timing_batches: usize,
}

fn default_timing_batches() -> usize {
    100
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            stream: StreamSpec::default(),
            seeds: vec![0, 1, 2, 3, 4],
            adapter: AdapterConfig::default(),
            training: TrainSpec {
                lr: 5e-3,
                epochs: 12,
                ..TrainSpec::default()
            },
            methods: Method::ALL.to_vec(),
            output_dir: None,
            timing_batches: default_timing_batches(),
        }
    }
}

fn cfg_err(path: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_string(),
        msg: msg.into(),
    }
}

/// Deserializes JSON, reporting the failing field path or the parse location.
pub fn from_json_with_path<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let inner = e.inner();
        let path = e.path().to_string();
        let msg = if inner.is_syntax() || inner.is_eof() {
            format!("parse error: {inner}")
        } else {
            inner.to_string()
        };
        let path = if path == "." || path == "?" {
            "$"
        } else {
            &path
        };
        cfg_err(path, msg)
    })
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = from_json_with_path(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.stream;
        if s.tasks == 0 {
            return Err(cfg_err("stream.tasks", "must be at least 1"));
        }
        if s.classes < 2 {
            return Err(cfg_err("stream.classes", "must be at least 2"));
        }
        if s.dim < 2 || !s.dim.is_multiple_of(2) {
            return Err(cfg_err("stream.dim", "must be even and at least 2"));
        }
        if s.train_per_task < s.classes {
            return Err(cfg_err(
                "stream.train_per_task",
                "must be at least stream.classes",
            ));
        }
        if s.test_per_task < s.classes {
            return Err(cfg_err(
                "stream.test_per_task",
                "must be at least stream.classes",
            ));
        }
        if !s.center_norm.is_finite() || s.center_norm <= 0.0 {
            return Err(cfg_err("stream.center_norm", "must be positive"));
        }
        if !s.noise_std.is_finite() || s.noise_std <= 0.0 {
            return Err(cfg_err("stream.noise_std", "must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(cfg_err("seeds", "at least one seed required"));
        }
        let a = &self.adapter;
        if a.n_experts == 0 {
            return Err(cfg_err("adapter.n_experts", "must be at least 1"));
        }
        if a.r == 0 || !a.r.is_multiple_of(a.n_experts) {
            return Err(cfg_err(
                "adapter.r",
                "must be a positive multiple of adapter.n_experts",
            ));
        }
        if a.top_k == 0 || a.top_k > a.n_experts {
            return Err(cfg_err(
                "adapter.top_k",
                "must lie in 1..=adapter.n_experts",
            ));
        }
        if !(a.alpha > 0.0 && a.alpha.is_finite()) {
            return Err(cfg_err("adapter.alpha", "must be positive"));
        }
        if !(a.lambda >= 0.0 && a.lambda.is_finite()) {
            return Err(cfg_err("adapter.lambda", "must be non-negative"));
        }
        if a.freeze_width.is_some_and(|w| w > a.n_experts) {
            return Err(cfg_err(
                "adapter.freeze_width",
                "must not exceed adapter.n_experts",
            ));
        }
        if a.layers == 0 {
            return Err(cfg_err("adapter.layers", "must be at least 1"));
        }
        let t = &self.training;
        if t.epochs == 0 {
            return Err(cfg_err("training.epochs", "must be at least 1"));
        }
        if t.batch_size == 0 {
            return Err(cfg_err("training.batch_size", "must be at least 1"));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(cfg_err("training.lr", "must be positive"));
        }
        if self.methods.is_empty() {
            return Err(cfg_err("methods", "at least one method required"));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(cfg_err(
                    &format!("methods[{i}]"),
                    format!("duplicate method {m}"),
                ));
            }
        }
        Ok(())
    }
}

//! Experiment configuration file (TOML).

use crate::error::CliError;
use delaylab::models::ModelKind;
use delaylab::{MetricConfig, ModelSpec, SimConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDefaults {
    pub max_len: usize,
    pub n_delays: usize,
    pub lru_r_min: f64,
    pub lru_r_max: f64,
    pub pos_init_std: f64,
}

impl Default for ModelDefaults {
    fn default() -> Self {
        let s = ModelSpec::default();
        Self {
            max_len: s.max_len,
            n_delays: s.n_delays,
            lru_r_min: s.lru_r_min,
            lru_r_max: s.lru_r_max,
            pos_init_std: s.pos_init_std,
        }
    }
}

impl ModelDefaults {
    pub fn spec(&self, kind: ModelKind, d: usize) -> ModelSpec {
        ModelSpec {
            kind,
            d,
            max_len: self.max_len,
            n_delays: self.n_delays,
            lru_r_min: self.lru_r_min,
            lru_r_max: self.lru_r_max,
            pos_init_std: self.pos_init_std,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub kinds: Vec<ModelKind>,
    pub dims: Vec<usize>,
    pub noise_variances: Vec<f64>,
    pub seeds_per_cell: usize,
    pub base_seed: u64,
    /// Add delay-MLP baseline cells (one per dimension, noise and seed).
    pub include_delay_mlp: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            kinds: vec![ModelKind::Gpt, ModelKind::Lru],
            dims: vec![10, 25, 50, 100],
            noise_variances: vec![0.0, 0.05, 0.1],
            seeds_per_cell: 25,
            base_seed: 0,
            include_delay_mlp: false,
        }
    }
}

impl SweepConfig {
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.seeds_per_cell as u64).map(|i| self.base_seed + i).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs") }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub desk_scale: bool,
    pub sim: SimConfig,
    pub train: TrainConfig,
    pub model: ModelDefaults,
    pub sweep: SweepConfig,
    pub metrics: MetricConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::validation("config", e.message()))?;
        Ok(cfg.resolved())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::validation("config", format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    /// Apply the desk-scale preset when the flag is set.
    pub fn resolved(mut self) -> Self {
        if self.desk_scale {
            self.sim = self.sim.desk_scale();
            self.train.epochs = 300;
            self.train.batch_size = 8;
            self.sweep.seeds_per_cell = 5;
            self.sweep.dims = vec![10, 25];
            self.sweep.noise_variances = vec![0.0, 0.1];
        }
        self
    }

    pub fn with_desk_scale(mut self, on: bool) -> Self {
        if on && !self.desk_scale {
            self.desk_scale = true;
            self = self.resolved();
        }
        self
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.sim.validate().map_err(|e| CliError::validation("sim", e.to_string()))?;
        self.train.validate().map_err(|e| CliError::validation("train", e.to_string()))?;
        let check = |field: &'static str, ok: bool, msg: &str| {
            if ok { Ok(()) } else { Err(CliError::validation(field, msg.to_string())) }
        };
        check("sweep.kinds", !self.sweep.kinds.is_empty() || self.sweep.include_delay_mlp, "empty")?;
        check("sweep.dims", !self.sweep.dims.is_empty() && self.sweep.dims.iter().all(|&d| d > 0), "must be non-empty and positive")?;
        check(
            "sweep.noise_variances",
            !self.sweep.noise_variances.is_empty() && self.sweep.noise_variances.iter().all(|&v| v >= 0.0 && v.is_finite()),
            "must be non-empty and >= 0",
        )?;
        check("sweep.seeds_per_cell", self.sweep.seeds_per_cell > 0, "must be positive")?;
        check("model.max_len", self.model.max_len >= self.sim.retained_steps(), "shorter than the retained series")?;
        check("metrics.max_points", self.metrics.max_points > 0, "must be positive")?;
        for &kind in &self.sweep.kinds {
            for &d in &self.sweep.dims {
                self.model.spec(kind, d).validate().map_err(|e| CliError::validation("model", e.to_string()))?;
            }
        }
        Ok(())
    }
}

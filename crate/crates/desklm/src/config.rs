//! TOML run- and grid-configuration files, converted into the trainer's
//! internal plan types.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::MixtureSpec;
use crate::model::ModelConfig;
use crate::optim::MupSettings;
use crate::schedule::{ScheduleKind, ScheduleSpec};
use crate::trainer::{GridRow, GridSpec, OptimizerKind, StagePlan};

#[derive(Debug, Error)]
pub enum ConfigFileError {
    #[error("io error reading {path}: {err}")]
    Io { path: PathBuf, err: std::io::Error },
    #[error("parse error in {path}: {err}")]
    Parse { path: PathBuf, err: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Per-stage schedule block; `total_steps` is derived from the stage's
/// iteration count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageScheduleConfig {
    pub kind: ScheduleKind,
    pub warmup_steps: u64,
    pub min_ratio: f64,
    #[serde(default = "default_stable_fraction")]
    pub stable_fraction_of_peak: f64,
    #[serde(default = "default_decay_fraction")]
    pub decay_fraction: f64,
    pub peak_lr_muon: f64,
    pub peak_lr_adamw: f64,
}

fn default_stable_fraction() -> f64 {
    0.55
}

fn default_decay_fraction() -> f64 {
    0.20
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageConfig {
    pub name: String,
    pub iterations: u64,
    pub batch_size: usize,
    pub context: usize,
    #[serde(default = "default_grad_accum")]
    pub grad_accum: u64,
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default = "default_muon_wd")]
    pub muon_weight_decay: f64,
    #[serde(default)]
    pub adamw_weight_decay: f64,
    pub schedule: StageScheduleConfig,
    pub mixture: MixtureConfig,
}

fn default_grad_accum() -> u64 {
    2
}

fn default_muon_wd() -> f64 {
    0.1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureConfig {
    pub weights: BTreeMap<String, f64>,
    #[serde(default)]
    pub min_char_length: Option<u64>,
    #[serde(default)]
    pub min_quality: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub data_dir: PathBuf,
    #[serde(default)]
    pub heldout_dir: Option<PathBuf>,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub mup: Option<MupSettings>,
    pub model: ModelConfig,
    #[serde(rename = "stage")]
    pub stages: Vec<StageConfig>,
}

fn default_log_every() -> u64 {
    10
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::NorMuonCwd
}

impl StageConfig {
    /// Builds the internal plan; the stage's mixture seed defaults to the
    /// run seed xor a stage counter so stages draw distinct streams.
    pub fn to_plan(&self, run_seed: u64, stage_index: u64) -> StagePlan {
        let s = &self.schedule;
        let mk = |peak: f64| ScheduleSpec {
            kind: s.kind,
            peak_lr: peak,
            warmup_steps: s.warmup_steps,
            total_steps: self.iterations,
            min_ratio: s.min_ratio,
            stable_fraction_of_peak: s.stable_fraction_of_peak,
            decay_fraction: s.decay_fraction,
        };
        StagePlan {
            name: self.name.clone(),
            iterations: self.iterations,
            batch_size: self.batch_size,
            context: self.context,
            grad_accum: self.grad_accum,
            muon_schedule: mk(s.peak_lr_muon),
            adamw_schedule: mk(s.peak_lr_adamw),
            mixture: MixtureSpec {
                weights: self.mixture.weights.clone(),
                min_char_length: self.mixture.min_char_length,
                min_quality: self.mixture.min_quality,
                seed: self.mixture.seed.unwrap_or(run_seed ^ (0x9e37 + stage_index)),
            },
            checkpoint_every: self.checkpoint_every,
            muon_weight_decay: self.muon_weight_decay,
            adamw_weight_decay: self.adamw_weight_decay,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigFileError> {
        let text = std::fs::read_to_string(path)
            .map_err(|err| ConfigFileError::Io { path: path.to_path_buf(), err })?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|err| ConfigFileError::Parse { path: path.to_path_buf(), err: err.to_string() })?;
        cfg.model
            .validate()
            .map_err(|e| ConfigFileError::Invalid(e.to_string()))?;
        if cfg.stages.is_empty() {
            return Err(ConfigFileError::Invalid("no [[stage]] blocks".into()));
        }
        Ok(cfg)
    }

    pub fn plans(&self) -> Vec<StagePlan> {
        self.stages
            .iter()
            .enumerate()
            .map(|(i, s)| s.to_plan(self.seed, i as u64))
            .collect()
    }
}

/// TOML grid file for `ablate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub data_dir: PathBuf,
    pub model: ModelConfig,
    pub stage: StageConfig,
    #[serde(rename = "row")]
    pub rows: Vec<GridRow>,
}

impl GridConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigFileError> {
        let text = std::fs::read_to_string(path)
            .map_err(|err| ConfigFileError::Io { path: path.to_path_buf(), err })?;
        let cfg: GridConfig = toml::from_str(&text)
            .map_err(|err| ConfigFileError::Parse { path: path.to_path_buf(), err: err.to_string() })?;
        cfg.model
            .validate()
            .map_err(|e| ConfigFileError::Invalid(e.to_string()))?;
        if cfg.rows.is_empty() {
            return Err(ConfigFileError::Invalid("no [[row]] blocks".into()));
        }
        Ok(cfg)
    }

    pub fn to_spec(&self) -> GridSpec {
        GridSpec {
            name: self.name.clone(),
            model: self.model.clone(),
            stage: self.stage.to_plan(self.seeds.first().copied().unwrap_or(0), 0),
            seeds: self.seeds.clone(),
            rows: self.rows.clone(),
        }
    }
}

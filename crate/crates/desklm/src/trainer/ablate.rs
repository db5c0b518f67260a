//! Directional ablation grids: each row toggles interventions, switches the
//! optimizer, or swaps the LR schedule, trained at matched tokens and
//! iterations against the first (baseline) row.

use serde::{Deserialize, Serialize};

use super::{OptimizerKind, RunSinks, StagePlan, TrainError, Trainer};
use crate::data::TokenShard;
use crate::model::{ModelConfig, ModelParams};
use crate::schedule::ScheduleKind;
use crate::tensor::Element;

/// Per-row toggle overrides; `None` inherits the grid's base config.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TogglePatch {
    pub qk_norm: Option<bool>,
    pub gating: Option<bool>,
    pub value_residual: Option<bool>,
    pub ln_scaling: Option<bool>,
}

impl TogglePatch {
    pub fn all(on: bool) -> Self {
        TogglePatch {
            qk_norm: Some(on),
            gating: Some(on),
            value_residual: Some(on),
            ln_scaling: Some(on),
        }
    }

    pub fn apply(&self, mut cfg: ModelConfig) -> ModelConfig {
        if let Some(v) = self.qk_norm {
            cfg.qk_norm = v;
        }
        if let Some(v) = self.gating {
            cfg.gating = v;
        }
        if let Some(v) = self.value_residual {
            cfg.value_residual = v;
        }
        if let Some(v) = self.ln_scaling {
            cfg.ln_scaling = v;
        }
        cfg
    }
}

/// Swaps the schedule family on both optimizer groups for one row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleOverride {
    pub kind: ScheduleKind,
    #[serde(default)]
    pub decay_fraction: Option<f64>,
    #[serde(default)]
    pub stable_fraction_of_peak: Option<f64>,
}

impl ScheduleOverride {
    fn apply(&self, plan: &mut StagePlan) {
        for s in [&mut plan.muon_schedule, &mut plan.adamw_schedule] {
            s.kind = self.kind;
            if let Some(df) = self.decay_fraction {
                s.decay_fraction = df;
            }
            if let Some(sf) = self.stable_fraction_of_peak {
                s.stable_fraction_of_peak = sf;
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridRow {
    pub name: String,
    #[serde(default)]
    pub toggles: TogglePatch,
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub schedule: Option<ScheduleOverride>,
}

#[derive(Debug, Clone)]
pub struct GridSpec {
    pub name: String,
    pub model: ModelConfig,
    pub stage: StagePlan,
    pub seeds: Vec<u64>,
    pub rows: Vec<GridRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RowResult {
    pub name: String,
    pub per_seed: Vec<Result<f64, String>>,
    pub mean: f64,
    pub std: f64,
    /// Mean final loss minus the baseline row's mean.
    pub delta: f64,
    pub delta_pct: f64,
    pub failed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridReport {
    pub grid_name: String,
    pub seeds: Vec<u64>,
    pub iterations: u64,
    pub tokens_per_run: u64,
    pub rows: Vec<RowResult>,
}

/// Trains one grid member to completion and returns its final train loss
/// (mean CE over the last ~10% of iterations) along with the trained model.
pub fn train_row<E: Element>(
    model_cfg: ModelConfig,
    optimizer: OptimizerKind,
    stage: &StagePlan,
    shards: &[TokenShard],
    seed: u64,
) -> Result<(f64, ModelParams<E>), TrainError> {
    let mut trainer = Trainer::<E>::new(model_cfg, optimizer, seed, None)?;
    let outcome = trainer.run_stage(stage, shards, &mut RunSinks::none(), 0)?;
    Ok((outcome.final_loss, trainer.model))
}

/// Runs every (row, seed) member. A member failure marks the row failed and
/// the grid continues. The first row is the baseline for deltas.
pub fn run_grid(spec: &GridSpec, shards: &[TokenShard]) -> Result<GridReport, TrainError> {
    if spec.rows.is_empty() {
        return Err(TrainError::Config("grid has no rows".into()));
    }
    if spec.seeds.is_empty() {
        return Err(TrainError::Config("grid has no seeds".into()));
    }
    let mut rows = Vec::with_capacity(spec.rows.len());
    let mut baseline_mean = f64::NAN;
    for (ri, row) in spec.rows.iter().enumerate() {
        let cfg = row.toggles.apply(spec.model.clone());
        let mut stage = spec.stage.clone();
        if let Some(ov) = &row.schedule {
            ov.apply(&mut stage);
        }
        let mut per_seed: Vec<Result<f64, String>> = Vec::with_capacity(spec.seeds.len());
        for &seed in &spec.seeds {
            let result = train_row::<f32>(cfg.clone(), row.optimizer, &stage, shards, seed)
                .map(|(loss, _)| loss)
                .map_err(|e| e.to_string());
            per_seed.push(result);
        }
        let ok: Vec<f64> = per_seed.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
        let failed = ok.len() != per_seed.len();
        let mean = if ok.is_empty() {
            f64::NAN
        } else {
            ok.iter().sum::<f64>() / ok.len() as f64
        };
        let std = if ok.len() < 2 {
            0.0
        } else {
            let var =
                ok.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (ok.len() - 1) as f64;
            var.sqrt()
        };
        if ri == 0 {
            baseline_mean = mean;
        }
        let delta = mean - baseline_mean;
        let delta_pct =
            if baseline_mean.is_finite() { 100.0 * delta / baseline_mean } else { f64::NAN };
        rows.push(RowResult { name: row.name.clone(), per_seed, mean, std, delta, delta_pct, failed });
    }
    Ok(GridReport {
        grid_name: spec.name.clone(),
        seeds: spec.seeds.clone(),
        iterations: spec.stage.iterations,
        tokens_per_run: spec.stage.iterations * spec.stage.tokens_per_iteration(),
        rows,
    })
}

impl GridReport {
    /// Fixed-width table with the loss / delta / delta-% column structure.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "grid: {} | seeds: {:?} | {} iterations | {} tokens per run\n",
            self.grid_name, self.seeds, self.iterations, self.tokens_per_run
        ));
        out.push_str(&format!(
            "{:<28} {:>12} {:>10} {:>9} {:>10}  {}\n",
            "row", "train loss", "Δ loss", "Δ %", "std", "status"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<28} {:>12.4} {:>+10.4} {:>+8.2}% {:>10.4}  {}\n",
                r.name,
                r.mean,
                r.delta,
                r.delta_pct,
                r.std,
                if r.failed { "FAILED" } else { "ok" }
            ));
        }
        out
    }
}

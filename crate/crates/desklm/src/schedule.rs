//! Learning-rate schedules: linear warmup + cosine decay, and
//! Warmup-Stable-Decay (WSD) with a `1 - sqrt(t)` decay profile.
//!
//! A schedule yields the learning rate for one optimizer group; groups with
//! different peaks use separate specs sharing the same shape parameters.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("step {step} out of range 0..={total}")]
    StepOutOfRange { step: u64, total: u64 },
    #[error("invalid schedule: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
    Wsd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    /// Floor as a fraction: cosine ends at `min_ratio * peak`, WSD decays to
    /// `min_ratio * stable_lr`.
    pub min_ratio: f64,
    /// WSD stable-phase LR as a fraction of the cosine peak.
    #[serde(default = "default_stable_fraction")]
    pub stable_fraction_of_peak: f64,
    /// Fraction of total steps spent in the final decay phase. 0 keeps the
    /// stable LR to the end (the "stable only" sweep point).
    #[serde(default = "default_decay_fraction")]
    pub decay_fraction: f64,
}

fn default_stable_fraction() -> f64 {
    0.55
}

fn default_decay_fraction() -> f64 {
    0.20
}

impl ScheduleSpec {
    pub fn cosine(peak_lr: f64, warmup_steps: u64, total_steps: u64, min_ratio: f64) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Cosine,
            peak_lr,
            warmup_steps,
            total_steps,
            min_ratio,
            stable_fraction_of_peak: default_stable_fraction(),
            decay_fraction: default_decay_fraction(),
        }
    }

    pub fn wsd(
        peak_lr: f64,
        warmup_steps: u64,
        total_steps: u64,
        min_ratio: f64,
        stable_fraction_of_peak: f64,
        decay_fraction: f64,
    ) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Wsd,
            peak_lr,
            warmup_steps,
            total_steps,
            min_ratio,
            stable_fraction_of_peak,
            decay_fraction,
        }
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(ScheduleError::Invalid(format!(
                "need 0 <= warmup ({}) < total ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.min_ratio > 0.0 && self.min_ratio <= 1.0) {
            return Err(ScheduleError::Invalid(format!(
                "min_ratio {} not in (0,1]",
                self.min_ratio
            )));
        }
        if !(0.0..1.0).contains(&self.decay_fraction) {
            return Err(ScheduleError::Invalid(format!(
                "decay_fraction {} not in [0,1)",
                self.decay_fraction
            )));
        }
        if self.stable_fraction_of_peak <= 0.0 || self.stable_fraction_of_peak > 1.0 {
            return Err(ScheduleError::Invalid(format!(
                "stable_fraction_of_peak {} not in (0,1]",
                self.stable_fraction_of_peak
            )));
        }
        if self.peak_lr <= 0.0 {
            return Err(ScheduleError::Invalid(format!("peak_lr {} must be > 0", self.peak_lr)));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> Result<f64, ScheduleError> {
        match self.kind {
            ScheduleKind::Cosine => cosine_lr(step, self),
            ScheduleKind::Wsd => wsd_lr(step, self),
        }
    }

    /// WSD stable-phase LR.
    pub fn stable_lr(&self) -> f64 {
        self.stable_fraction_of_peak * self.peak_lr
    }

    /// First step of the WSD decay phase.
    pub fn decay_start(&self) -> u64 {
        self.total_steps - (self.decay_fraction * self.total_steps as f64).round() as u64
    }
}

/// Linear warmup to `peak`, then cosine from `peak` down to
/// `min_ratio * peak` at `total_steps`.
pub fn cosine_lr(step: u64, spec: &ScheduleSpec) -> Result<f64, ScheduleError> {
    if step > spec.total_steps {
        return Err(ScheduleError::StepOutOfRange { step, total: spec.total_steps });
    }
    if step < spec.warmup_steps {
        return Ok(spec.peak_lr * step as f64 / spec.warmup_steps as f64);
    }
    let tau = (step - spec.warmup_steps) as f64 / (spec.total_steps - spec.warmup_steps) as f64;
    let cos_term = 0.5 * (1.0 + (std::f64::consts::PI * tau).cos());
    Ok(spec.peak_lr * (spec.min_ratio + (1.0 - spec.min_ratio) * cos_term))
}

/// Linear warmup to `stable_lr`, constant stable phase, then `1 - sqrt(t)`
/// decay from `stable_lr` down to `min_ratio * stable_lr`.
pub fn wsd_lr(step: u64, spec: &ScheduleSpec) -> Result<f64, ScheduleError> {
    if step > spec.total_steps {
        return Err(ScheduleError::StepOutOfRange { step, total: spec.total_steps });
    }
    let stable = spec.stable_lr();
    if step < spec.warmup_steps {
        return Ok(stable * step as f64 / spec.warmup_steps as f64);
    }
    let decay_start = spec.decay_start();
    if step < decay_start || decay_start == spec.total_steps {
        return Ok(stable);
    }
    let lr_min = spec.min_ratio * stable;
    let tau = (step - decay_start) as f64 / (spec.total_steps - decay_start) as f64;
    Ok(lr_min + (stable - lr_min) * (1.0 - tau.sqrt()))
}

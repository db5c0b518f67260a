//! Multi-stage training loop: gradient accumulation, per-group LR
//! schedules, JSONL metrics, atomic checkpoints, resume, post-hoc
//! checkpoint EMA, held-out evaluation, and the ablation grid runner.

pub mod checkpoint;

mod ablate;
mod ema;
mod optimizer;

pub use ablate::{
    run_grid, train_row, GridReport, GridRow, GridSpec, RowResult, ScheduleOverride, TogglePatch,
};
pub use checkpoint::{
    is_optimizer_tensor, load_checkpoint, save_checkpoint, CheckpointMeta, TensorMap,
    CHECKPOINT_VERSION,
};
pub use ema::posthoc_ema;
pub use optimizer::{Optimizer, OptimizerKind};

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::data::{BatchProducer, BatchStream, DataError, MixtureSpec, TokenShard};
use crate::model::{loss_ce_zloss, ModelConfig, ModelError, ModelParams};
use crate::optim::{mup_apply, MupSettings, OptimError};
use crate::schedule::{ScheduleError, ScheduleSpec};
use crate::tensor::{Element, Graph, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("parameter `{0}` has no gradient at update time")]
    MissingGradient(String),
    #[error("non-finite loss at iteration {iter}")]
    NonFiniteLoss { iter: u64 },
    #[error("invalid training config: {0}")]
    Config(String),
}

/// Default Z-loss coefficient.
pub const ZLOSS_WEIGHT: f64 = 1e-4;

/// One stage of the training plan: schedule, mixture, shapes, cadence.
#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    pub name: String,
    pub iterations: u64,
    pub batch_size: usize,
    pub context: usize,
    /// Micro-batches per optimizer update (updates happen every
    /// `grad_accum` iterations; accumulated gradients are averaged).
    pub grad_accum: u64,
    pub muon_schedule: ScheduleSpec,
    pub adamw_schedule: ScheduleSpec,
    pub mixture: MixtureSpec,
    /// Checkpoint cadence in iterations; 0 checkpoints only at stage end.
    pub checkpoint_every: u64,
    pub muon_weight_decay: f64,
    pub adamw_weight_decay: f64,
}

impl StagePlan {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.iterations == 0 {
            return Err(TrainError::Config(format!("stage `{}`: iterations == 0", self.name)));
        }
        if self.grad_accum == 0 {
            return Err(TrainError::Config(format!("stage `{}`: grad_accum == 0", self.name)));
        }
        if !self.iterations.is_multiple_of(self.grad_accum) {
            return Err(TrainError::Config(format!(
                "stage `{}`: iterations must be a multiple of grad_accum",
                self.name
            )));
        }
        if !self.checkpoint_every.is_multiple_of(self.grad_accum) {
            // checkpoints land on update boundaries so resume is exact
            return Err(TrainError::Config(format!(
                "stage `{}`: checkpoint_every must be a multiple of grad_accum",
                self.name
            )));
        }
        if self.batch_size == 0 || self.context == 0 {
            return Err(TrainError::Config(format!(
                "stage `{}`: batch_size and context must be positive",
                self.name
            )));
        }
        for (label, s) in [("muon", &self.muon_schedule), ("adamw", &self.adamw_schedule)] {
            s.validate().map_err(|e| {
                TrainError::Config(format!("stage `{}` {label} schedule: {e}", self.name))
            })?;
            if s.total_steps != self.iterations {
                return Err(TrainError::Config(format!(
                    "stage `{}` {label} schedule total_steps {} != iterations {}",
                    self.name, s.total_steps, self.iterations
                )));
            }
        }
        Ok(())
    }

    pub fn tokens_per_iteration(&self) -> u64 {
        (self.batch_size * self.context) as u64
    }
}

/// Append-only record of a run: config hash, seeds, stage list, artifact
/// paths. Mirrored as `manifest.jsonl` in the output directory.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub stages: Vec<String>,
    pub metrics_path: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    pub final_loss: f64,
    pub total_tokens: u64,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    /// Cross-entropy per iteration (z-term excluded).
    pub losses: Vec<f64>,
    pub zlosses: Vec<f64>,
    /// Mean CE over the last ~10% of iterations (smooths batch noise out
    /// of "final train loss" comparisons).
    pub final_loss: f64,
    pub checkpoints: Vec<PathBuf>,
}

pub struct Trainer<E: Element> {
    pub model: ModelParams<E>,
    pub opt: Optimizer<E>,
    pub zloss_weight: f64,
    pub lr_mult_muon: f64,
    pub lr_mult_adamw: f64,
    pub seed: u64,
    pub global_iter: u64,
    pub tokens_seen: u64,
}

/// Output sinks for a run; `none()` trains fully in memory.
#[derive(Default)]
pub struct RunSinks {
    pub out_dir: Option<PathBuf>,
    metrics: Option<std::io::BufWriter<std::fs::File>>,
    manifest: Option<std::io::BufWriter<std::fs::File>>,
    pub log_every: u64,
}

impl RunSinks {
    pub fn none() -> Self {
        RunSinks::default()
    }

    pub fn into_dir(out_dir: &Path, log_every: u64) -> Result<Self, TrainError> {
        std::fs::create_dir_all(out_dir)?;
        let metrics = std::fs::File::create(out_dir.join("metrics.jsonl"))?;
        let manifest = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(out_dir.join("manifest.jsonl"))?;
        Ok(RunSinks {
            out_dir: Some(out_dir.to_path_buf()),
            metrics: Some(std::io::BufWriter::new(metrics)),
            manifest: Some(std::io::BufWriter::new(manifest)),
            log_every: log_every.max(1),
        })
    }

    fn manifest_event(&mut self, event: serde_json::Value) -> Result<(), TrainError> {
        if let Some(m) = self.manifest.as_mut() {
            serde_json::to_writer(&mut *m, &event)
                .map_err(|e| TrainError::Config(format!("manifest write: {e}")))?;
            writeln!(m)?;
            m.flush()?;
        }
        Ok(())
    }
}

impl<E: Element> Trainer<E> {
    pub fn new(
        mut config: ModelConfig,
        kind: OptimizerKind,
        seed: u64,
        mup: Option<MupSettings>,
    ) -> Result<Self, TrainError> {
        let (lr_mult_muon, lr_mult_adamw) = match &mup {
            Some(settings) => {
                let o = mup_apply(settings);
                config.logit_scale = o.logit_scale;
                (o.hidden_lr_mult, o.adamw_lr_mult)
            }
            None => (1.0, 1.0),
        };
        let model = ModelParams::init(config, seed)?;
        let opt = Optimizer::new(&model, kind)?;
        Ok(Trainer {
            model,
            opt,
            zloss_weight: ZLOSS_WEIGHT,
            lr_mult_muon,
            lr_mult_adamw,
            seed,
            global_iter: 0,
            tokens_seen: 0,
        })
    }

    /// Runs one stage. `start_iter` is the stage-local iteration to resume
    /// from (0 for a fresh stage); the data stream is fast-forwarded to it.
    pub fn run_stage(
        &mut self,
        plan: &StagePlan,
        shards: &[TokenShard],
        sinks: &mut RunSinks,
        start_iter: u64,
    ) -> Result<StageOutcome, TrainError> {
        plan.validate()?;
        let (b, t) = (plan.batch_size, plan.context);
        let mut stream = BatchStream::new(shards.to_vec(), &plan.mixture)?;
        if start_iter > 0 {
            stream.skip_batches(start_iter, b, t);
        }
        let producer = BatchProducer::spawn(stream, b, t, BatchProducer::DEFAULT_CAPACITY);

        let mut losses = Vec::with_capacity((plan.iterations - start_iter) as usize);
        let mut zlosses = Vec::with_capacity(losses.capacity());
        let mut checkpoints = Vec::new();
        let mut wall = Instant::now();

        for iter in start_iter..plan.iterations {
            let batch = producer.next();
            let ids: Vec<usize> = batch.tokens.iter().map(|&x| x as usize).collect();
            let targets: Vec<usize> = batch.targets.iter().map(|&x| x as usize).collect();

            let g = Graph::new();
            // either path to a non-finite loss (op screening in debug, or a
            // plain inf/nan loss value) aborts with a diagnostic dump
            let forward_loss = (|| -> Result<(crate::tensor::Tensor<E>, f64), TrainError> {
                let out = self.model.forward(&g, &ids, b, t, false)?;
                let (total, z) = loss_ce_zloss(
                    &g,
                    &out.logits,
                    &targets,
                    &batch.loss_mask,
                    self.zloss_weight,
                )?;
                Ok((total, z.item().as_f64()))
            })();
            let (total, z_v) = match forward_loss {
                Ok(v) => v,
                Err(
                    TrainError::Tensor(TensorError::NonFinite { .. })
                    | TrainError::Model(ModelError::Tensor(TensorError::NonFinite { .. })),
                ) => {
                    self.dump_diagnostics(sinks, plan, iter, &losses)?;
                    return Err(TrainError::NonFiniteLoss { iter: self.global_iter + 1 });
                }
                Err(e) => return Err(e),
            };
            let total_v = total.item().as_f64();
            if !total_v.is_finite() {
                self.dump_diagnostics(sinks, plan, iter, &losses)?;
                return Err(TrainError::NonFiniteLoss { iter: self.global_iter + 1 });
            }
            g.backward(&total)?;
            losses.push(total_v - z_v);
            zlosses.push(z_v);

            let window_end = (iter + 1) % plan.grad_accum == 0;
            if window_end {
                if plan.grad_accum > 1 {
                    let inv = E::from_f64(1.0 / plan.grad_accum as f64);
                    for (_, p) in self.model.named_params() {
                        p.scale_grad(inv);
                    }
                }
                // LR evaluated at the first iteration of this window
                let window_start = iter + 1 - plan.grad_accum;
                let lr_muon = plan.muon_schedule.lr_at(window_start)? * self.lr_mult_muon;
                let lr_adamw = plan.adamw_schedule.lr_at(window_start)? * self.lr_mult_adamw;
                let grad_norm = self.opt.grad_norm(&self.model);
                self.opt.step(
                    &self.model,
                    lr_muon,
                    lr_adamw,
                    plan.muon_weight_decay,
                    plan.adamw_weight_decay,
                )?;
                self.model.zero_grads();

                if let Some(m) = sinks.metrics.as_mut() {
                    let done = iter + 1 - start_iter;
                    if done.is_multiple_of(sinks.log_every.max(1)) || iter + 1 == plan.iterations {
                        let rec = serde_json::json!({
                            "iter": self.global_iter + 1,
                            "tokens": self.tokens_seen + plan.tokens_per_iteration(),
                            "loss": losses.last().copied().unwrap_or(f64::NAN),
                            "zloss": z_v,
                            "lr_muon": lr_muon,
                            "lr_adamw": lr_adamw,
                            "grad_norm": grad_norm,
                            "wall_ms": wall.elapsed().as_secs_f64() * 1e3,
                        });
                        serde_json::to_writer(&mut *m, &rec)
                            .map_err(|e| TrainError::Config(format!("metrics write: {e}")))?;
                        writeln!(m)?;
                        wall = Instant::now();
                    }
                }
            }

            self.global_iter += 1;
            self.tokens_seen += plan.tokens_per_iteration();

            let stage_done = iter + 1 == plan.iterations;
            let cadence_hit =
                plan.checkpoint_every > 0 && (iter + 1) % plan.checkpoint_every == 0;
            if (cadence_hit || stage_done) && sinks.out_dir.is_some() {
                let path = self.write_checkpoint(sinks, plan)?;
                checkpoints.push(path);
            }
        }
        if let Some(m) = sinks.metrics.as_mut() {
            m.flush()?;
        }

        let n = losses.len();
        let tail = (n / 10).max(1).min(n.max(1));
        let final_loss = if losses.is_empty() {
            f64::NAN
        } else {
            losses[n - tail..].iter().sum::<f64>() / tail as f64
        };
        Ok(StageOutcome { losses, zlosses, final_loss, checkpoints })
    }

    fn write_checkpoint(
        &self,
        sinks: &mut RunSinks,
        plan: &StagePlan,
    ) -> Result<PathBuf, TrainError> {
        let dir = sinks.out_dir.clone().expect("caller checked out_dir");
        let path = dir.join(format!("ckpt_{:08}.bin", self.global_iter));
        let meta = CheckpointMeta {
            format_version: CHECKPOINT_VERSION,
            config: self.model.config.clone(),
            step: self.global_iter,
            stage: plan.name.clone(),
            rng_seed: self.seed,
        };
        let mut tensors = self.model_tensor_map();
        tensors.extend(self.opt.state_tensors(&self.model));
        save_checkpoint(&path, &meta, &tensors)?;
        sinks.manifest_event(serde_json::json!({
            "event": "checkpoint",
            "path": path,
            "iter": self.global_iter,
            "stage": plan.name,
        }))?;
        Ok(path)
    }

    pub fn model_tensor_map(&self) -> TensorMap {
        self.model
            .named_params()
            .into_iter()
            .map(|(name, t)| {
                let data: Vec<f32> = t.data().iter().map(|v| v.as_f64() as f32).collect();
                (name, (t.shape().to_vec(), data))
            })
            .collect()
    }

    fn dump_diagnostics(
        &self,
        sinks: &RunSinks,
        plan: &StagePlan,
        iter: u64,
        losses: &[f64],
    ) -> Result<(), TrainError> {
        let Some(dir) = sinks.out_dir.as_ref() else { return Ok(()) };
        let tail: Vec<f64> = losses.iter().rev().take(50).rev().copied().collect();
        let param_rms: Vec<serde_json::Value> = self
            .model
            .named_params()
            .iter()
            .map(|(n, t)| {
                let ms = t.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>()
                    / t.numel() as f64;
                serde_json::json!({"name": n, "rms": ms.sqrt()})
            })
            .collect();
        let dump = serde_json::json!({
            "stage": plan.name,
            "stage_iter": iter,
            "global_iter": self.global_iter,
            "recent_losses": tail,
            "grad_norm": self.opt.grad_norm(&self.model),
            "param_rms": param_rms,
        });
        std::fs::write(
            dir.join("numeric_failure_dump.json"),
            serde_json::to_string_pretty(&dump)
                .map_err(|e| TrainError::Config(format!("dump: {e}")))?,
        )?;
        Ok(())
    }
}

/// Full multi-stage run with optional resume from a checkpoint file.
#[allow(clippy::too_many_arguments)]
pub fn train<E: Element>(
    model_cfg: ModelConfig,
    kind: OptimizerKind,
    stages: &[StagePlan],
    shards: &[TokenShard],
    seed: u64,
    mup: Option<MupSettings>,
    out_dir: Option<&Path>,
    resume: Option<&Path>,
    log_every: u64,
) -> Result<RunManifest, TrainError> {
    if stages.is_empty() {
        return Err(TrainError::Config("no stages".into()));
    }
    for s in stages {
        s.validate()?;
    }
    let config_hash = {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(
            serde_json::to_vec(&model_cfg)
                .map_err(|e| TrainError::Config(format!("hash: {e}")))?,
        );
        h.update(seed.to_le_bytes());
        for s in stages {
            h.update(s.name.as_bytes());
            h.update(s.iterations.to_le_bytes());
            h.update((s.batch_size as u64).to_le_bytes());
            h.update((s.context as u64).to_le_bytes());
        }
        format!("{:x}", h.finalize())
    };

    let mut trainer = Trainer::<E>::new(model_cfg.clone(), kind, seed, mup)?;
    let mut sinks = match out_dir {
        Some(dir) => RunSinks::into_dir(dir, log_every)?,
        None => RunSinks::none(),
    };
    sinks.manifest_event(serde_json::json!({
        "event": "start",
        "config_hash": config_hash,
        "seed": seed,
        "stages": stages.iter().map(|s| s.name.clone()).collect::<Vec<_>>(),
    }))?;

    // resume bookkeeping: completed iterations determine the stage cursor
    let mut resume_step = 0u64;
    if let Some(path) = resume {
        let (meta, tensors) = load_checkpoint(path)?;
        if meta.config != trainer.model.config {
            return Err(TrainError::Model(ModelError::CheckpointMismatch(
                "resume config differs from run config".into(),
            )));
        }
        if meta.rng_seed != seed {
            return Err(TrainError::Config(format!(
                "resume seed {} != run seed {seed}",
                meta.rng_seed
            )));
        }
        let model_tensors: TensorMap = tensors
            .iter()
            .filter(|(n, _)| !is_optimizer_tensor(n))
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect();
        trainer.model.load_tensor_map(&model_tensors)?;
        trainer.opt.load_state_tensors(&tensors)?;
        resume_step = meta.step;
        trainer.global_iter = meta.step;
        let mut remaining = meta.step;
        for s in stages {
            let done = remaining.min(s.iterations);
            trainer.tokens_seen += done * s.tokens_per_iteration();
            remaining -= done;
        }
        if remaining > 0 {
            return Err(TrainError::Config(format!(
                "checkpoint step {} exceeds the plan's total iterations",
                meta.step
            )));
        }
    }

    let mut checkpoints = Vec::new();
    let mut final_loss = f64::NAN;
    let mut stage_start_global = 0u64;
    for plan in stages {
        let stage_end_global = stage_start_global + plan.iterations;
        if resume_step >= stage_end_global {
            stage_start_global = stage_end_global;
            continue; // stage fully covered by the checkpoint
        }
        let local_start = resume_step.saturating_sub(stage_start_global);
        let outcome = trainer.run_stage(plan, shards, &mut sinks, local_start)?;
        checkpoints.extend(outcome.checkpoints.iter().cloned());
        final_loss = outcome.final_loss;
        sinks.manifest_event(serde_json::json!({
            "event": "stage_complete",
            "stage": plan.name,
            "final_loss": outcome.final_loss,
        }))?;
        resume_step = stage_end_global;
        stage_start_global = stage_end_global;
    }

    let manifest = RunManifest {
        config_hash,
        seed,
        stages: stages.iter().map(|s| s.name.clone()).collect(),
        metrics_path: sinks.out_dir.as_ref().map(|d| d.join("metrics.jsonl")),
        checkpoints,
        final_loss,
        total_tokens: trainer.tokens_seen,
    };
    sinks.manifest_event(serde_json::json!({
        "event": "complete",
        "final_loss": final_loss,
        "total_tokens": trainer.tokens_seen,
    }))?;
    Ok(manifest)
}

/// Deterministic held-out mean cross-entropy and perplexity; no updates.
pub fn eval_loss<E: Element>(
    model: &ModelParams<E>,
    shards: &[TokenShard],
    t: usize,
    n_batches: usize,
    b: usize,
    seed: u64,
) -> Result<(f64, f64), TrainError> {
    if shards.iter().all(|s| s.doc_count() == 0) {
        return Err(TrainError::Data(DataError::NoEligibleDocs));
    }
    let names: Vec<&str> = shards.iter().map(|s| s.source_name.as_str()).collect();
    let mixture = MixtureSpec::uniform(&names, seed);
    let mut stream = BatchStream::new(shards.to_vec(), &mixture)?;
    // forward-only: suspend recording by clearing requires_grad
    let params = model.named_params();
    for (_, p) in &params {
        p.set_requires_grad(false);
    }
    let mut total = 0.0;
    let result = (|| -> Result<f64, TrainError> {
        for _ in 0..n_batches {
            let batch = stream.next_batch(b, t);
            let ids: Vec<usize> = batch.tokens.iter().map(|&x| x as usize).collect();
            let targets: Vec<usize> = batch.targets.iter().map(|&x| x as usize).collect();
            let g = Graph::new();
            let out = model.forward(&g, &ids, b, t, false)?;
            let (loss, z) = loss_ce_zloss(&g, &out.logits, &targets, &batch.loss_mask, 0.0)?;
            total += loss.item().as_f64() - z.item().as_f64();
        }
        Ok(total / n_batches.max(1) as f64)
    })();
    for (_, p) in &params {
        p.set_requires_grad(true);
    }
    let mean = result?;
    Ok((mean, mean.exp()))
}

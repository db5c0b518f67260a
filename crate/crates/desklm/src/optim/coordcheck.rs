//! µP coordinate check: trains width-scaled copies of a small model on the
//! same data and records residual-stream RMS per layer at init and after a
//! few optimizer steps. Under µP the profiles should be width-stable.

use super::MupSettings;
use crate::data::{BatchStream, MixtureSpec, TokenShard};
use crate::schedule::ScheduleSpec;
use crate::trainer::{OptimizerKind, RunSinks, StagePlan, TrainError, Trainer};
use crate::model::ModelConfig;
use crate::tensor::Graph;

#[derive(Debug, Clone)]
pub struct CoordProbe {
    /// 1-based layer index.
    pub layer: usize,
    /// "init" or "trained".
    pub stage: &'static str,
    /// Residual RMS per width, ordered as the input widths.
    pub rms_per_width: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CoordCheckReport {
    pub widths: Vec<usize>,
    pub mup_enabled: bool,
    pub steps: usize,
    pub probes: Vec<CoordProbe>,
}

impl CoordCheckReport {
    /// max/min RMS ratio across widths for one probe point.
    pub fn probe_ratio(p: &CoordProbe) -> f64 {
        let (mut lo, mut hi) = (f64::MAX, 0.0f64);
        for &v in &p.rms_per_width {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if lo == 0.0 {
            f64::INFINITY
        } else {
            hi / lo
        }
    }

    /// Worst ratio over all probe points.
    pub fn max_ratio(&self) -> f64 {
        self.probes.iter().map(Self::probe_ratio).fold(1.0, f64::max)
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "coordinate check | widths {:?} | {} steps | mup {}\n",
            self.widths,
            self.steps,
            if self.mup_enabled { "on" } else { "off" }
        );
        for p in &self.probes {
            out.push_str(&format!(
                "layer {:>2} {:>8}: {:?} ratio {:.3}\n",
                p.layer,
                p.stage,
                p.rms_per_width.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>(),
                Self::probe_ratio(p),
            ));
        }
        out
    }
}

const HEAD_DIM: usize = 16;
const LAYERS: usize = 2;
const BATCH: usize = 4;
const CONTEXT: usize = 32;

fn width_config(width: usize, vocab: usize) -> ModelConfig {
    let n_heads = width / HEAD_DIM;
    ModelConfig {
        d_model: width,
        n_layers: LAYERS,
        n_heads,
        n_kv_heads: (n_heads / 2).max(1),
        head_dim: HEAD_DIM,
        ffn_dim: 2 * width,
        vocab_size: vocab,
        rope_theta: 10_000.0,
        max_context: CONTEXT,
        qk_norm: true,
        gating: true,
        value_residual: true,
        ln_scaling: true,
        embed_init_std: 0.02,
        logit_scale: 1.0,
    }
}

fn residual_rms(trainer: &Trainer<f32>, batch: &crate::data::PackedBatch) -> Result<Vec<f64>, TrainError> {
    let ids: Vec<usize> = batch.tokens.iter().map(|&x| x as usize).collect();
    let params = trainer.model.named_params();
    for (_, p) in &params {
        p.set_requires_grad(false);
    }
    let g = Graph::new();
    let out = trainer.model.forward(&g, &ids, batch.b, batch.t, true);
    for (_, p) in &params {
        p.set_requires_grad(true);
    }
    let trace = out?.trace.expect("trace requested");
    Ok(trace
        .layers
        .iter()
        .map(|l| {
            (l.residual.iter().map(|v| v * v).sum::<f64>() / l.residual.len() as f64).sqrt()
        })
        .collect())
}

/// Runs the check: same seed and data at every width; constant LRs
/// (NorMuon 0.0235 / AdamW 0.007 before µP multipliers) for `steps`
/// optimizer updates.
pub fn coordinate_check(
    widths: &[usize],
    steps: usize,
    base_width: usize,
    mup_enabled: bool,
    shards: &[TokenShard],
    seed: u64,
) -> Result<CoordCheckReport, TrainError> {
    assert!(!widths.is_empty(), "need at least one width");
    let vocab = shards.first().map(|s| s.vocab_size as usize).unwrap_or(258);
    // constant-LR schedule: warmup 0, stable to the end
    let total = (steps as u64).max(1);
    let schedule = |peak: f64| ScheduleSpec::wsd(peak, 0, total, 0.5, 1.0, 0.0);
    let names: Vec<&str> = shards.iter().map(|s| s.source_name.as_str()).collect();

    let mut per_width: Vec<(Vec<f64>, Vec<f64>)> = Vec::new(); // (init, trained)
    for &width in widths {
        let cfg = width_config(width, vocab);
        let mup = mup_enabled.then_some(MupSettings { base_width, width });
        let mut trainer = Trainer::<f32>::new(cfg, OptimizerKind::NorMuonCwd, seed, mup)?;
        let plan = StagePlan {
            name: format!("coordcheck-w{width}"),
            iterations: total,
            batch_size: BATCH,
            context: CONTEXT,
            grad_accum: 1,
            muon_schedule: schedule(0.0235),
            adamw_schedule: schedule(0.007),
            mixture: MixtureSpec::uniform(&names, seed),
            checkpoint_every: 0,
            muon_weight_decay: 0.0,
            adamw_weight_decay: 0.0,
        };
        // identical probe batch across widths
        let mut probe_stream = BatchStream::new(shards.to_vec(), &plan.mixture)?;
        let probe_batch = probe_stream.next_batch(BATCH, CONTEXT);

        let init = residual_rms(&trainer, &probe_batch)?;
        trainer.run_stage(&plan, shards, &mut RunSinks::none(), 0)?;
        let trained = residual_rms(&trainer, &probe_batch)?;
        per_width.push((init, trained));
    }

    let mut probes = Vec::new();
    for layer in 0..LAYERS {
        for (si, stage) in ["init", "trained"].into_iter().enumerate() {
            let rms_per_width: Vec<f64> = per_width
                .iter()
                .map(|(init, trained)| if si == 0 { init[layer] } else { trained[layer] })
                .collect();
            probes.push(CoordProbe { layer: layer + 1, stage, rms_per_width });
        }
    }
    Ok(CoordCheckReport { widths: widths.to_vec(), mup_enabled, steps, probes })
}

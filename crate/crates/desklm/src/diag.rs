//! Activation-statistics instrumentation: per-layer kurtosis, attention
//! sink mass, and logit-magnitude statistics over frozen models.

use serde::Serialize;
use thiserror::Error;

use crate::data::PackedBatch;
use crate::model::{ModelError, ModelParams};
use crate::tensor::{Element, Graph};

#[derive(Debug, Error)]
pub enum DiagError {
    #[error("need at least 4 samples for kurtosis, got {0}")]
    TooFewSamples(usize),
    #[error("kurtosis undefined: sample variance is zero")]
    ZeroVariance,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("forward trace unavailable")]
    TraceUnavailable,
}

/// Which activations feed the per-layer kurtosis profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Probe {
    AttentionLogits,
    ResidualStream,
}

/// Moments of one layer's probed activations. Kurtosis uses the non-excess
/// convention (normal = 3).
#[derive(Debug, Clone, Serialize)]
pub struct LayerStats {
    /// 1-based layer index.
    pub layer: usize,
    pub kurtosis: f64,
    pub mean: f64,
    pub variance: f64,
    pub sample_count: usize,
}

/// Fourth central moment over squared variance, non-excess convention.
pub fn kurtosis(samples: &[f64]) -> Result<f64, DiagError> {
    if samples.len() < 4 {
        return Err(DiagError::TooFewSamples(samples.len()));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let m2 = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    if m2 == 0.0 {
        return Err(DiagError::ZeroVariance);
    }
    let m4 = samples.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    Ok(m4 / (m2 * m2))
}

fn stats_for(layer: usize, samples: &[f64]) -> Result<LayerStats, DiagError> {
    let k = kurtosis(samples)?;
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let variance = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Ok(LayerStats { layer, kurtosis: k, mean, variance, sample_count: samples.len() })
}

fn traced_forward<E: Element>(
    model: &ModelParams<E>,
    batch: &PackedBatch,
) -> Result<crate::model::ForwardTrace, DiagError> {
    let ids: Vec<usize> = batch.tokens.iter().map(|&x| x as usize).collect();
    let params = model.named_params();
    for (_, p) in &params {
        p.set_requires_grad(false);
    }
    let g = Graph::new();
    let out = model.forward(&g, &ids, batch.b, batch.t, true);
    for (_, p) in &params {
        p.set_requires_grad(true);
    }
    out?.trace.ok_or(DiagError::TraceUnavailable)
}

/// Per-layer kurtosis of the chosen probe over all given batches.
pub fn kurtosis_profile<E: Element>(
    model: &ModelParams<E>,
    batches: &[PackedBatch],
    probe: Probe,
) -> Result<Vec<LayerStats>, DiagError> {
    let n_layers = model.config.n_layers;
    let mut samples: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
    for batch in batches {
        let trace = traced_forward(model, batch)?;
        for (li, layer) in trace.layers.iter().enumerate() {
            match probe {
                Probe::AttentionLogits => {
                    for head in &layer.attn_logits {
                        samples[li].extend_from_slice(head);
                    }
                }
                Probe::ResidualStream => samples[li].extend_from_slice(&layer.residual),
            }
        }
    }
    samples
        .iter()
        .enumerate()
        .map(|(li, s)| stats_for(li + 1, s))
        .collect()
}

/// Mean attention probability assigned to position 0 by query positions
/// t >= 1, per layer and head.
pub fn attention_sink_mass<E: Element>(
    model: &ModelParams<E>,
    batches: &[PackedBatch],
) -> Result<Vec<Vec<f64>>, DiagError> {
    let n_layers = model.config.n_layers;
    let n_heads = model.config.n_heads;
    let mut sums = vec![vec![0.0f64; n_heads]; n_layers];
    let mut counts = vec![vec![0usize; n_heads]; n_layers];
    for batch in batches {
        let trace = traced_forward(model, batch)?;
        for (li, layer) in trace.layers.iter().enumerate() {
            for (hi, probs) in layer.sink_probs.iter().enumerate() {
                sums[li][hi] += probs.iter().sum::<f64>();
                counts[li][hi] += probs.len();
            }
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(row, crow)| {
            row.into_iter()
                .zip(crow)
                .map(|(s, c)| if c == 0 { 0.0 } else { s / c as f64 })
                .collect()
        })
        .collect())
}

/// Mean attention mass on position 0 from a single (T,T) probability
/// matrix, averaging over query positions t >= 1.
pub fn sink_mass_from_probs(probs: &[f64], t: usize) -> f64 {
    assert_eq!(probs.len(), t * t);
    assert!(t >= 2, "sink mass needs at least two positions");
    (1..t).map(|i| probs[i * t]).sum::<f64>() / (t - 1) as f64
}

#[derive(Debug, Clone, Serialize)]
pub struct LogitStats {
    /// Max |attention logit| per layer (unmasked entries).
    pub max_abs_attn_logit: Vec<f64>,
    pub max_abs_output_logit: f64,
    /// Mean of log²(Σ exp z) over all output positions.
    pub mean_sq_log_z: f64,
}

pub fn logit_stats<E: Element>(
    model: &ModelParams<E>,
    batches: &[PackedBatch],
) -> Result<LogitStats, DiagError> {
    let n_layers = model.config.n_layers;
    let v = model.config.vocab_size;
    let mut max_attn = vec![0.0f64; n_layers];
    let mut max_out = 0.0f64;
    let mut z_sum = 0.0f64;
    let mut z_count = 0usize;
    for batch in batches {
        let trace = traced_forward(model, batch)?;
        for (li, layer) in trace.layers.iter().enumerate() {
            for head in &layer.attn_logits {
                for &l in head {
                    max_attn[li] = max_attn[li].max(l.abs());
                }
            }
        }
        for row in trace.logits.chunks(v) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            max_out = max_out.max(row.iter().fold(0.0f64, |a, &x| a.max(x.abs())));
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            z_sum += lse * lse;
            z_count += 1;
        }
    }
    Ok(LogitStats {
        max_abs_attn_logit: max_attn,
        max_abs_output_logit: max_out,
        mean_sq_log_z: if z_count == 0 { 0.0 } else { z_sum / z_count as f64 },
    })
}

/// JSON-lines report: a header record naming the conventions, then one
/// record per (probe, layer) and per (layer, head) statistic.
pub fn diag_report<E: Element>(
    model: &ModelParams<E>,
    batches: &[PackedBatch],
) -> Result<Vec<serde_json::Value>, DiagError> {
    let mut records = vec![serde_json::json!({
        "record": "header",
        "kurtosis_convention": "non-excess (normal = 3)",
        "probes": ["attention_logits", "residual_stream"],
        "n_layers": model.config.n_layers,
        "n_heads": model.config.n_heads,
        "batches": batches.len(),
    })];
    for probe in [Probe::AttentionLogits, Probe::ResidualStream] {
        for s in kurtosis_profile(model, batches, probe)? {
            records.push(serde_json::json!({
                "record": "kurtosis",
                "probe": probe,
                "layer": s.layer,
                "kurtosis": s.kurtosis,
                "mean": s.mean,
                "variance": s.variance,
                "sample_count": s.sample_count,
            }));
        }
    }
    for (li, heads) in attention_sink_mass(model, batches)?.iter().enumerate() {
        for (hi, &mass) in heads.iter().enumerate() {
            records.push(serde_json::json!({
                "record": "sink_mass",
                "layer": li + 1,
                "head": hi,
                "mass": mass,
            }));
        }
    }
    let ls = logit_stats(model, batches)?;
    for (li, &m) in ls.max_abs_attn_logit.iter().enumerate() {
        records.push(serde_json::json!({
            "record": "max_abs_attn_logit",
            "layer": li + 1,
            "value": m,
        }));
    }
    records.push(serde_json::json!({
        "record": "output_logits",
        "max_abs_output_logit": ls.max_abs_output_logit,
        "mean_sq_log_z": ls.mean_sq_log_z,
    }));
    Ok(records)
}

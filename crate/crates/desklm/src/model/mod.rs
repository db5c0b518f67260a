//! Decoder-only transformer with four switchable interventions:
//! QK-norm attention, per-head output gating, normalized value residuals,
//! and depth-scaled RMSNorm, over a GQA/RoPE/SwiGLU base stack, trained
//! with cross-entropy plus Z-loss.

mod config;
mod params;

pub use config::{ConfigError, ModelConfig};
pub use params::{BlockParams, ModelParams};

use thiserror::Error;

use crate::tensor::{Element, Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("context length {t} exceeds max_context {max}")]
    ContextOverflow { t: usize, max: usize },
    #[error("token id {id} out of range for vocab {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("all positions are masked out of the loss")]
    AllPositionsMasked,
    #[error("checkpoint does not match this model: {0}")]
    CheckpointMismatch(String),
}

/// Numerator epsilon keeping Eq-style value-residual mixing defined at
/// α₁ = α₂ = 0.
const VR_EPS: f64 = 1e-8;

// ── rotary position embeddings ──────────────────────────────────────────

/// cos/sin tables for the interleaved-pair rotation: entry (t, 2i) and
/// (t, 2i+1) both hold the angle `pos_t · theta^(-2i/d_h)`.
pub fn rope_tables(positions: &[usize], d_h: usize, theta: f64) -> (Vec<f64>, Vec<f64>) {
    assert!(d_h.is_multiple_of(2), "head_dim must be even");
    let mut cos = vec![0.0; positions.len() * d_h];
    let mut sin = vec![0.0; positions.len() * d_h];
    for (ti, &pos) in positions.iter().enumerate() {
        for i in 0..d_h / 2 {
            let freq = theta.powf(-((2 * i) as f64) / d_h as f64);
            let angle = pos as f64 * freq;
            let (s, c) = angle.sin_cos();
            cos[ti * d_h + 2 * i] = c;
            cos[ti * d_h + 2 * i + 1] = c;
            sin[ti * d_h + 2 * i] = s;
            sin[ti * d_h + 2 * i + 1] = s;
        }
    }
    (cos, sin)
}

struct RopeConsts<E: Element> {
    cos: Tensor<E>,
    sin: Tensor<E>,
}

impl<E: Element> RopeConsts<E> {
    fn new(positions: &[usize], d_h: usize, theta: f64) -> Self {
        let (cos, sin) = rope_tables(positions, d_h, theta);
        let shape = vec![positions.len(), d_h];
        let conv = |v: Vec<f64>| {
            Tensor::from_vec(shape.clone(), v.into_iter().map(E::from_f64).collect()).unwrap()
        };
        RopeConsts { cos: conv(cos), sin: conv(sin) }
    }

    fn apply(&self, g: &Graph<E>, x: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        let a = g.mul(x, &self.cos)?;
        let b = g.mul(&g.rotate_half(x)?, &self.sin)?;
        g.add(&a, &b)
    }
}

/// Rotates each (x_{2i}, x_{2i+1}) pair of a (T, d_h) tensor by
/// `pos_t · theta^(-2i/d_h)`.
pub fn rope_apply<E: Element>(
    g: &Graph<E>,
    x: &Tensor<E>,
    positions: &[usize],
    theta: f64,
) -> Result<Tensor<E>, ModelError> {
    let d_h = x.shape().last().copied().unwrap_or(0);
    if d_h == 0 || d_h % 2 != 0 {
        return Err(ModelError::Tensor(TensorError::ShapeMismatch {
            op: "rope_apply",
            details: format!("head dim must be even and nonzero, got {:?}", x.shape()),
        }));
    }
    Ok(RopeConsts::new(positions, d_h, theta).apply(g, x)?)
}

// ── block-level operations ──────────────────────────────────────────────

/// RMSNorm with gain, optionally scaled by `1/sqrt(layer_index)`
/// (`layer_index` is 1-based).
pub fn norm_scaled<E: Element>(
    g: &Graph<E>,
    x: &Tensor<E>,
    gain: &Tensor<E>,
    layer_index: usize,
    ln_scaling: bool,
) -> Result<Tensor<E>, TensorError> {
    let normed = g.mul(&g.rms_normalize(x)?, gain)?;
    if ln_scaling && layer_index > 1 {
        g.scale(&normed, 1.0 / (layer_index as f64).sqrt())
    } else {
        Ok(normed)
    }
}

/// Single-head causal attention on (T, d_h) tensors.
///
/// With `gamma` present, queries and keys are RMS-normalized per token and
/// the logits are `γ·(q̂·k̂ᵀ)`, which bounds |logit| by γ·d_h; without it,
/// plain `q·kᵀ/sqrt(d_h)` scaling applies.
pub fn qk_norm_attention<E: Element>(
    g: &Graph<E>,
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    gamma: Option<&Tensor<E>>,
) -> Result<AttentionHead<E>, TensorError> {
    let d_h = q.shape()[1];
    let logits = match gamma {
        Some(gamma) => {
            let qn = g.rms_normalize(q)?;
            let kn = g.rms_normalize(k)?;
            g.mul(&g.matmul(&qn, &g.transpose(&kn)?)?, gamma)?
        }
        None => g.scale(&g.matmul(q, &g.transpose(k)?)?, 1.0 / (d_h as f64).sqrt())?,
    };
    let probs = g.causal_softmax(&logits)?;
    let out = g.matmul(&probs, v)?;
    Ok(AttentionHead { out, logits, probs })
}

pub struct AttentionHead<E: Element> {
    pub out: Tensor<E>,
    pub logits: Tensor<E>,
    pub probs: Tensor<E>,
}

/// Per-head sigmoid gate: `2·σ(g_h) ⊙ head`, identity at zero logits.
pub fn gate_heads<E: Element>(
    g: &Graph<E>,
    head_out: &Tensor<E>,
    gate_logits: &Tensor<E>,
) -> Result<Tensor<E>, TensorError> {
    let mult = g.scale(&g.sigmoid(gate_logits)?, 2.0)?;
    g.mul(head_out, &mult)
}

/// Norm-preserving mix of the local and first-layer value projections:
/// `s · (α₁·V_local + α₂·V_first) / sqrt(α₁² + α₂² + ε)`.
pub fn mix_value_residual<E: Element>(
    g: &Graph<E>,
    v_local: &Tensor<E>,
    v_first: &Tensor<E>,
    s: &Tensor<E>,
    alpha1: &Tensor<E>,
    alpha2: &Tensor<E>,
) -> Result<Tensor<E>, TensorError> {
    let num = g.add(&g.mul(v_local, alpha1)?, &g.mul(v_first, alpha2)?)?;
    let sq = g.add(&g.square(alpha1)?, &g.square(alpha2)?)?;
    let denom = g.sqrt(&g.add(&sq, &Tensor::scalar(E::from_f64(VR_EPS)))?)?;
    g.mul(&num, &g.div(s, &denom)?)
}

/// SwiGLU feed-forward: `(silu(x·W1ᵀ) ⊙ (x·W3ᵀ))·W2ᵀ` with (out, in) weights.
pub fn swiglu_ffn<E: Element>(
    g: &Graph<E>,
    x: &Tensor<E>,
    w1: &Tensor<E>,
    w2: &Tensor<E>,
    w3: &Tensor<E>,
) -> Result<Tensor<E>, TensorError> {
    let a = g.silu(&g.matmul(x, &g.transpose(w1)?)?)?;
    let b = g.matmul(x, &g.transpose(w3)?)?;
    g.matmul(&g.mul(&a, &b)?, &g.transpose(w2)?)
}

// ── forward trace ───────────────────────────────────────────────────────

/// Per-layer activations retained for diagnostics (f64 regardless of the
/// compute type).
pub struct LayerTrace {
    /// Unmasked attention logits per head, flattened across the batch.
    pub attn_logits: Vec<Vec<f64>>,
    /// Attention probability on position 0 for every query position t >= 1,
    /// per head, flattened across the batch.
    pub sink_probs: Vec<Vec<f64>>,
    /// Residual stream after the block (B·T·d values).
    pub residual: Vec<f64>,
}

pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
    /// Final output logits (B·T·V values).
    pub logits: Vec<f64>,
    pub d_model: usize,
}

pub struct ForwardOutput<E: Element> {
    /// (B, T, V) logits.
    pub logits: Tensor<E>,
    pub trace: Option<ForwardTrace>,
}

impl<E: Element> ModelParams<E> {
    /// Full forward pass over a (B, T) token batch (row-major ids).
    pub fn forward(
        &self,
        g: &Graph<E>,
        ids: &[usize],
        b: usize,
        t: usize,
        want_trace: bool,
    ) -> Result<ForwardOutput<E>, ModelError> {
        let c = &self.config;
        assert_eq!(ids.len(), b * t, "ids must be a (B,T) slab");
        if t > c.max_context {
            return Err(ModelError::ContextOverflow { t, max: c.max_context });
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= c.vocab_size) {
            return Err(ModelError::TokenOutOfRange { id, vocab: c.vocab_size });
        }
        let d_h = c.head_dim;
        let group = c.gqa_group();
        let positions: Vec<usize> = (0..t).collect();
        let rope = RopeConsts::new(&positions, d_h, c.rope_theta);

        let mut x = g.embed_lookup(&self.embedding, ids)?; // (N, d)
        let mut v_first: Option<Tensor<E>> = None;
        let mut trace_layers = Vec::new();

        for (li, layer) in self.layers.iter().enumerate() {
            let lnum = li + 1;
            let h = norm_scaled(g, &x, &layer.attn_norm_gain, lnum, c.ln_scaling)?;
            let q_all = g.matmul(&h, &g.transpose(&layer.w_q)?)?; // (N, n_h*d_h)
            let k_all = g.matmul(&h, &g.transpose(&layer.w_k)?)?; // (N, kv_dim)
            let v_all = g.matmul(&h, &g.transpose(&layer.w_v)?)?; // (N, kv_dim)
            let gates_all = if c.gating {
                // gate logits from the block's normalized input
                Some(g.matmul(&h, &g.transpose(&layer.gate)?)?) // (N, n_h)
            } else {
                None
            };
            if v_first.is_none() {
                v_first = Some(v_all.clone());
            }
            // value residual mixes pre-repetition KV-head projections
            let v_mix = if c.value_residual {
                mix_value_residual(
                    g,
                    &v_all,
                    v_first.as_ref().unwrap(),
                    &layer.vr_scale,
                    &layer.vr_alpha1,
                    &layer.vr_alpha2,
                )?
            } else {
                v_all
            };

            let mut head_logit_trace: Vec<Vec<f64>> =
                (0..c.n_heads).map(|_| Vec::new()).collect();
            let mut head_sink_trace: Vec<Vec<f64>> =
                (0..c.n_heads).map(|_| Vec::new()).collect();
            let mut row_blocks = Vec::with_capacity(b);
            for bi in 0..b {
                let q_b = g.slice(&q_all, 0, bi * t, t)?;
                let k_b = g.slice(&k_all, 0, bi * t, t)?;
                let v_b = g.slice(&v_mix, 0, bi * t, t)?;
                let gates_b = match &gates_all {
                    Some(ga) => Some(g.slice(ga, 0, bi * t, t)?),
                    None => None,
                };
                // per-KV-head K (roped + optionally normalized) and V
                let mut kv_cache = Vec::with_capacity(c.n_kv_heads);
                for kh in 0..c.n_kv_heads {
                    let k_h = rope.apply(g, &g.slice(&k_b, 1, kh * d_h, d_h)?)?;
                    let v_h = g.slice(&v_b, 1, kh * d_h, d_h)?;
                    kv_cache.push((k_h, v_h));
                }
                let mut heads = Vec::with_capacity(c.n_heads);
                for hh in 0..c.n_heads {
                    let (k_h, v_h) = &kv_cache[hh / group];
                    let q_h = rope.apply(g, &g.slice(&q_b, 1, hh * d_h, d_h)?)?;
                    let gamma = c.qk_norm.then_some(&layer.qk_gain);
                    let att = qk_norm_attention(g, &q_h, k_h, v_h, gamma)?;
                    let out = match &gates_b {
                        Some(gb) => {
                            let gate_col = g.slice(gb, 1, hh, 1)?; // (T,1)
                            gate_heads(g, &att.out, &gate_col)?
                        }
                        None => att.out,
                    };
                    if want_trace {
                        let ld = att.logits.data();
                        let pd = att.probs.data();
                        for i in 0..t {
                            for j in 0..=i {
                                head_logit_trace[hh].push(ld[i * t + j].as_f64());
                            }
                        }
                        for i in 1..t {
                            head_sink_trace[hh].push(pd[i * t].as_f64());
                        }
                    }
                    heads.push(out);
                }
                let head_refs: Vec<&Tensor<E>> = heads.iter().collect();
                row_blocks.push(g.concat(&head_refs, 1)?); // (T, n_h*d_h)
            }
            let block_refs: Vec<&Tensor<E>> = row_blocks.iter().collect();
            let cat = g.concat(&block_refs, 0)?; // (N, n_h*d_h)
            let attn_out = g.matmul(&cat, &g.transpose(&layer.w_o)?)?;
            x = g.add(&x, &attn_out)?;

            let h2 = norm_scaled(g, &x, &layer.ffn_norm_gain, lnum, c.ln_scaling)?;
            let ffn_out = swiglu_ffn(g, &h2, &layer.w1, &layer.w2, &layer.w3)?;
            x = g.add(&x, &ffn_out)?;

            if want_trace {
                trace_layers.push(LayerTrace {
                    attn_logits: head_logit_trace,
                    sink_probs: head_sink_trace,
                    residual: x.data().iter().map(|v| v.as_f64()).collect(),
                });
            }
        }

        let final_normed = g.mul(&g.rms_normalize(&x)?, &self.final_norm_gain)?;
        let mut logits2d = g.matmul(&final_normed, &g.transpose(&self.lm_head)?)?;
        if c.logit_scale != 1.0 {
            logits2d = g.scale(&logits2d, c.logit_scale)?;
        }
        let trace = want_trace.then(|| ForwardTrace {
            layers: trace_layers,
            logits: logits2d.data().iter().map(|v| v.as_f64()).collect(),
            d_model: c.d_model,
        });
        let logits = g.reshape(&logits2d, vec![b, t, c.vocab_size])?;
        Ok(ForwardOutput { logits, trace })
    }

    /// Greedy next-token debug decoding from a prompt.
    pub fn greedy_decode(&self, prompt: &[usize], steps: usize) -> Result<Vec<usize>, ModelError> {
        let mut ids = prompt.to_vec();
        for _ in 0..steps {
            let ctx = ids.len().min(self.config.max_context);
            let window = &ids[ids.len() - ctx..];
            let g = Graph::new();
            let out = self.forward(&g, window, 1, ctx, false)?;
            let v = self.config.vocab_size;
            let data = out.logits.data();
            let last = &data[(ctx - 1) * v..ctx * v];
            let argmax = last
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            drop(data);
            ids.push(argmax);
        }
        Ok(ids)
    }
}

/// Mean cross-entropy over unmasked positions plus the Z-loss penalty
/// `λ_z · mean(log²(Σ exp z))` over the same positions.
///
/// Returns `(total_loss, z_term)`; the cross-entropy alone is
/// `total - z_term`.
pub fn loss_ce_zloss<E: Element>(
    g: &Graph<E>,
    logits: &Tensor<E>,
    targets: &[usize],
    loss_mask: &[bool],
    lambda_z: f64,
) -> Result<(Tensor<E>, Tensor<E>), ModelError> {
    let shape = logits.shape().to_vec();
    let v = *shape.last().expect("logits need a vocab axis");
    let n = logits.numel() / v;
    assert_eq!(targets.len(), n, "one target per position");
    assert_eq!(loss_mask.len(), n, "one mask bit per position");
    if let Some(&id) = targets.iter().find(|&&id| id >= v) {
        return Err(ModelError::TokenOutOfRange { id, vocab: v });
    }
    let count = loss_mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(ModelError::AllPositionsMasked);
    }
    let logits2d =
        if shape.len() == 2 { logits.clone() } else { g.reshape(logits, vec![n, v])? };

    // constant row-max shift: value-stable and gradient-exact
    let row_max: Vec<E> = {
        let d = logits2d.data();
        (0..n)
            .map(|r| {
                d[r * v..(r + 1) * v]
                    .iter()
                    .fold(E::from_f64(f64::NEG_INFINITY), |m, &x| if x > m { x } else { m })
            })
            .collect()
    };
    let max_c = Tensor::from_vec(vec![n, 1], row_max)?;
    let shifted = g.sub(&logits2d, &max_c)?;
    let sum_exp = g.sum(&g.exp(&shifted)?, Some(1))?; // (N,1)
    let lse = g.add(&g.log(&sum_exp)?, &max_c)?; // (N,1)

    let mut onehot = vec![E::zero(); n * v];
    for (r, &tgt) in targets.iter().enumerate() {
        onehot[r * v + tgt] = E::one();
    }
    let onehot_c = Tensor::from_vec(vec![n, v], onehot)?;
    let target_logit = g.sum(&g.mul(&logits2d, &onehot_c)?, Some(1))?; // (N,1)

    let mask_c = Tensor::from_vec(
        vec![n, 1],
        loss_mask.iter().map(|&m| if m { E::one() } else { E::zero() }).collect(),
    )?;
    let inv_count = 1.0 / count as f64;
    let ce_sum = g.sum(&g.mul(&g.sub(&lse, &target_logit)?, &mask_c)?, None)?;
    let ce = g.scale(&ce_sum, inv_count)?;
    let z_sum = g.sum(&g.mul(&g.square(&lse)?, &mask_c)?, None)?;
    let z_term = g.scale(&z_sum, lambda_z * inv_count)?;
    let total = g.add(&ce, &z_term)?;
    Ok((total, z_term))
}

#[cfg(test)]
mod tests;

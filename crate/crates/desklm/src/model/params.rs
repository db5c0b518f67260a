//! Named parameter collection and initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use super::ModelError;
use crate::optim::ParamRole;
use crate::tensor::{Element, Tensor};

/// Per-layer parameters. Toggle-specific parameters always exist (they are
/// tiny) but only enter `named_params` when their toggle is on, so disabled
/// features contribute no trainable state.
pub struct BlockParams<E: Element> {
    pub attn_norm_gain: Tensor<E>, // (d,)
    pub ffn_norm_gain: Tensor<E>,  // (d,)
    pub w_q: Tensor<E>,            // (n_h*d_h, d)
    pub w_k: Tensor<E>,            // (kv_dim, d)
    pub w_v: Tensor<E>,            // (kv_dim, d)
    pub w_o: Tensor<E>,            // (d, n_h*d_h)
    /// QK-norm gain γ, scalar shared across heads, init 1.
    pub qk_gain: Tensor<E>,
    /// Per-head gate projection, zero-init so gating starts as identity.
    pub gate: Tensor<E>, // (n_h, d)
    /// Value-residual scalars (s, α₁, α₂), init (1, 1, 0).
    pub vr_scale: Tensor<E>,
    pub vr_alpha1: Tensor<E>,
    pub vr_alpha2: Tensor<E>,
    pub w1: Tensor<E>, // (ffn, d)
    pub w2: Tensor<E>, // (d, ffn)
    pub w3: Tensor<E>, // (ffn, d)
}

pub struct ModelParams<E: Element> {
    pub config: ModelConfig,
    pub embedding: Tensor<E>, // (V, d)
    pub layers: Vec<BlockParams<E>>,
    pub final_norm_gain: Tensor<E>, // (d,)
    pub lm_head: Tensor<E>,         // (V, d)
}

fn normal_matrix<E: Element>(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    std: f64,
) -> Tensor<E> {
    let dist = Normal::new(0.0, std).expect("valid std");
    let data: Vec<E> = (0..rows * cols).map(|_| E::from_f64(dist.sample(rng))).collect();
    Tensor::from_vec(vec![rows, cols], data).expect("consistent")
}

impl<E: Element> ModelParams<E> {
    /// Seeded init. Matrices draw normal(0, 1/sqrt(fan_in)); the embedding
    /// uses a fixed width-independent std; gate projections start at zero
    /// and all gains/scalars at their identity values. The RNG draw order
    /// never depends on the toggles, so two configs differing only in
    /// toggles share every common weight.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let qd = config.n_heads * config.head_dim;
        let kvd = config.kv_dim();
        let v = config.vocab_size;
        let ffn = config.ffn_dim;

        let embedding = normal_matrix(&mut rng, v, d, config.embed_init_std);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let inv_sqrt_d = 1.0 / (d as f64).sqrt();
            let layer = BlockParams {
                attn_norm_gain: Tensor::full(vec![d], E::one()),
                ffn_norm_gain: Tensor::full(vec![d], E::one()),
                w_q: normal_matrix(&mut rng, qd, d, inv_sqrt_d),
                w_k: normal_matrix(&mut rng, kvd, d, inv_sqrt_d),
                w_v: normal_matrix(&mut rng, kvd, d, inv_sqrt_d),
                w_o: normal_matrix(&mut rng, d, qd, 1.0 / (qd as f64).sqrt()),
                qk_gain: Tensor::scalar(E::one()),
                gate: Tensor::zeros(vec![config.n_heads, d]),
                vr_scale: Tensor::scalar(E::one()),
                vr_alpha1: Tensor::scalar(E::one()),
                vr_alpha2: Tensor::scalar(E::zero()),
                w1: normal_matrix(&mut rng, ffn, d, inv_sqrt_d),
                w2: normal_matrix(&mut rng, d, ffn, 1.0 / (ffn as f64).sqrt()),
                w3: normal_matrix(&mut rng, ffn, d, inv_sqrt_d),
            };
            layers.push(layer);
        }
        let final_norm_gain = Tensor::full(vec![d], E::one());
        // near-uniform initial logits: logit std ~= embed_init_std at any
        // width, so the initial loss sits at ln(V) and the z statistic at
        // (ln V)^2
        let lm_head = normal_matrix(&mut rng, v, d, config.embed_init_std / (d as f64).sqrt());

        let model = ModelParams { config, embedding, layers, final_norm_gain, lm_head };
        for (_, t) in model.named_params() {
            t.set_requires_grad(true);
        }
        Ok(model)
    }

    /// Trainable parameters in a stable order, filtered by the toggles.
    pub fn named_params(&self) -> Vec<(String, Tensor<E>)> {
        let c = &self.config;
        let mut out: Vec<(String, Tensor<E>)> = Vec::new();
        out.push(("embedding".into(), self.embedding.clone()));
        for (i, l) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layers.{i}.{s}");
            out.push((p("attn_norm.gain"), l.attn_norm_gain.clone()));
            out.push((p("attn.wq"), l.w_q.clone()));
            out.push((p("attn.wk"), l.w_k.clone()));
            out.push((p("attn.wv"), l.w_v.clone()));
            out.push((p("attn.wo"), l.w_o.clone()));
            if c.qk_norm {
                out.push((p("attn.qk_gain"), l.qk_gain.clone()));
            }
            if c.gating {
                out.push((p("attn.gate"), l.gate.clone()));
            }
            if c.value_residual {
                out.push((p("attn.vr_scale"), l.vr_scale.clone()));
                out.push((p("attn.vr_alpha1"), l.vr_alpha1.clone()));
                out.push((p("attn.vr_alpha2"), l.vr_alpha2.clone()));
            }
            out.push((p("ffn_norm.gain"), l.ffn_norm_gain.clone()));
            out.push((p("ffn.w1"), l.w1.clone()));
            out.push((p("ffn.w2"), l.w2.clone()));
            out.push((p("ffn.w3"), l.w3.clone()));
        }
        out.push(("final_norm.gain".into(), self.final_norm_gain.clone()));
        out.push(("lm_head".into(), self.lm_head.clone()));
        out
    }

    /// (name, rank, role) triples for the optimizer partition.
    pub fn param_meta(&self) -> Vec<(String, usize, ParamRole)> {
        self.named_params()
            .into_iter()
            .map(|(name, t)| {
                let role = if name == "embedding" {
                    ParamRole::Embedding
                } else if name == "lm_head" {
                    ParamRole::OutputHead
                } else if t.rank() >= 2 {
                    ParamRole::Weight
                } else {
                    ParamRole::Gain
                };
                (name, t.rank(), role)
            })
            .collect()
    }

    pub fn param(&self, name: &str) -> Option<Tensor<E>> {
        self.named_params().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.named_params() {
            t.zero_grad();
        }
    }

    /// Accumulated gradients by parameter name (after a backward pass).
    pub fn gradient_map(&self) -> std::collections::BTreeMap<String, Vec<E>> {
        self.named_params()
            .into_iter()
            .filter_map(|(name, t)| t.grad().map(|g| (name, g)))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Loads values from `(name -> (shape, f32 data))`, requiring an exact
    /// name match with the current toggle set.
    pub fn load_tensor_map(
        &self,
        map: &std::collections::BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    ) -> Result<(), ModelError> {
        let params = self.named_params();
        if params.len() != map.len() {
            return Err(ModelError::CheckpointMismatch(format!(
                "parameter count {} != checkpoint tensor count {}",
                params.len(),
                map.len()
            )));
        }
        for (name, t) in params {
            let Some((shape, data)) = map.get(&name) else {
                return Err(ModelError::CheckpointMismatch(format!("missing tensor `{name}`")));
            };
            if shape != t.shape() {
                return Err(ModelError::CheckpointMismatch(format!(
                    "tensor `{name}` shape {:?} != expected {:?}",
                    shape,
                    t.shape()
                )));
            }
            let mut buf = t.data_mut();
            for (dst, &src) in buf.iter_mut().zip(data) {
                *dst = E::from_f64(src as f64);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toggles_filter_named_params() {
        let base = ModelParams::<f32>::init(ModelConfig::tiny(16, 2, 32), 1).unwrap();
        let full = ModelParams::<f32>::init(
            ModelConfig::tiny(16, 2, 32).with_all_toggles(true),
            1,
        )
        .unwrap();
        let base_names: Vec<String> = base.named_params().into_iter().map(|(n, _)| n).collect();
        let full_names: Vec<String> = full.named_params().into_iter().map(|(n, _)| n).collect();
        assert!(full_names.len() > base_names.len());
        assert!(full_names.contains(&"layers.0.attn.qk_gain".to_string()));
        assert!(full_names.contains(&"layers.1.attn.vr_alpha2".to_string()));
        assert!(!base_names.contains(&"layers.0.attn.gate".to_string()));
    }

    #[test]
    fn shared_weights_identical_across_toggle_settings() {
        let a = ModelParams::<f64>::init(ModelConfig::tiny(16, 2, 32), 7).unwrap();
        let b = ModelParams::<f64>::init(
            ModelConfig::tiny(16, 2, 32).with_all_toggles(true),
            7,
        )
        .unwrap();
        assert_eq!(a.layers[1].w_q.to_vec(), b.layers[1].w_q.to_vec());
        assert_eq!(a.embedding.to_vec(), b.embedding.to_vec());
        assert_eq!(a.lm_head.to_vec(), b.lm_head.to_vec());
    }

    #[test]
    fn intervention_params_start_at_identity_values() {
        let m = ModelParams::<f64>::init(
            ModelConfig::tiny(16, 2, 32).with_all_toggles(true),
            3,
        )
        .unwrap();
        let l = &m.layers[0];
        assert_eq!(l.qk_gain.item(), 1.0);
        assert_eq!(l.vr_scale.item(), 1.0);
        assert_eq!(l.vr_alpha1.item(), 1.0);
        assert_eq!(l.vr_alpha2.item(), 0.0);
        assert!(l.gate.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_seed_same_model() {
        let a = ModelParams::<f32>::init(ModelConfig::tiny(16, 2, 32), 5).unwrap();
        let b = ModelParams::<f32>::init(ModelConfig::tiny(16, 2, 32), 5).unwrap();
        for ((na, ta), (nb, tb)) in a.named_params().iter().zip(b.named_params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.to_vec(), tb.to_vec());
        }
    }
}

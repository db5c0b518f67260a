use super::*;
use crate::tensor::gradcheck::{grad_check, DEFAULT_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
}

// ── RoPE ────────────────────────────────────────────────────────────────

#[test]
fn rope_position_zero_is_identity() {
    let g = Graph::new();
    let x = t64(&[1, 4], &[0.3, -1.2, 0.7, 2.0]);
    let y = rope_apply(&g, &x, &[0], 10_000.0).unwrap();
    assert_eq!(y.to_vec(), x.to_vec());
}

#[test]
fn rope_unit_vector_planar_rotation() {
    let g = Graph::new();
    for p in [1usize, 3, 17] {
        let x = t64(&[1, 2], &[1.0, 0.0]);
        let y = rope_apply(&g, &x, &[p], 10_000.0).unwrap();
        let yd = y.to_vec();
        assert!((yd[0] - (p as f64).cos()).abs() < 1e-12);
        assert!((yd[1] - (p as f64).sin()).abs() < 1e-12);
    }
}

#[test]
fn rope_preserves_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = Graph::new();
    for _ in 0..100 {
        let pos = rng.gen_range(0..64);
        let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let xt = t64(&[1, 8], &x);
        let y = rope_apply(&g, &xt, &[pos], 10_000.0).unwrap();
        let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny: f64 = y.to_vec().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((nx - ny).abs() < 1e-10, "norm changed: {nx} -> {ny}");
    }
}

#[test]
fn rope_rejects_odd_head_dim() {
    let g = Graph::new();
    let x = t64(&[1, 3], &[1.0, 2.0, 3.0]);
    assert!(rope_apply(&g, &x, &[1], 10_000.0).is_err());
}

// ── norm_scaled ─────────────────────────────────────────────────────────

#[test]
fn norm_scaled_layer_one_is_plain_rmsnorm() {
    let g = Graph::new();
    let x = t64(&[2, 4], &[0.5, -1.0, 2.0, 0.1, 1.0, 1.0, -1.0, 3.0]);
    let gain = Tensor::full(vec![4], 1.0f64);
    let a = norm_scaled(&g, &x, &gain, 1, true).unwrap();
    let b = g.mul(&g.rms_normalize(&x).unwrap(), &gain).unwrap();
    assert_eq!(a.to_vec(), b.to_vec());
}

#[test]
fn norm_scaled_divides_by_sqrt_layer() {
    let g = Graph::new();
    // RMS-1 rows stay RMS-1 after the norm, so layer 4 gives RMS 0.5
    let x = t64(&[1, 2], &[1.0, -1.0]);
    let gain = Tensor::full(vec![2], 1.0f64);
    let y = norm_scaled(&g, &x, &gain, 4, true).unwrap();
    let rms = (y.to_vec().iter().map(|v| v * v).sum::<f64>() / 2.0).sqrt();
    assert!((rms - 0.5).abs() < 1e-6, "rms {rms}");
}

#[test]
fn norm_scaled_toggle_off_ignores_depth() {
    let g = Graph::new();
    let x = t64(&[1, 4], &[0.4, 1.3, -0.6, 0.9]);
    let gain = Tensor::full(vec![4], 1.0f64);
    let deep = norm_scaled(&g, &x, &gain, 9, false).unwrap();
    let shallow = norm_scaled(&g, &x, &gain, 1, false).unwrap();
    assert_eq!(deep.to_vec(), shallow.to_vec());
}

// ── attention pieces ────────────────────────────────────────────────────

#[test]
fn single_token_attention_returns_v_with_forced_logit() {
    let g = Graph::new();
    let q = t64(&[1, 2], &[1.0, 0.0]);
    let k = t64(&[1, 2], &[1.0, 0.0]);
    let v = t64(&[1, 2], &[0.25, -0.75]);
    let gamma = Tensor::scalar(1.0f64);
    let att = qk_norm_attention(&g, &q, &k, &v, Some(&gamma)).unwrap();
    // normalized q = k = [sqrt(2), 0], so the logit is 2 (up to the RMS eps)
    assert!((att.logits.item() - 2.0).abs() < 1e-5, "logit {}", att.logits.item());
    assert_eq!(att.probs.item(), 1.0);
    assert_eq!(att.out.to_vec(), v.to_vec());
}

#[test]
fn qk_norm_cancels_query_scale() {
    let g = Graph::new();
    let q = t64(&[3, 4], &[0.3, -0.2, 0.9, 1.1, -0.5, 0.4, 0.2, -0.9, 1.4, 0.3, -0.2, 0.6]);
    let q10 = g.scale(&q, 10.0).unwrap();
    let k = t64(&[3, 4], &[0.8, 0.1, -0.3, 0.5, 0.2, -0.7, 0.9, 0.4, -0.6, 1.2, 0.05, -0.8]);
    let v = t64(&[3, 4], &[0.1; 12].to_vec().iter().enumerate().map(|(i, _)| i as f64 * 0.1).collect::<Vec<_>>());
    let gamma = Tensor::scalar(1.0f64);
    let a = qk_norm_attention(&g, &q, &k, &v, Some(&gamma)).unwrap();
    let b = qk_norm_attention(&g, &q10, &k, &v, Some(&gamma)).unwrap();
    for (x, y) in a.out.to_vec().iter().zip(b.out.to_vec().iter()) {
        assert!((x - y).abs() < 1e-5, "{x} vs {y}");
    }
}

#[test]
fn disabled_qk_norm_reproduces_plain_attention_oracle() {
    // brute-force softmax oracle over a 3-token head
    let g = Graph::new();
    let qv = [0.3, -0.6, 1.2, 0.8, -0.4, 0.5];
    let kv = [0.9, 0.2, -0.7, 0.3, 1.1, -0.2];
    let vv = [0.5, -0.5, 1.5, 2.5, -1.5, 0.25];
    let q = t64(&[3, 2], &qv);
    let k = t64(&[3, 2], &kv);
    let v = t64(&[3, 2], &vv);
    let att = qk_norm_attention(&g, &q, &k, &v, None).unwrap();
    let scale = 1.0 / 2f64.sqrt();
    let mut expected = vec![0.0; 6];
    for i in 0..3 {
        let mut logits = Vec::new();
        for j in 0..=i {
            let dot = qv[2 * i] * kv[2 * j] + qv[2 * i + 1] * kv[2 * j + 1];
            logits.push(dot * scale);
        }
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        for j in 0..=i {
            let p = exps[j] / z;
            expected[2 * i] += p * vv[2 * j];
            expected[2 * i + 1] += p * vv[2 * j + 1];
        }
    }
    for (a, e) in att.out.to_vec().iter().zip(&expected) {
        assert!((a - e).abs() < 1e-12, "{a} vs {e}");
    }
}

#[test]
fn gate_multiplier_identity_silence_and_analytic_point() {
    let g = Graph::new();
    let head = t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let zero = t64(&[2, 1], &[0.0, 0.0]);
    assert_eq!(gate_heads(&g, &head, &zero).unwrap().to_vec(), head.to_vec());

    let very_negative = t64(&[2, 1], &[-60.0, -60.0]);
    let silenced = gate_heads(&g, &head, &very_negative).unwrap();
    assert!(silenced.to_vec().iter().all(|v| v.abs() < 1e-20));

    let ln3 = t64(&[2, 1], &[3f64.ln(), 3f64.ln()]);
    let boosted = gate_heads(&g, &head, &ln3).unwrap();
    for (b, h) in boosted.to_vec().iter().zip(head.to_vec().iter()) {
        assert!((b - 1.5 * h).abs() < 1e-12, "2*sigmoid(ln 3) = 1.5");
    }
}

#[test]
fn value_residual_cases() {
    let g = Graph::new();
    let v_local = t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let v_first = t64(&[2, 2], &[-1.0, 0.5, 2.0, -2.0]);
    let s = |x: f64| Tensor::scalar(x);

    let init = mix_value_residual(&g, &v_local, &v_first, &s(1.0), &s(1.0), &s(0.0)).unwrap();
    for (a, b) in init.to_vec().iter().zip(v_local.to_vec().iter()) {
        assert!((a - b).abs() < 1e-7, "init case must return V_local");
    }

    let even = mix_value_residual(&g, &v_local, &v_first, &s(1.0), &s(1.0), &s(1.0)).unwrap();
    for (i, val) in even.to_vec().iter().enumerate() {
        let want = (v_local.to_vec()[i] + v_first.to_vec()[i]) / 2f64.sqrt();
        assert!((val - want).abs() < 1e-7);
    }

    let first_only = mix_value_residual(&g, &v_local, &v_first, &s(2.0), &s(0.0), &s(1.0)).unwrap();
    for (i, val) in first_only.to_vec().iter().enumerate() {
        assert!((val - 2.0 * v_first.to_vec()[i]).abs() < 1e-7);
    }
}

#[test]
fn swiglu_zero_input_and_scalar_oracle() {
    let g = Graph::new();
    let w1 = t64(&[1, 1], &[1.0]);
    let w2 = t64(&[1, 1], &[1.0]);
    let w3 = t64(&[1, 1], &[1.0]);
    let zero = t64(&[1, 1], &[0.0]);
    assert_eq!(swiglu_ffn(&g, &zero, &w1, &w2, &w3).unwrap().item(), 0.0);

    let one = t64(&[1, 1], &[1.0]);
    let out = swiglu_ffn(&g, &one, &w1, &w2, &w3).unwrap().item();
    let silu1 = 1.0 / (1.0 + (-1.0f64).exp());
    assert!((out - silu1).abs() < 1e-12);
    assert!((out - 0.7311).abs() < 1e-4);
}

#[test]
fn swiglu_gradient_check() {
    let x = t64(&[2, 3], &[0.4, -0.8, 1.1, 0.2, 0.9, -0.3]);
    let w1 = t64(&[4, 3], &[0.3, -0.2, 0.5, 0.8, 0.1, -0.6, 0.4, 0.7, -0.1, 0.2, -0.9, 0.3]);
    let w2 = t64(&[3, 4], &[0.5, -0.3, 0.2, 0.7, -0.4, 0.1, 0.6, -0.2, 0.3, 0.8, -0.5, 0.1]);
    let w3 = t64(&[4, 3], &[-0.1, 0.6, 0.2, 0.3, -0.5, 0.9, 0.1, 0.4, -0.7, 0.5, 0.2, -0.3]);
    let err = grad_check(
        |g, xs| {
            let out = swiglu_ffn(g, &xs[0], &xs[1], &xs[2], &xs[3])?;
            g.sum(&g.square(&out)?, None)
        },
        &[x, w1, w2, w3],
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err < 1e-5, "swiglu grad error {err}");
}

// ── forward ─────────────────────────────────────────────────────────────

fn toy_batch(cfg: &ModelConfig, b: usize, t: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..b * t).map(|_| rng.gen_range(0..cfg.vocab_size)).collect()
}

#[test]
fn forward_output_shape_contract() {
    for toggles in [false, true] {
        let cfg = ModelConfig::tiny(16, 2, 32).with_all_toggles(toggles);
        let model = ModelParams::<f64>::init(cfg.clone(), 1).unwrap();
        let ids = toy_batch(&cfg, 3, 5, 2);
        let g = Graph::new();
        let out = model.forward(&g, &ids, 3, 5, false).unwrap();
        assert_eq!(out.logits.shape(), &[3, 5, 32]);
    }
}

#[test]
fn forward_rejects_bad_tokens_and_context() {
    let cfg = ModelConfig::tiny(16, 1, 32);
    let model = ModelParams::<f64>::init(cfg, 1).unwrap();
    let g = Graph::new();
    let err = model.forward(&g, &[0, 99], 1, 2, false);
    assert!(matches!(err, Err(ModelError::TokenOutOfRange { id: 99, .. })));
    let long: Vec<usize> = vec![0; 200];
    let err = model.forward(&Graph::new(), &long, 1, 200, false);
    assert!(matches!(err, Err(ModelError::ContextOverflow { .. })));
}

#[test]
fn causal_mask_blocks_future_tokens() {
    let cfg = ModelConfig::tiny(16, 2, 32).with_all_toggles(true);
    let model = ModelParams::<f64>::init(cfg.clone(), 9).unwrap();
    let mut ids = toy_batch(&cfg, 1, 6, 3);
    let g = Graph::new();
    let base = model.forward(&g, &ids, 1, 6, false).unwrap().logits.to_vec();
    ids[4] = (ids[4] + 1) % cfg.vocab_size;
    ids[5] = (ids[5] + 7) % cfg.vocab_size;
    let g = Graph::new();
    let altered = model.forward(&g, &ids, 1, 6, false).unwrap().logits.to_vec();
    let v = cfg.vocab_size;
    // positions 0..=3 are bit-identical; position 4 must differ
    assert_eq!(&base[..4 * v], &altered[..4 * v]);
    assert!(base[4 * v..5 * v] != altered[4 * v..5 * v]);
}

#[test]
fn equivalence_at_init_for_gating_and_value_residual() {
    let base_cfg = ModelConfig::tiny(16, 2, 32);
    let mut on_cfg = base_cfg.clone();
    on_cfg.gating = true;
    on_cfg.value_residual = true;
    let base = ModelParams::<f64>::init(base_cfg.clone(), 42).unwrap();
    let on = ModelParams::<f64>::init(on_cfg, 42).unwrap();
    let ids = toy_batch(&base_cfg, 2, 7, 5);
    let a = base.forward(&Graph::new(), &ids, 2, 7, false).unwrap().logits.to_vec();
    let b = on.forward(&Graph::new(), &ids, 2, 7, false).unwrap().logits.to_vec();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-6, "init equivalence violated: {x} vs {y}");
    }
}

#[test]
fn qk_norm_logit_bound_holds_on_trace() {
    let cfg = ModelConfig::tiny(16, 2, 32).with_all_toggles(true);
    let model = ModelParams::<f64>::init(cfg.clone(), 13).unwrap();
    let ids = toy_batch(&cfg, 2, 8, 6);
    let g = Graph::new();
    let out = model.forward(&g, &ids, 2, 8, true).unwrap();
    let trace = out.trace.unwrap();
    for (li, layer) in trace.layers.iter().enumerate() {
        let gamma = model.layers[li].qk_gain.item();
        let bound = gamma * cfg.head_dim as f64 + 1e-9;
        for head in &layer.attn_logits {
            for &l in head {
                assert!(l.abs() <= bound, "layer {li}: |{l}| exceeds {bound}");
            }
        }
    }
}

#[test]
fn every_parameter_gets_gradient() {
    let cfg = ModelConfig::tiny(16, 2, 32).with_all_toggles(true);
    let model = ModelParams::<f64>::init(cfg.clone(), 21).unwrap();
    let ids = toy_batch(&cfg, 2, 6, 11);
    let targets: Vec<usize> = ids.iter().map(|&i| (i + 1) % cfg.vocab_size).collect();
    let g = Graph::new();
    let out = model.forward(&g, &ids, 2, 6, false).unwrap();
    let (loss, _) = loss_ce_zloss(&g, &out.logits, &targets, &vec![true; 12], 1e-4).unwrap();
    g.backward(&loss).unwrap();
    for (name, t) in model.named_params() {
        let grad = t.grad().unwrap_or_else(|| panic!("{name} has no grad"));
        assert!(grad.iter().any(|&v| v != 0.0), "{name} gradient is identically zero");
    }
}

#[test]
fn forward_is_deterministic() {
    let cfg = ModelConfig::tiny(16, 2, 32).with_all_toggles(true);
    let model = ModelParams::<f64>::init(cfg.clone(), 30).unwrap();
    let ids = toy_batch(&cfg, 2, 5, 8);
    let a = model.forward(&Graph::new(), &ids, 2, 5, false).unwrap().logits.to_vec();
    let b = model.forward(&Graph::new(), &ids, 2, 5, false).unwrap().logits.to_vec();
    assert_eq!(a, b);
}

// ── loss ────────────────────────────────────────────────────────────────

#[test]
fn uniform_logits_give_ln_v() {
    let g = Graph::new();
    let v = 32;
    let logits = Tensor::full(vec![4, v], 0.7f64);
    let targets = vec![3usize; 4];
    let (total, z) = loss_ce_zloss(&g, &logits, &targets, &[true; 4], 0.0).unwrap();
    assert!((total.item() - (v as f64).ln()).abs() < 1e-12);
    assert_eq!(z.item(), 0.0);
}

#[test]
fn z_term_analytic_two_logit_case() {
    let g = Graph::new();
    let logits = t64(&[1, 2], &[0.0, 0.0]);
    let (_, z) = loss_ce_zloss(&g, &logits, &[0], &[true], 1e-4).unwrap();
    let want = 1e-4 * 2f64.ln().powi(2);
    assert!((z.item() - want).abs() < 1e-12);
    assert!((z.item() - 4.805e-5).abs() < 1e-8);
}

#[test]
fn logit_shift_leaves_ce_but_moves_z() {
    let g = Graph::new();
    let logits = t64(&[2, 3], &[0.2, -0.5, 1.0, 0.8, 0.3, -0.2]);
    let shifted = g.scale(&g.add(&logits, &Tensor::scalar(2.5)).unwrap(), 1.0).unwrap();
    let targets = [2usize, 0];
    let (t1, z1) = loss_ce_zloss(&g, &logits, &targets, &[true; 2], 1e-4).unwrap();
    let (t2, z2) = loss_ce_zloss(&g, &shifted, &targets, &[true; 2], 1e-4).unwrap();
    let ce1 = t1.item() - z1.item();
    let ce2 = t2.item() - z2.item();
    assert!((ce1 - ce2).abs() < 1e-12, "CE must be shift-invariant");
    assert!((z1.item() - z2.item()).abs() > 1e-6, "z term must move with the shift");
}

#[test]
fn masked_positions_are_excluded() {
    let g = Graph::new();
    let logits = t64(&[2, 2], &[5.0, 0.0, 0.0, 5.0]);
    let (all, _) = loss_ce_zloss(&g, &logits, &[0, 0], &[true, true], 0.0).unwrap();
    let (only_first, _) = loss_ce_zloss(&g, &logits, &[0, 0], &[true, false], 0.0).unwrap();
    assert!(only_first.item() < all.item());
    assert!(matches!(
        loss_ce_zloss(&g, &logits, &[0, 0], &[false, false], 0.0),
        Err(ModelError::AllPositionsMasked)
    ));
}

#[test]
fn loss_gradient_check_small() {
    let logits = t64(&[2, 4], &[0.3, -0.7, 1.2, 0.1, -0.4, 0.9, 0.2, -1.1]);
    let err = grad_check(
        |g, xs| {
            let (total, _) = loss_ce_zloss(g, &xs[0], &[2, 1], &[true, true], 1e-4)
                .map_err(|e| match e {
                    ModelError::Tensor(t) => t,
                    other => panic!("unexpected: {other}"),
                })?;
            Ok(total)
        },
        &[logits],
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err < 1e-7, "loss grad error {err}");
}

#[test]
fn greedy_decode_extends_prompt() {
    let cfg = ModelConfig::tiny(16, 1, 32);
    let model = ModelParams::<f64>::init(cfg, 2).unwrap();
    let out = model.greedy_decode(&[1, 2, 3], 4).unwrap();
    assert_eq!(out.len(), 7);
    assert_eq!(&out[..3], &[1, 2, 3]);
    assert!(out[3..].iter().all(|&t| t < 32));
}

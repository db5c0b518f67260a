//! NorMuon: orthogonalized momentum updates with neuron-wise second-moment
//! normalization and cautious weight decay for 2-D weight matrices.

use serde::{Deserialize, Serialize};

use super::newton_schulz::{ns_orthogonalize, NsCoefficients};
use super::OptimError;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NorMuonConfig {
    /// Momentum coefficient µ.
    pub momentum: f64,
    /// Nesterov lookahead: orthogonalize `g + µ·m` instead of `m`.
    pub nesterov: bool,
    /// Orthogonalize the raw gradient instead of the momentum-smoothed one
    /// (A/B switch for the two published forms).
    pub raw_gradient: bool,
    /// Second-moment EMA coefficient for neuron-wise normalization.
    pub beta2: f64,
    pub eps: f64,
    /// Extra multiplier on the shape-based update rescale.
    pub update_scale: f64,
    /// Apply weight decay only where sign(update) == sign(weight); when
    /// false, plain decoupled decay (the pre-CWD ablation arm).
    pub cautious_weight_decay: bool,
}

impl Default for NorMuonConfig {
    fn default() -> Self {
        NorMuonConfig {
            momentum: 0.95,
            nesterov: true,
            raw_gradient: false,
            beta2: 0.95,
            eps: 1e-8,
            update_scale: 1.0,
            cautious_weight_decay: true,
        }
    }
}

/// Per-matrix state: momentum buffer plus one second-moment accumulator per
/// output row.
#[derive(Debug, Clone)]
pub struct NorMuonState<E: Element> {
    pub momentum: Vec<E>,
    pub row_second_moment: Vec<E>,
    pub step_count: u64,
}

impl<E: Element> NorMuonState<E> {
    pub fn new(rows: usize, cols: usize) -> Self {
        NorMuonState {
            momentum: vec![E::zero(); rows * cols],
            row_second_moment: vec![E::zero(); rows],
            step_count: 0,
        }
    }
}

/// Neuron-wise normalization of an orthogonalized update (in place).
///
/// Each output row r keeps a bias-corrected EMA of its mean-square and is
/// rescaled to `u_r / sqrt(v̂_r + ε)`, equalizing per-neuron update RMS.
/// The whole matrix is then rescaled by `sqrt(max(1, rows/cols)) / sqrt(cols)`
/// so the per-entry update RMS is comparable across shapes and matches the
/// usual aspect-scaled orthogonalized-update magnitude (the trailing
/// `1/sqrt(fan_in)` keeps large widths stable at the same learning rate).
pub fn neuron_normalize<E: Element>(
    u: &mut [E],
    rows: usize,
    cols: usize,
    state: &mut NorMuonState<E>,
    cfg: &NorMuonConfig,
) {
    debug_assert_eq!(u.len(), rows * cols);
    debug_assert_eq!(state.row_second_moment.len(), rows);
    state.step_count += 1;
    let beta2 = E::from_f64(cfg.beta2);
    let one_minus = E::one() - beta2;
    let bias = E::one() - E::from_f64(cfg.beta2.powi(state.step_count as i32));
    let eps = E::from_f64(cfg.eps);
    let n = E::from_f64(cols as f64);
    let shape_scale = E::from_f64(
        (rows as f64 / cols as f64).max(1.0).sqrt() / (cols as f64).sqrt() * cfg.update_scale,
    );
    for r in 0..rows {
        let row = &mut u[r * cols..(r + 1) * cols];
        let ms = row.iter().fold(E::zero(), |s, &x| s + x * x) / n;
        let v = beta2 * state.row_second_moment[r] + one_minus * ms;
        state.row_second_moment[r] = v;
        let v_hat = v / bias;
        let scale = shape_scale / (v_hat + eps).sqrt();
        for x in row.iter_mut() {
            *x = *x * scale;
        }
    }
}

/// Cautious-decay mask: 1 where the update and the weight have the same
/// nonzero sign, else 0. Zeros match nothing, so exact-zero coordinates
/// never decay.
pub fn cautious_decay_mask<E: Element>(update: &[E], weights: &[E]) -> Vec<bool> {
    update
        .iter()
        .zip(weights)
        .map(|(&u, &w)| {
            (u > E::zero() && w > E::zero()) || (u < E::zero() && w < E::zero())
        })
        .collect()
}

/// One NorMuon update on a 2-D weight matrix:
/// momentum, orthogonalize, neuron-normalize, then descend with decay
/// applied only where the update direction agrees with the weight sign.
#[allow(clippy::too_many_arguments)]
pub fn normuon_step<E: Element>(
    w: &Tensor<E>,
    grad: &[E],
    state: &mut NorMuonState<E>,
    cfg: &NorMuonConfig,
    coeffs: &NsCoefficients,
    lr: f64,
    weight_decay: f64,
) -> Result<(), OptimError> {
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(OptimError::NonFiniteGradient);
    }
    let shape = w.shape();
    debug_assert_eq!(shape.len(), 2, "NorMuon applies to matrices");
    let (rows, cols) = (shape[0], shape[1]);

    let mu = E::from_f64(cfg.momentum);
    for (m, &g) in state.momentum.iter_mut().zip(grad) {
        *m = mu * *m + g;
    }
    let smoothed: Vec<E> = if cfg.raw_gradient {
        grad.to_vec()
    } else if cfg.nesterov {
        grad.iter().zip(&state.momentum).map(|(&g, &m)| g + mu * m).collect()
    } else {
        state.momentum.clone()
    };

    let ns = ns_orthogonalize(&smoothed, rows, cols, coeffs);
    if ns.was_zero {
        return Ok(()); // no update direction, and the mask decays nothing
    }
    let mut update = ns.matrix;
    neuron_normalize(&mut update, rows, cols, state, cfg);

    let lr_e = E::from_f64(lr);
    let wd = E::from_f64(weight_decay);
    let mut data = w.data_mut();
    if cfg.cautious_weight_decay {
        let mask = cautious_decay_mask(&update, &data);
        for i in 0..data.len() {
            let decay = if mask[i] { wd * data[i] } else { E::zero() };
            data[i] = data[i] - lr_e * (update[i] + decay);
        }
    } else {
        for i in 0..data.len() {
            data[i] = data[i] - lr_e * (update[i] + wd * data[i]);
        }
    }
    Ok(())
}

//! Central-difference gradient checking for the analytic backward rules.

use super::{Graph, Tensor, TensorError};

/// Default perturbation for 64-bit checks.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Compares analytic gradients of a scalar-valued function against central
/// finite differences over every coordinate of every input.
///
/// Returns the max over coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&Graph<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>, TensorError>,
{
    for t in inputs {
        t.set_requires_grad(true);
        t.zero_grad();
    }
    let g = Graph::new();
    g.set_validate_finite(true);
    let loss = f(&g, inputs)?;
    if loss.numel() != 1 {
        return Err(TensorError::LossNotScalar(loss.shape().to_vec()));
    }
    g.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    // requires_grad off during the numeric sweep so re-evaluations record nothing
    for t in inputs {
        t.set_requires_grad(false);
    }
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let g = Graph::new();
        g.set_validate_finite(true);
        let v = f(&g, inputs)?;
        Ok(v.item())
    };

    let mut max_rel: f64 = 0.0;
    for (t, grads) in inputs.iter().zip(&analytic) {
        for (i, &a) in grads.iter().enumerate() {
            let orig = t.data()[i];
            t.data_mut()[i] = orig + eps;
            let fp = eval(inputs)?;
            t.data_mut()[i] = orig - eps;
            let fm = eval(inputs)?;
            t.data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max((a - numeric).abs() / denom);
        }
    }
    for t in inputs {
        t.set_requires_grad(true);
    }
    Ok(max_rel)
}

//! Post-hoc exponential moving average over saved checkpoints.

use std::path::PathBuf;

use super::checkpoint::{is_optimizer_tensor, load_checkpoint, CheckpointMeta, TensorMap};
use super::TrainError;

/// Folds model tensors of checkpoints ordered oldest -> newest:
/// `e <- c_1`, then `e <- β·e + (1-β)·c_i`. Optimizer state is dropped.
/// With `uniform` set, a plain mean replaces the recurrence.
///
/// Accumulation runs in f64 and is per-tensor, so the result does not
/// depend on tensor iteration order. The returned meta is the newest
/// checkpoint's.
pub fn posthoc_ema(
    paths: &[PathBuf],
    beta: f64,
    uniform: bool,
) -> Result<(CheckpointMeta, TensorMap), TrainError> {
    if paths.is_empty() {
        return Err(TrainError::Checkpoint("ema needs at least one checkpoint".into()));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(TrainError::Checkpoint(format!("beta {beta} not in [0,1]")));
    }
    let mut acc: std::collections::BTreeMap<String, (Vec<usize>, Vec<f64>)> = Default::default();
    let mut meta = None;
    for (i, path) in paths.iter().enumerate() {
        let (m, tensors) = load_checkpoint(path)?;
        let model_tensors: Vec<_> =
            tensors.iter().filter(|(n, _)| !is_optimizer_tensor(n)).collect();
        if i == 0 {
            for (name, (shape, data)) in model_tensors {
                acc.insert(
                    name.clone(),
                    (shape.clone(), data.iter().map(|&v| v as f64).collect()),
                );
            }
        } else {
            if model_tensors.len() != acc.len() {
                return Err(TrainError::Checkpoint(format!(
                    "checkpoint {} has {} model tensors, expected {}",
                    path.display(),
                    model_tensors.len(),
                    acc.len()
                )));
            }
            for (name, (shape, data)) in model_tensors {
                let Some((ashape, adata)) = acc.get_mut(name) else {
                    return Err(TrainError::Checkpoint(format!(
                        "checkpoint {} introduces unknown tensor `{name}`",
                        path.display()
                    )));
                };
                if ashape != shape {
                    return Err(TrainError::Checkpoint(format!(
                        "tensor `{name}` shape {shape:?} != {ashape:?}"
                    )));
                }
                if uniform {
                    for (a, &c) in adata.iter_mut().zip(data) {
                        *a += c as f64;
                    }
                } else {
                    for (a, &c) in adata.iter_mut().zip(data) {
                        *a = beta * *a + (1.0 - beta) * c as f64;
                    }
                }
            }
        }
        meta = Some(m);
    }
    if uniform && paths.len() > 1 {
        let n = paths.len() as f64;
        for (_, data) in acc.values_mut() {
            for v in data.iter_mut() {
                *v /= n;
            }
        }
    }
    let out: TensorMap = acc
        .into_iter()
        .map(|(name, (shape, data))| {
            (name, (shape, data.into_iter().map(|v| v as f32).collect()))
        })
        .collect();
    Ok((meta.expect("at least one checkpoint"), out))
}

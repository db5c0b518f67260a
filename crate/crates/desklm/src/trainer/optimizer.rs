//! Binds the parameter partition to per-parameter optimizer state and
//! applies one update across the whole model.

use std::collections::BTreeMap;

use super::checkpoint::TensorMap;
use super::TrainError;
use crate::model::ModelParams;
use crate::optim::{
    adamw_step, normuon_step, partition_params, AdamWConfig, AdamWState, NorMuonConfig,
    NorMuonState, NsCoefficients, ParamPartition,
};
use crate::tensor::Element;

/// Which optimizer drives the 2-D weight-matrix group. The 1-D /
/// embedding / head group always uses AdamW.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Every parameter steps with AdamW (the ablation baseline).
    AdamW,
    /// NorMuon on weight matrices, plain decoupled decay.
    NorMuon,
    /// NorMuon with cautious weight decay.
    NorMuonCwd,
}

pub struct Optimizer<E: Element> {
    pub kind: OptimizerKind,
    pub partition: ParamPartition,
    pub muon_cfg: NorMuonConfig,
    pub adamw_cfg: AdamWConfig,
    pub ns_coeffs: NsCoefficients,
    muon_states: BTreeMap<String, NorMuonState<E>>,
    adamw_states: BTreeMap<String, AdamWState<E>>,
}

impl<E: Element> Optimizer<E> {
    pub fn new(model: &ModelParams<E>, kind: OptimizerKind) -> Result<Self, TrainError> {
        let partition = partition_params(&model.param_meta())?;
        let muon_cfg = NorMuonConfig {
            cautious_weight_decay: matches!(kind, OptimizerKind::NorMuonCwd),
            ..NorMuonConfig::default()
        };
        let mut muon_states = BTreeMap::new();
        let mut adamw_states = BTreeMap::new();
        for (name, t) in model.named_params() {
            if partition.muon_group.contains(&name) && kind != OptimizerKind::AdamW {
                let sh = t.shape();
                muon_states.insert(name, NorMuonState::new(sh[0], sh[1]));
            } else {
                adamw_states.insert(name, AdamWState::new(t.numel()));
            }
        }
        Ok(Optimizer {
            kind,
            partition,
            muon_cfg,
            adamw_cfg: AdamWConfig::default(),
            ns_coeffs: NsCoefficients::default(),
            muon_states,
            adamw_states,
        })
    }

    /// One optimizer update from the gradients currently stored on the
    /// parameters. `lr_muon` applies to the weight-matrix group and
    /// `lr_adamw` to the rest, regardless of which algorithm runs.
    pub fn step(
        &mut self,
        model: &ModelParams<E>,
        lr_muon: f64,
        lr_adamw: f64,
        wd_muon: f64,
        wd_adamw: f64,
    ) -> Result<(), TrainError> {
        for (name, t) in model.named_params() {
            let grad = t
                .grad()
                .ok_or_else(|| TrainError::MissingGradient(name.clone()))?;
            let in_muon_group = self.partition.muon_group.contains(&name);
            let lr = if in_muon_group { lr_muon } else { lr_adamw };
            let wd = if in_muon_group { wd_muon } else { wd_adamw };
            if let Some(state) = self.muon_states.get_mut(&name) {
                normuon_step(&t, &grad, state, &self.muon_cfg, &self.ns_coeffs, lr, wd)?;
            } else {
                let state = self
                    .adamw_states
                    .get_mut(&name)
                    .ok_or_else(|| TrainError::MissingGradient(name.clone()))?;
                adamw_step(&t, &grad, state, &self.adamw_cfg, lr, wd)?;
            }
        }
        Ok(())
    }

    /// Global L2 norm of the gradients currently stored on the parameters.
    pub fn grad_norm(&self, model: &ModelParams<E>) -> f64 {
        let mut acc = 0.0;
        for (_, t) in model.named_params() {
            if let Some(g) = t.grad() {
                for v in g {
                    let v = v.as_f64();
                    acc += v * v;
                }
            }
        }
        acc.sqrt()
    }

    /// Optimizer state as checkpoint tensors, names suffixed
    /// `.momentum` / `.row_v` / `.m` / `.v` / `.step`.
    pub fn state_tensors(&self, model: &ModelParams<E>) -> TensorMap {
        let shapes: BTreeMap<String, Vec<usize>> = model
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let f32s = |v: &[E]| v.iter().map(|x| x.as_f64() as f32).collect::<Vec<f32>>();
        let mut out = TensorMap::new();
        for (name, st) in &self.muon_states {
            let shape = shapes[name].clone();
            out.insert(format!("{name}.momentum"), (shape.clone(), f32s(&st.momentum)));
            out.insert(format!("{name}.row_v"), (vec![shape[0]], f32s(&st.row_second_moment)));
            out.insert(format!("{name}.step"), (vec![], vec![st.step_count as f32]));
        }
        for (name, st) in &self.adamw_states {
            let shape = shapes[name].clone();
            out.insert(format!("{name}.m"), (shape.clone(), f32s(&st.m)));
            out.insert(format!("{name}.v"), (shape, f32s(&st.v)));
            out.insert(format!("{name}.step"), (vec![], vec![st.step_count as f32]));
        }
        out
    }

    pub fn load_state_tensors(&mut self, tensors: &TensorMap) -> Result<(), TrainError> {
        let fetch = |suffix: &str, name: &str| -> Result<&(Vec<usize>, Vec<f32>), TrainError> {
            tensors.get(&format!("{name}{suffix}")).ok_or_else(|| {
                TrainError::Checkpoint(format!("missing optimizer tensor `{name}{suffix}`"))
            })
        };
        let from_f32 =
            |v: &[f32]| v.iter().map(|&x| E::from_f64(x as f64)).collect::<Vec<E>>();
        for (name, st) in self.muon_states.iter_mut() {
            let (_, m) = fetch(".momentum", name)?;
            let (_, rv) = fetch(".row_v", name)?;
            let (_, step) = fetch(".step", name)?;
            if m.len() != st.momentum.len() || rv.len() != st.row_second_moment.len() {
                return Err(TrainError::Checkpoint(format!("state shape mismatch for `{name}`")));
            }
            st.momentum = from_f32(m);
            st.row_second_moment = from_f32(rv);
            st.step_count = step[0] as u64;
        }
        for (name, st) in self.adamw_states.iter_mut() {
            let (_, m) = fetch(".m", name)?;
            let (_, v) = fetch(".v", name)?;
            let (_, step) = fetch(".step", name)?;
            if m.len() != st.m.len() || v.len() != st.v.len() {
                return Err(TrainError::Checkpoint(format!("state shape mismatch for `{name}`")));
            }
            st.m = from_f32(m);
            st.v = from_f32(v);
            st.step_count = step[0] as u64;
        }
        Ok(())
    }
}

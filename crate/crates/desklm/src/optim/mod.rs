//! Optimizers: NorMuon (+ cautious weight decay) for 2-D weight matrices,
//! AdamW for everything else, with the parameter partition that routes each
//! named parameter to its group, and µP width-scaling support.

mod adamw;
mod coordcheck;
mod mup;
mod newton_schulz;
mod normuon;

pub use adamw::{adamw_step, AdamWConfig, AdamWState};
pub use coordcheck::{coordinate_check, CoordCheckReport, CoordProbe};
pub use mup::{mup_apply, MupOverrides, MupSettings};
pub use newton_schulz::{ns_orthogonalize, NsCoefficients, NsResult};
pub use normuon::{
    cautious_decay_mask, neuron_normalize, normuon_step, NorMuonConfig, NorMuonState,
};

use std::collections::BTreeSet;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("unknown role for parameter `{0}`")]
    UnknownRole(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
}

/// What a named parameter is, as declared by the model. Partitioning needs
/// this because embeddings and the output head are rank-2 yet belong to the
/// AdamW group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Embedding,
    OutputHead,
    /// Hidden weight matrix (projections, FFN, gate projections).
    Weight,
    /// Rank-0/1 parameters: norm gains, per-layer scalars.
    Gain,
}

/// Disjoint, jointly exhaustive split of trainable parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamPartition {
    pub muon_group: Vec<String>,
    pub adamw_group: Vec<String>,
}

/// Routes parameters: embeddings, the output head, and everything of rank
/// < 2 go to AdamW; remaining weight matrices go to NorMuon.
pub fn partition_params(
    params: &[(String, usize, ParamRole)],
) -> Result<ParamPartition, OptimError> {
    let mut seen = BTreeSet::new();
    let mut muon = Vec::new();
    let mut adamw = Vec::new();
    for (name, rank, role) in params {
        if !seen.insert(name.clone()) {
            return Err(OptimError::DuplicateName(name.clone()));
        }
        match role {
            ParamRole::Embedding | ParamRole::OutputHead => adamw.push(name.clone()),
            ParamRole::Gain if *rank < 2 => adamw.push(name.clone()),
            ParamRole::Weight if *rank >= 2 => muon.push(name.clone()),
            // a rank-2 "gain" or rank-1 "weight" means the model mislabeled it
            _ => return Err(OptimError::UnknownRole(name.clone())),
        }
    }
    Ok(ParamPartition { muon_group: muon, adamw_group: adamw })
}

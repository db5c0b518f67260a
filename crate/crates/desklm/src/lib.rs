//! Desk-scale transformer pretraining laboratory.
//!
//! Everything runs on CPU from first principles: a tape-based reverse-mode
//! autodiff engine over a fixed op set, a decoder-only transformer with four
//! switchable architectural interventions (QK-norm, per-head gating,
//! normalized value residuals, depth-scaled norms), a NorMuon/AdamW optimizer
//! split with cautious weight decay, cosine and warmup-stable-decay LR
//! schedules, staged mixture sampling over binary token shards, and a
//! multi-stage trainer with checkpointing, post-hoc checkpoint EMA,
//! directional ablation grids and activation diagnostics.

pub mod config;
pub mod data;
pub mod diag;
pub mod model;
pub mod optim;
pub mod schedule;
pub mod tensor;
pub mod trainer;

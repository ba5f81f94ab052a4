//! Minimal reverse-mode differentiation over dense tensors.
//!
//! Operations are recorded on a [`Tape`] as they run; [`Tape::backward`]
//! walks the record in reverse and accumulates gradients into every node
//! that requires one.

pub(crate) mod kernels;
mod ops;
mod tape;

pub use ops::{
    log_sum_exp, sigmoid, softmax_row, Activation, BatchNormOut, Normalize, RunningStats, BN_EPS,
};
pub use tape::{Mode, Tape, Var};

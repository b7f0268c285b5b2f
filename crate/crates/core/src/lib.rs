//! Capacity dynamic distillation: train a compactor-equipped student under a
//! frozen teacher, sparsify the compactors with a group-lasso penalty steered
//! by retrieval-guided gradient resetting, then fold each
//! `conv3×3 → norm → compactor` stack into one slim convolution.

// `!(x > 0.0)` deliberately rejects NaN; index loops mirror the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod pipeline;
pub mod reparam;
pub mod rggr;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};

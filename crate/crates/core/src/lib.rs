//! Neural pathway explanations: a generator that maps a classifier's
//! activations to per-instance binary masks, plus baselines, metrics and
//! file formats around it.

// negated float comparisons are deliberate: they reject NaN along with out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod baselines;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod fixtures;
pub mod generator;
pub mod instrumentation;
pub mod io;
pub mod tensor;
pub mod training;
pub mod viz;

pub use error::{Error, Result};
pub use tensor::Tensor;

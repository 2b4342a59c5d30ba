//! Ontology-aware network (OAN) for zero-shot cross-modal retrieval.
//!
//! The numeric core (`diffcore`, `memory`, `losses`, `model`, `eval`) is
//! generic over [`Scalar`]; dataset files, checkpoints and the training loop
//! work in `f64`.

// NaN-rejecting checks are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checks;
pub mod dataset;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod losses;
pub mod memory;
pub mod modality;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod trainer;

pub use diffcore::{grad_check, GradCheckReport, Tape, Tensor, Var};
pub use error::{OanError, Result};
pub use memory::{BatchValues, OntologyDictionary};
pub use modality::Modality;
pub use scalar::Scalar;

pub type Real = f64;
pub type Tensor64 = Tensor<f64>;
pub type Tape64 = Tape<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape32 = Tape<f32>;

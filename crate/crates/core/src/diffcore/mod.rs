//! Dense matrices with tape-based reverse-mode differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, REL_ERR_FLOOR};
pub use tape::{log_sum_exp, Tape, Var, MIN_NORM};
pub use tensor::Tensor;

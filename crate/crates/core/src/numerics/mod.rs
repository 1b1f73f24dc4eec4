//! Dense tensors, reverse-mode differentiation and gradient checking.

mod gemm;
mod gradcheck;
mod tape;
mod tensor;

pub use gemm::{argmax, dot, transpose};
pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport};
pub use tape::{gelu, AttentionSpec, CustomVjp, Gradients, Tape, Var};
pub use tensor::{ParamSet, Real, Tensor};

#[cfg(test)]
mod tests;

//! Dense `f64` tensors and a reverse-mode tape.

mod attention;
mod gemm;
mod gradcheck;
mod graph;
mod ops;
mod tensor;

#[cfg(test)]
mod tests;

pub use gradcheck::{gradcheck, relative_error, GradcheckReport, InputReport, REL_FLOOR};
pub use graph::{AttnPair, Graph, Var};
pub use ops::MASK_VALUE;
pub use tensor::Tensor;

//! Dense tensors, reverse-mode autodiff, seeded RNG and gradient checking.

pub mod gradcheck;
pub mod graph;
pub mod rng;
pub mod tensor;

pub use gradcheck::{finite_diff_check, GradCheck, GradCheckReport, ParamCheck};
pub use graph::{AttentionMask, Gradients, Graph, Var};
pub use rng::Rng;
pub use tensor::{matmul, Tensor};

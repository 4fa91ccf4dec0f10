//! Dense tensors, a reverse-mode gradient tape, finite-difference checks,
//! parameter storage, checkpoint files and the optimiser.

pub mod checkpoint;
mod gradcheck;
mod graph;
pub(crate) mod kernels;
pub mod optim;
mod params;
mod real;
mod tensor;

pub use gradcheck::{grad_check, grad_check_split, grad_check_with_params, GradCheckOptions, GradCheckReport};
pub(crate) use graph::bilinear_forward;
pub use graph::{CustomBackward, Graph, Var};
pub use optim::{cosine_lr, AdamW};
pub use params::{named_rng, Init, ParamId, ParamStore, Parameter};
pub use real::Real;
pub use tensor::Tensor;

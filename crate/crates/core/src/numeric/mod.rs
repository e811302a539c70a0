//! Minimal differentiable array engine: a reverse-mode tape with exactly the
//! ops the encoder and the fine-tuning losses need, including FFT-based
//! circular convolution.

mod array;
pub mod fft;
mod gradcheck;
mod graph;
mod params;

pub use array::DiffArray;
pub use gradcheck::{grad_check, grad_check_sampled, relative_error, GradCheckReport, DEFAULT_STEP};
pub use graph::{Graph, ParamId, Var};
pub use params::ParamStore;

pub(crate) use array::{dot, norm};
pub(crate) use graph::shuffle;

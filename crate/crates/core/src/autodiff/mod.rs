//! Small reverse-mode autodiff engine covering the layers the segmentation
//! network uses.

mod adam;
mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{gradcheck, gradcheck_fn, rel_error, GradcheckReport, FD_STEP};
pub use graph::{Graph, Var};
pub use tensor::{Real, Tensor};

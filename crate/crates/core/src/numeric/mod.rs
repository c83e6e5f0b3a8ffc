//! Dense tensors, a reverse-mode autodiff tape, finite-difference gradient
//! checking, and checkpoint serialization.

pub mod checkpoint;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{
    check_gradients, check_gradients_at, relative_error, GradCheckReport, REL_ERROR_FLOOR,
};
pub use graph::{sigmoid, Graph, Var, LAYER_NORM_EPS};
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::Tensor;

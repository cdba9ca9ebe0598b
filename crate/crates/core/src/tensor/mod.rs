//! Dense `f32` tensors, a reverse-mode autodiff tape, parameter sets and
//! optimizers.

mod array;
mod graph;
mod optim;
mod params;

pub use array::Tensor;
pub use graph::{Gradients, Graph, NodeId, Padding, STANDARDIZE_EPS};
pub use optim::{optimizer_step, OptimizerKind, OptimizerState};
pub use params::{glorot_uniform, Bound, Grads, ModelParams, ParamRole, CHECKPOINT_MAGIC};


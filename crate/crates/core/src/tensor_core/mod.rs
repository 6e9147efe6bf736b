//! Dense tensors, the differentiable layer catalog, and gradient checking.

mod gradcheck;
mod graph;
mod kernels;
mod layers;
mod params;
mod tensor;

pub use gradcheck::{grad_check, resample_near_kinks, GradCheckReport, GRAD_CHECK_EPS, GRAD_CHECK_TOL};
pub use graph::{with_corrupted_backward, Activation, Gradients, Graph, OpKind, Var, LAYER_NORM_EPS};
pub use layers::{attention_block, AttentionBlockVars, StripOrientation};
pub use params::{Init, ParamSpec, Parameter};
pub use tensor::Tensor;

pub use kernels::sigmoid;

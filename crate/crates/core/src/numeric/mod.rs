//! Dense tensors, compute kernels and the differentiation tape.

pub mod gradcheck;
pub mod kernels;
pub mod tape;
pub mod tensor;

pub use gradcheck::{
    finite_diff_check, finite_diff_report, GradCheckReport, Objective, DEFAULT_STEP,
};
pub use kernels::{depthwise_conv3x3, layer_norm, leaky_relu, pointwise_conv};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};

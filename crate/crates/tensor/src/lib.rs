//! Deterministic `f64` tensor engine with reverse-mode gradients for a fixed
//! set of ops: convolutions (2D, 3D, transposed 3D), batch norm, attention,
//! softmax, patch pooling and the elementwise/shape glue between them.

pub mod error;
pub mod gradcheck;
pub mod io;
pub mod ops;
pub mod param;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};
pub use ops::attention::{attention_weights, softmax};
pub use ops::conv::{conv3d_backward_input, conv3d_forward, conv_transpose3d_forward, Conv3dOpts};
pub use ops::norm::{BatchStats, NormMode, RunningStats};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{BackwardArgs, GradFn, Gradients, Tape, Var};
pub use tensor::Tensor;

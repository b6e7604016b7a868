//! Differentiable building blocks written out by hand in double precision.

mod checkpoint;
mod dense;
mod gradcheck;
mod loss;
mod lstm;
mod matrix;
mod optim;
mod stack;

pub use checkpoint::{
    decode_checkpoint, decode_tensors, encode_checkpoint, read_checkpoint, write_checkpoint, NamedTensor,
    CHECKPOINT_MAGIC,
};
pub use dense::DenseLayer;
pub use gradcheck::{grad_check, relative_error, GradCheckReport, TensorCheck};
pub use loss::{log_softmax, softmax, softmax_xent};
pub use lstm::{Gate, LstmLayer, LstmState};
pub use matrix::{glorot_bound, Matrix};
pub use optim::{sgd_update, OptimizerState, SgdParams};
pub use stack::{
    backprop_window, forward_window, DropoutSpec, LayerStack, Mode, StackShape, WindowGrad,
    WindowOutput,
};

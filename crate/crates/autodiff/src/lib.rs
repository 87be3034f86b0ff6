//! Small dense-tensor library with tape-based reverse-mode differentiation,
//! sized for graph networks over motion-primitive images.
//!
//! Tensors are immutable `f64` values. A [`Tape`] records each layer as it is
//! evaluated and [`Tape::backward`] replays the adjoints in reverse.

mod adam;
mod error;
mod gradcheck;
mod kernels;
mod params;
mod serialize;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use error::{Result, TensorError};
pub use gradcheck::{finite_difference_check, tape_objective, GradCheckConfig, GradCheckReport};
pub use params::{accumulate_gradients, GradientMap, ParamVars, ParameterStore};
pub use serialize::{
    read_container, read_tensor, tensor_deserialize, tensor_serialize, write_container,
    write_tensor, Container, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, TENSOR_MAGIC, TENSOR_VERSION,
};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

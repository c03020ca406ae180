//! Reverse-mode autodiff over dense tensors, sized for small convolutional
//! auto-encoders, MLP critics and LSTMs trained on one machine.
//!
//! Everything is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checks). Heavy kernels route through a single GEMM per call and
//! split per-image work across threads when the `parallel` feature is on.

pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use layers::{BatchNorm, Conv2d, ConvTranspose2d, Init, Linear, LstmCell, LstmState, Mode};
pub use optim::{Adam, AdamConfig};
pub use params::{NamedTensor, ParamId, ParamStore};
pub use scalar::{DType, Scalar};
pub use tape::{Gradients, StatUpdate, Tape, Var};
pub use tensor::Tensor;

//! Blockwise low-bit compression and integer inference for transformer
//! encoders.
//!
//! Weights, biases and intermediate results are cut into square tiles, each
//! tile is quantized with its own power-of-two shift, matrix products run on
//! integer tiles with shift alignment, and GELU / Softmax / LayerNorm are
//! evaluated through 256-entry lookup tables with interpolation.

pub mod blockmm;
pub mod container;
pub mod engine;
pub mod error;
pub mod fixed;
pub mod formats;
pub mod nonlinear;
pub mod report;
pub mod quantizer;
pub mod scalar;
pub mod tensor;

pub use error::{BctError, Result};
pub use formats::{Codec, Fp8Format, Fp8Tensor};
pub use quantizer::{BlockQTensor, CalibStats, ClipBounds};
pub use scalar::Scalar;
pub use tensor::{BlockGrid, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;

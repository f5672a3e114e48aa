//! Inference core for a hypernetwork-driven segmentation decoder: dense NCHW
//! tensors, dynamic patch-wise convolution, weight generation from a context
//! signal, model assembly, batch-norm fusion and cost accounting.

pub mod accounting;
pub mod bench;
pub mod decoder;
pub mod dpwconv;
pub mod error;
pub mod hyper;
pub mod io;
pub mod model;
pub mod ops;
pub mod par;
pub mod scalar;
pub mod tensor;

pub use error::{Error, ParseError, Result};
pub use model::{Model, ModelConfig, ModelPlan};
pub use scalar::{DType, Scalar};
pub use tensor::{Shape, Tensor};

//! Introspective adversarial network and neural photo editor.
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix the precision for the common cases: double precision for
//! gradient checks and tests, single precision for training runs.

pub mod checkpoint;
pub mod conv;
pub mod data;
pub mod editor;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod ian;
pub mod imaging;
pub mod init;
pub mod mdc;
pub mod metrics;
pub mod optim;
pub mod regularizers;
pub mod scalar;
pub mod tensor;

pub use conv::Padding;
pub use error::{Error, Result};
pub use gradcheck::grad_check;
pub use graph::{BnMode, Graph, Var};
pub use scalar::{DType, Real};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;

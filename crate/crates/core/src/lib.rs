//! Reference-based video enhancement: a texture transformer that copies
//! detail from one high-quality still into a degraded low-resolution clip,
//! with the autodiff, training loop and file formats needed to run it.
//!
//! Everything numeric is generic over [`scalar::Scalar`]; `f32` is the
//! compute type, `f64` exists so tests can cross-check against tighter
//! tolerances.

pub mod backbone;
pub mod conv;
pub mod error;
pub mod graph;
pub mod image;
pub mod init;
pub mod io;
pub mod loss;
pub mod map;
pub mod metrics;
pub mod optim;
pub mod scalar;
pub mod texture;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId, ParamSet, Parameter};
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;

//! Tensor autograd, recurrent-convolutional building blocks and the
//! classification, segmentation and density-regression networks built on
//! them, with the data pipeline, losses, optimizers and metrics needed to
//! train and score them.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
mod kernels;
pub mod loss;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Mode, Var};
pub use models::{Model, ModelKind, ModelSpec, Task};
pub use tensor::{Scalar, Tensor};

//! Aggregated pyramid vision transformer built on a small reverse-mode
//! tensor engine.
//!
//! The crate is organized bottom-up: [`tensor`] and [`graph`] provide dense
//! storage and differentiable primitives, [`attention`] and [`blocks`] build
//! spatial-reduction attention and the group encoder, [`model`] assembles
//! the four-stage pyramid, and [`data_io`] / [`training`] cover CIFAR-10
//! ingestion, checkpoints and the optimization loop.

pub mod attention;
pub mod blocks;
#[cfg(feature = "cli")]
pub mod cli;
pub mod data_io;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod params;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{Scalar, Tensor};

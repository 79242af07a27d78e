//! Video editing learned from image pairs on a frozen spatiotemporal
//! diffusion transformer.

pub mod backbone;
pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod flow;
pub mod model;
pub mod nn;
pub mod params;
pub mod predict_update;
pub mod prompt;
pub mod rng;
pub mod spatial;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Scalar, Tensor, Var};

pub mod attention;
pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod params;
pub mod refine;
pub mod rpn;
pub mod tensor;
pub mod tracker;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

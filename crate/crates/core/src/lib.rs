// Index loops read closer to the math in the small fixed-size kernels.
#![allow(clippy::needless_range_loop)]

pub mod error;
pub mod geometry;
pub mod rng;
pub mod tape;

pub use error::{Error, Result};
pub mod eval;
pub mod flow;
pub mod infer;
pub mod loss;
pub mod network;
pub mod train;

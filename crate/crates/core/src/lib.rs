pub mod checkpoint;
pub mod data;
pub mod decode;
pub mod error;
pub mod eval;
pub mod grid;
pub mod model;
pub mod nn;
pub mod probe;
pub mod rng;
pub mod train;

pub use error::{Error, Result};

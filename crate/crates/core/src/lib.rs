pub mod active;
pub mod bgmm;
pub mod control;
pub mod cost;
pub mod error;
pub mod experiment;
pub mod gaussian;
pub mod linalg;
pub mod mixture;
pub mod renyi;
pub mod sim;
pub mod variational;

pub use error::{Error, Result};

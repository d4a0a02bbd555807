pub mod autodiff;
pub mod codec;
pub mod error;
pub mod eval;
pub mod featurize;
pub mod graph;
pub mod nn;
pub mod prior;
pub mod quantizer;
pub mod trainer;
#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use graph::Graph;

pub mod analysis;
pub mod checkpoint;
pub mod csbm;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod experts;
pub mod gate;
pub mod graph;
pub mod matrix;
pub mod moe;
pub mod nn;
pub mod pattern;
pub mod rng;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, GraphOperators, PropagationKind, Propagator};
pub use matrix::Matrix;

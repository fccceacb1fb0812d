//! Self-exciting point processes on graphs with neural temporal kernels and
//! graph-filter spatial kernels.

pub mod basis;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod events;
pub mod exec;
pub mod filters;
pub mod graph;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod simulate;
pub mod train;

pub use error::{Error, Result};
pub use graph::Graph;
pub use matrix::SquareMatrix;

//! Fleet repositioning with Laplacian-derived options.

pub mod config;
pub mod demand;
pub mod drop;
pub mod error;
pub mod harness;
pub mod hexgrid;
pub mod jobs;
pub mod laplace;
pub mod nn;
pub mod policy;
pub mod sim;
pub mod terg;

pub use error::{Error, Result};

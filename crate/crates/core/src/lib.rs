//! Multi-state recurrent convolutional networks.
//!
//! A model is a cyclic graph of *states* (feature maps of fixed size)
//! connected by time-windowed *transition functions*. The [`unroll`] module
//! compiles such a graph into an acyclic, time-stamped DAG; [`params`] holds
//! weights tied across unrolled instances; [`train`] drives CIFAR-10
//! training; [`dynamics`] covers the linear dynamical-systems view of
//! residual iteration.

pub mod config;
pub mod dynamics;
pub mod error;
pub mod exec;
pub mod graph;
pub mod params;
pub mod tensor;
pub mod train;
pub mod unroll;

pub use error::{Error, Result};
pub use tensor::Tensor;

//! Flattened window attention for sparse BEV point clouds.
//!
//! Points are sorted by window, cut into groups of equal size and attended
//! within each group. The [`workload`] module quantifies what this buys over
//! partitioning by equally shaped windows.

pub mod bench;
pub mod error;
pub mod flatten;
pub mod fwa;
pub mod geometry;
pub mod kernels;
pub mod oracle;
pub mod report;
pub mod tensor;
pub mod workload;

pub use error::{FwaError, Result};

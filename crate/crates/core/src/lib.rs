//! Hierarchical convolution-transformer point cloud classification.

pub mod attention;
pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod lfa;
pub mod network;
pub mod nn;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub mod pointcloud;
pub mod sampling;

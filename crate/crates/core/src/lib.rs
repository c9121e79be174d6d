//! Large-scale place description for 3D point clouds.
//!
//! The pipeline turns a normalized point cloud into a unit-norm global
//! descriptor: adaptive per-point geometric features, a feature network, graph
//! aggregation in feature space and Cartesian space, and a NetVLAD head.
//! Descriptors are compared by L2 distance for place retrieval.

pub mod analysis;
mod binio;
pub mod cloud;
pub mod error;
pub mod features;
pub mod kv;
pub mod network;
pub mod retrieval;
pub mod spatial;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

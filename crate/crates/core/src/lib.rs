//! Mesh-free transformer surrogate for steady aerodynamic fields.
//!
//! A geometry enters as a raw point cloud, gets compressed into a sequence
//! of latent geometries by a cross-attention encoder, and a physics decoder
//! maps arbitrary, mutually independent query points to physical quantities
//! (surface pressure, volume velocity). Training, chunked inference, force
//! post-processing, and a synthetic potential-flow data generator round out
//! the pipeline.

pub mod diffcore;
pub mod error;

pub use error::{Error, Result};

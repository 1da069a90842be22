//! Garment dynamics prediction driven by per-face deformation gradients.
//!
//! The crate covers the full loop: mesh geometry and dual-graph geodesics,
//! Poisson reconstruction from a gradient field, signed-distance queries
//! against a moving collider, per-face feature assembly, a manifold-aware
//! transformer with hand-written reverse-mode gradients, auto-regressive
//! rollout with collision refinement, a mass-spring simulator that produces
//! training data, and the file formats and metrics around them.

pub mod bvh;
pub mod collider;
pub mod error;
pub mod features;
pub mod geometry;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod poisson;
pub mod refine;
pub mod simdata;
pub mod sparse;
pub mod trainer;

pub use error::{Error, Result};

//! Radar scene-flow estimation on sparse point clouds.
//!
//! A hierarchical coarse-to-fine network predicts per-point 3D displacement
//! between consecutive radar scans. Each level combines point-level matching
//! attention with a traffic-context feature grid built from a frozen BEV
//! detector stub, and the whole thing trains weakly supervised on a synthetic
//! rigid-body radar world.

pub mod blocks;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod odstub;
pub mod params;
pub mod pipeline;
pub mod synthworld;
pub mod tape;

pub use error::{CoreError, Result};

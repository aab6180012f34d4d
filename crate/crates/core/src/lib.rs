//! Core algorithms for query-point object interaction understanding.
//!
//! Everything here is `no_std` + `alloc`: the annotation schema and its
//! validation, the line/camera/homography geometry, every training loss with
//! its analytic gradient, the evaluation metrics, a deterministic synthetic
//! scene generator and the articulation renderer. File formats, the network
//! and the command-line tools live in the `interact3d` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod datamodel;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod losses;
pub mod metrics;
pub mod renderer;
pub mod synthgen;

pub use datamodel::{
    ActionClass, AffordanceTarget, ArticulationClass, BoxXYXY, InteractionPrediction, Mask,
    MovableClass, QueryAnnotation, QueryPoint, RigidityClass, SceneSample, MAX_QUERIES,
};
pub use error::{Error, Result};
pub use geometry::{AxisEncoding, CameraModel, Homography, Line2D, Line3D};
pub use grid::Grid;

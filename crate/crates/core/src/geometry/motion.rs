#[allow(unused_imports)] // std, when linked, provides these inherently
use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::camera::Vec3;
use crate::error::{Error, Result};

/// A 3D line through `origin` along the unit vector `direction`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Line3D {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Line3D {
    pub fn new(origin: Vec3, direction: Vec3) -> Result<Self> {
        let len = direction.norm();
        if !(len > 1e-12) || !len.is_finite() {
            return Err(Error::Degenerate("3D line direction has zero length".into()));
        }
        Ok(Self { origin, direction: direction / len })
    }

    pub fn through(a: Vec3, b: Vec3) -> Result<Self> {
        Self::new(a, b - a)
    }

    pub fn distance_to(&self, p: &Vec3) -> f64 {
        let d = p - self.origin;
        (d - self.direction * d.dot(&self.direction)).norm()
    }

    /// Angle between the two line directions, in `[0, pi/2]`.
    pub fn angle_to(&self, other: &Line3D) -> f64 {
        self.direction.dot(&other.direction).abs().min(1.0).acos()
    }

    pub fn reversed(&self) -> Self {
        Self { origin: self.origin, direction: -self.direction }
    }
}

/// Rodrigues rotation of `points` by `angle` radians about `axis` (right-hand
/// rule around `axis.direction`).
pub fn rotate_points_about_axis(points: &[Vec3], axis: &Line3D, angle: f64) -> alloc::vec::Vec<Vec3> {
    if angle == 0.0 {
        return points.to_vec();
    }
    let k = axis.direction;
    let (s, c) = angle.sin_cos();
    points
        .iter()
        .map(|p| {
            let v = p - axis.origin;
            let rotated = v * c + k.cross(&v) * s + k * (k.dot(&v) * (1.0 - c));
            axis.origin + rotated
        })
        .collect()
}

use core::f64::consts::PI;

use nalgebra::Vector3;
#[allow(unused_imports)] // std, when linked, provides these inherently
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

pub type Vec3 = Vector3<f64>;

/// Pinhole intrinsics in pixels. Camera looks down +z with x right, y down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::range("camera", "focal lengths must be positive"));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Square pixels, principal point at the image center, given vertical FOV.
    pub fn from_vertical_fov(width: usize, height: usize, fov_y: f64) -> Self {
        let fy = 0.5 * height as f64 / (0.5 * fov_y).tan();
        Self { fx: fy, fy, cx: 0.5 * width as f64, cy: 0.5 * height as f64 }
    }

    /// Intrinsics assumed for images that carry none: 60 degree vertical FOV.
    pub fn default_for(width: usize, height: usize) -> Self {
        Self::from_vertical_fov(width, height, PI / 3.0)
    }

    /// The same camera for an image resampled by `(sx, sy)`.
    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self { fx: self.fx * sx, fy: self.fy * sy, cx: self.cx * sx, cy: self.cy * sy }
    }

    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Result<Vec3> {
        if !(depth > 0.0) {
            return Err(Error::Precondition("backprojection needs positive depth".into()));
        }
        Ok(self.backproject_unchecked(u, v, depth))
    }

    #[inline]
    pub(crate) fn backproject_unchecked(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        Vec3::new(depth * (u - self.cx) / self.fx, depth * (v - self.cy) / self.fy, depth)
    }

    /// Pixel coordinates of `p`, or `None` behind the camera.
    #[inline]
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        (p.z > 1e-12).then(|| (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Unit ray direction through pixel `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0).normalize()
    }
}

/// Per-pixel unit normals from a depth map whose resolution matches `cam`.
///
/// Each normal is the normalized cross product of the horizontal and vertical
/// finite differences of the backprojected surface (central inside, one-sided
/// on the border), flipped to face the camera (`n.z <= 0`).
pub fn normals_from_depth(depth: &Grid<f64>, cam: &CameraModel) -> Grid<Vec3> {
    let (w, h) = (depth.width(), depth.height());
    let point = |c: usize, r: usize| {
        cam.backproject_unchecked(c as f64 + 0.5, r as f64 + 0.5, *depth.get(c, r))
    };
    Grid::from_fn(w, h, |c, r| {
        let (c0, c1) = (c.saturating_sub(1), (c + 1).min(w - 1));
        let (r0, r1) = (r.saturating_sub(1), (r + 1).min(h - 1));
        let du = point(c1, r) - point(c0, r);
        let dv = point(c, r1) - point(c, r0);
        let n = du.cross(&dv);
        let len = n.norm();
        if !(len > 0.0) || !len.is_finite() {
            return Vec3::new(0.0, 0.0, -1.0);
        }
        let n = n / len;
        if n.z > 0.0 {
            -n
        } else {
            n
        }
    })
}

/// Renormalized mean of `normals` over the set cells of `mask`.
pub fn mean_normal(normals: &Grid<Vec3>, mask: &Grid<bool>) -> Option<Vec3> {
    if !normals.same_shape(mask) {
        return None;
    }
    let sum = normals
        .as_slice()
        .iter()
        .zip(mask.as_slice())
        .filter(|(_, &m)| m)
        .fold(Vec3::zeros(), |acc, (n, _)| acc + n);
    let len = sum.norm();
    (len > 1e-12).then(|| sum / len)
}

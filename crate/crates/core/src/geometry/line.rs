use core::f64::consts::{PI, TAU};

#[allow(unused_imports)] // std, when linked, provides these inherently
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An image line `x cos(theta) + y sin(theta) = r` in normalized image
/// coordinates (origin top-left, unit width and height).
///
/// Constructed lines are canonical: `theta` lies in `[0, pi)` and `r` carries
/// the sign. `(theta + pi, -r)` describes the same line and canonicalizes to
/// `(theta, r)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Line2D {
    pub theta: f64,
    pub r: f64,
}

impl Line2D {
    pub fn new(theta: f64, r: f64) -> Self {
        let mut t = theta % TAU;
        if t < 0.0 {
            t += TAU;
        }
        let mut r = r;
        if t >= PI {
            t -= PI;
            r = -r;
        }
        // Rounding can leave t a hair below pi; that is the same line as t = 0.
        if t >= PI || PI - t < 1e-15 {
            t = 0.0;
            r = -r;
        }
        Self { theta: t, r }
    }

    /// The line through two distinct points.
    pub fn through(a: (f64, f64), b: (f64, f64)) -> Result<Self> {
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len = (dx * dx + dy * dy).sqrt();
        if len < 1e-12 {
            return Err(Error::Degenerate("line through coincident points".into()));
        }
        // Normal is the direction rotated by 90 degrees.
        let (nx, ny) = (-dy / len, dx / len);
        let theta = ny.atan2(nx);
        Ok(Self::new(theta, a.0 * nx + a.1 * ny))
    }

    #[inline]
    pub fn normal(&self) -> (f64, f64) {
        (self.theta.cos(), self.theta.sin())
    }

    #[inline]
    pub fn direction(&self) -> (f64, f64) {
        (-self.theta.sin(), self.theta.cos())
    }

    /// Signed distance of `(x, y)` from the line.
    #[inline]
    pub fn signed_distance(&self, x: f64, y: f64) -> f64 {
        let (c, s) = self.normal();
        x * c + y * s - self.r
    }

    /// Foot of the perpendicular from the origin.
    pub fn anchor(&self) -> (f64, f64) {
        let (c, s) = self.normal();
        (self.r * c, self.r * s)
    }

    pub fn is_valid(&self) -> bool {
        self.theta.is_finite() && self.r.is_finite() && (0.0..PI).contains(&self.theta)
    }

    /// Clips the line to the axis-aligned rectangle `[x0, x1] x [y0, y1]`,
    /// returning segment endpoints, or `None` when it misses the rectangle.
    pub fn clip_to_rect(&self, x0: f64, y0: f64, x1: f64, y1: f64) -> Option<((f64, f64), (f64, f64))> {
        let (px, py) = self.anchor();
        let (dx, dy) = self.direction();
        let mut t_min = f64::NEG_INFINITY;
        let mut t_max = f64::INFINITY;
        for (p, d, lo, hi) in [(px, dx, x0, x1), (py, dy, y0, y1)] {
            if d.abs() < 1e-15 {
                if p < lo || p > hi {
                    return None;
                }
            } else {
                let (a, b) = ((lo - p) / d, (hi - p) / d);
                t_min = t_min.max(a.min(b));
                t_max = t_max.min(a.max(b));
            }
        }
        if t_max < t_min {
            return None;
        }
        Some(((px + t_min * dx, py + t_min * dy), (px + t_max * dx, py + t_max * dy)))
    }

    pub fn clip_to_unit_square(&self) -> Option<((f64, f64), (f64, f64))> {
        self.clip_to_rect(0.0, 0.0, 1.0, 1.0)
    }

    /// `(sin 2 theta, cos 2 theta, r)`.
    pub fn encode(&self) -> AxisEncoding {
        let t2 = 2.0 * self.theta;
        AxisEncoding { s2: t2.sin(), c2: t2.cos(), r: self.r }
    }
}

/// Continuous regression target for a [`Line2D`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisEncoding {
    pub s2: f64,
    pub c2: f64,
    pub r: f64,
}

impl AxisEncoding {
    pub fn as_array(&self) -> [f64; 3] {
        [self.s2, self.c2, self.r]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self { s2: a[0], c2: a[1], r: a[2] }
    }

    /// Inverse of [`Line2D::encode`]; the angle pair need not be unit length.
    pub fn decode(&self) -> Result<Line2D> {
        let norm = (self.s2 * self.s2 + self.c2 * self.c2).sqrt();
        if !(norm > 1e-12) || !self.r.is_finite() {
            return Err(Error::Degenerate("axis encoding has no angle component".into()));
        }
        let theta = (self.s2 / norm).atan2(self.c2 / norm) / 2.0;
        let theta = if theta < 0.0 { theta + PI } else { theta };
        Ok(Line2D::new(theta, self.r))
    }
}

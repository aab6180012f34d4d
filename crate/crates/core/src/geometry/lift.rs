use alloc::vec::Vec;

use nalgebra::{Matrix3, SymmetricEigen};
#[allow(unused_imports)] // std, when linked, provides these inherently
use num_traits::Float;

use super::camera::{CameraModel, Vec3};
use super::line::Line2D;
use super::motion::Line3D;
use crate::error::{Error, Result};
use crate::grid::Grid;

const MIN_SAMPLES: usize = 16;
const BOX_DILATION: f64 = 0.10;

fn principal_line(points: &[Vec3]) -> Result<Line3D> {
    let n = points.len() as f64;
    let centroid = points.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov / n);
    let k = eig.eigenvalues.imax();
    Line3D::new(centroid, eig.eigenvectors.column(k).into_owned())
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Lifts an image-space rotation axis to 3D using a depth map.
///
/// `depth`, `mask` and `cam` must share one resolution. The axis is clipped to
/// the mask's bounding box dilated by 10% per side, sampled at least 16 times,
/// each sample backprojected with bilinear depth, and a 3D line fitted by
/// principal direction with two rounds of median-absolute-deviation rejection
/// on the point-to-line residuals. The result points along the sampling
/// direction of the clipped 2D segment.
pub fn lift_axis_to_3d(axis: &Line2D, depth: &Grid<f64>, mask: &Grid<bool>, cam: &CameraModel) -> Result<Line3D> {
    if !depth.same_shape(mask) {
        return Err(Error::Shape("depth and mask resolutions differ".into()));
    }
    let (w, h) = (depth.width() as f64, depth.height() as f64);
    if axis.clip_to_unit_square().is_none() {
        return Err(Error::Precondition("axis does not intersect the image".into()));
    }
    let (c0, r0, c1, r1) = mask.bounds().ok_or_else(|| Error::Precondition("empty mask".into()))?;
    let (bw, bh) = ((c1 + 1 - c0) as f64, (r1 + 1 - r0) as f64);
    let x0 = ((c0 as f64 - BOX_DILATION * bw) / w).max(0.0);
    let x1 = (((c1 + 1) as f64 + BOX_DILATION * bw) / w).min(1.0);
    let y0 = ((r0 as f64 - BOX_DILATION * bh) / h).max(0.0);
    let y1 = (((r1 + 1) as f64 + BOX_DILATION * bh) / h).min(1.0);
    let (a, b) = axis
        .clip_to_rect(x0, y0, x1, y1)
        .ok_or_else(|| Error::Precondition("axis misses the object region".into()))?;
    let (au, av, bu, bv) = (a.0 * w, a.1 * h, b.0 * w, b.1 * h);
    let length_px = ((bu - au).powi(2) + (bv - av).powi(2)).sqrt();
    let count = MIN_SAMPLES.max(length_px.ceil() as usize);

    let mut points: Vec<Vec3> = (0..count)
        .filter_map(|k| {
            let t = (k as f64 + 0.5) / count as f64;
            let (u, v) = (au + t * (bu - au), av + t * (bv - av));
            let z = depth.sample_bilinear(u, v);
            (z > 0.0 && z.is_finite()).then(|| cam.backproject_unchecked(u, v, z))
        })
        .collect();
    if points.len() < 2 {
        return Err(Error::Degenerate("fewer than 2 valid depth samples on the axis".into()));
    }

    let mut line = principal_line(&points)?;
    for _ in 0..2 {
        let mut res: Vec<f64> = points.iter().map(|p| line.distance_to(p)).collect();
        let med = median(&mut res.clone());
        let mut dev: Vec<f64> = res.iter().map(|r| (r - med).abs()).collect();
        let mad = median(&mut dev);
        let cutoff = med + 3.0 * 1.4826 * mad.max(1e-9);
        let kept: Vec<Vec3> =
            points.iter().zip(res.iter_mut()).filter(|(_, r)| **r <= cutoff).map(|(p, _)| *p).collect();
        if kept.len() < 2 || kept.len() == points.len() {
            break;
        }
        points = kept;
        line = principal_line(&points)?;
    }

    let forward = cam.backproject_unchecked(bu, bv, 1.0) - cam.backproject_unchecked(au, av, 1.0);
    Ok(if line.direction.dot(&forward) < 0.0 { line.reversed() } else { line })
}

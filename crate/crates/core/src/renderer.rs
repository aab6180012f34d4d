//! Animating articulated parts from a single view.
//!
//! The part's pixels are lifted to 3D with the depth map, moved rigidly
//! (rotated about the lifted hinge, or translated along the mean surface
//! normal), projected back, and the planar motion is summarized by a
//! homography that warps the part's pixels and mask.

use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)] // std, when linked, provides these inherently
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::datamodel::RgbGrid;
use crate::error::{Error, Result};
use crate::geometry::{
    fit_homography_ransac, lift_axis_to_3d, mean_normal, normals_from_depth, rotate_points_about_axis,
    CameraModel, Homography, Line2D, Line3D, RansacParams, Vec3,
};
use crate::grid::Grid;

/// Correspondences kept for the homography fit.
pub const MAX_CORRESPONDENCES: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    /// Amounts are angles in radians.
    Rotation,
    /// Amounts are offsets in depth units.
    Translation,
}

/// One animation frame; `rgba` is transparent outside the warped part.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub rgba: Grid<[u8; 4]>,
    pub mask: Grid<bool>,
    pub homography: Homography,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArticulationClip {
    pub kind: MotionKind,
    pub amounts: Vec<f64>,
    pub frames: Vec<Frame>,
    /// Hinge for rotations, oriented so positive angles move the part toward
    /// the camera; the translation direction otherwise.
    pub axis: Line3D,
}

/// Inverse-mapped warp of `mask` by `h` (source to destination), sampled
/// bilinearly and thresholded at 0.5. Pixels mapping outside the source are
/// empty.
pub fn warp_mask(mask: &Grid<bool>, h: &Homography) -> Result<Grid<bool>> {
    let inv = h.inverse()?;
    let soft = mask.map(|&b| if b { 1.0 } else { 0.0 });
    let (w, hgt) = (mask.width() as f64, mask.height() as f64);
    Ok(Grid::from_fn(mask.width(), mask.height(), |c, r| {
        match inv.apply(c as f64 + 0.5, r as f64 + 0.5) {
            Some((x, y)) if (0.0..=w).contains(&x) && (0.0..=hgt).contains(&y) => soft.sample_bilinear(x, y) > 0.5,
            _ => false,
        }
    }))
}

/// Warps the part's pixels; alpha is the warped mask.
pub fn warp_part(image: &RgbGrid, mask: &Grid<bool>, h: &Homography) -> Result<(Grid<[u8; 4]>, Grid<bool>)> {
    if !image.same_shape(mask) {
        return Err(Error::Shape("image and mask resolutions differ".into()));
    }
    let inv = h.inverse()?;
    let warped = warp_mask(mask, h)?;
    let channels: Vec<Grid<f64>> = (0..3).map(|k| image.map(|p| p[k] as f64)).collect();
    let rgba = Grid::from_fn(image.width(), image.height(), |c, r| {
        if !*warped.get(c, r) {
            return [0, 0, 0, 0];
        }
        let (x, y) = inv.apply(c as f64 + 0.5, r as f64 + 0.5).unwrap_or((0.0, 0.0));
        let px = |k: usize| channels[k].sample_bilinear(x, y).round().clamp(0.0, 255.0) as u8;
        [px(0), px(1), px(2), 255]
    });
    Ok((rgba, warped))
}

/// Paints `frame` over `background`.
pub fn composite(background: &RgbGrid, frame: &Frame) -> RgbGrid {
    Grid::from_fn(background.width(), background.height(), |c, r| {
        let p = frame.rgba.get(c, r);
        if p[3] > 0 {
            [p[0], p[1], p[2]]
        } else {
            *background.get(c, r)
        }
    })
}

/// Cells whose 4-neighbours are all set; finite differences there never
/// straddle the part boundary.
fn erode(mask: &Grid<bool>) -> Grid<bool> {
    let (w, h) = (mask.width(), mask.height());
    Grid::from_fn(w, h, |c, r| {
        c > 0
            && r > 0
            && c + 1 < w
            && r + 1 < h
            && *mask.get(c, r)
            && *mask.get(c - 1, r)
            && *mask.get(c + 1, r)
            && *mask.get(c, r - 1)
            && *mask.get(c, r + 1)
    })
}

/// Mask pixels backprojected with their depth, evenly subsampled.
fn part_points(mask: &Grid<bool>, depth: &Grid<f64>, cam: &CameraModel) -> Result<Vec<((f64, f64), Vec3)>> {
    let cells: Vec<(usize, usize)> = (0..mask.height())
        .flat_map(|r| (0..mask.width()).map(move |c| (c, r)))
        .filter(|&(c, r)| *mask.get(c, r) && *depth.get(c, r) > 0.0)
        .collect();
    if cells.len() < 4 {
        return Err(Error::Degenerate(format!("only {} usable mask pixels", cells.len())));
    }
    let step = cells.len().div_ceil(MAX_CORRESPONDENCES);
    Ok(cells
        .iter()
        .step_by(step)
        .map(|&(c, r)| {
            let (u, v) = (c as f64 + 0.5, r as f64 + 0.5);
            ((u, v), cam.backproject_unchecked(u, v, *depth.get(c, r)))
        })
        .collect())
}

fn check_inputs(image: &RgbGrid, mask: &Grid<bool>, depth: &Grid<f64>) -> Result<()> {
    if !image.same_shape(mask) || !image.same_shape(depth) {
        return Err(Error::Shape("image, mask and depth resolutions differ".into()));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn clip(
    image: &RgbGrid,
    mask: &Grid<bool>,
    cam: &CameraModel,
    points: &[((f64, f64), Vec3)],
    amounts: &[f64],
    kind: MotionKind,
    axis: Line3D,
    mv: impl Fn(&[Vec3], f64) -> Vec<Vec3>,
) -> Result<ArticulationClip> {
    let src: Vec<(f64, f64)> = points.iter().map(|p| p.0).collect();
    let xyz: Vec<Vec3> = points.iter().map(|p| p.1).collect();
    let params = RansacParams { threshold_px: 1.0, iterations: 300, seed: 0 };
    let mut frames = Vec::with_capacity(amounts.len());
    for &amount in amounts {
        let h = if amount == 0.0 {
            Homography::identity()
        } else {
            let moved = mv(&xyz, amount);
            let mut s = Vec::with_capacity(src.len());
            let mut d = Vec::with_capacity(src.len());
            for (p, q) in src.iter().zip(&moved) {
                if let Some(uv) = cam.project(q) {
                    s.push(*p);
                    d.push(uv);
                }
            }
            fit_homography_ransac(&s, &d, &params)?.0
        };
        let (rgba, warped) = warp_part(image, mask, &h)?;
        frames.push(Frame { rgba, mask: warped, homography: h });
    }
    Ok(ArticulationClip { kind, amounts: amounts.to_vec(), frames, axis })
}

/// Orients `axis` so that a small positive rotation moves `p` toward the
/// camera.
fn orient_toward_camera(axis: Line3D, p: &Vec3) -> Line3D {
    let moved = rotate_points_about_axis(core::slice::from_ref(p), &axis, 1e-3);
    if moved[0].norm() > p.norm() {
        axis.reversed()
    } else {
        axis
    }
}

/// Rotates the masked part about `axis2d` lifted to 3D, one frame per angle.
/// Positive angles swing the part toward the camera.
pub fn render_rotation(
    image: &RgbGrid,
    mask: &Grid<bool>,
    axis2d: &Line2D,
    depth: &Grid<f64>,
    cam: &CameraModel,
    angles: &[f64],
) -> Result<ArticulationClip> {
    check_inputs(image, mask, depth)?;
    let axis = lift_axis_to_3d(axis2d, depth, mask, cam)?;
    let points = part_points(mask, depth, cam)?;
    let n = points.len() as f64;
    let centroid = points.iter().fold(Vec3::zeros(), |a, p| a + p.1 / n);
    if axis.distance_to(&centroid) < 1e-9 {
        return Err(Error::Degenerate("part lies on its rotation axis".into()));
    }
    let axis = orient_toward_camera(axis, &centroid);
    clip(image, mask, cam, &points, angles, MotionKind::Rotation, axis, |xyz, a| {
        rotate_points_about_axis(xyz, &axis, a)
    })
}

/// Translates the masked part along its mean surface normal (toward the
/// camera for positive offsets), one frame per offset.
pub fn render_translation(
    image: &RgbGrid,
    mask: &Grid<bool>,
    depth: &Grid<f64>,
    cam: &CameraModel,
    offsets: &[f64],
) -> Result<ArticulationClip> {
    check_inputs(image, mask, depth)?;
    let normals = normals_from_depth(depth, cam);
    let inner = erode(mask);
    let support = if inner.count() > 0 { &inner } else { mask };
    let dir = mean_normal(&normals, support).ok_or_else(|| Error::Degenerate("no surface normal under the mask".into()))?;
    let points = part_points(mask, depth, cam)?;
    let n = points.len() as f64;
    let centroid = points.iter().fold(Vec3::zeros(), |a, p| a + p.1 / n);
    let axis = Line3D::new(centroid, dir)?;
    let dir = axis.direction;
    clip(image, mask, cam, &points, offsets, MotionKind::Translation, axis, |xyz, t| {
        xyz.iter().map(|p| p + dir * t).collect()
    })
}

/// `n` evenly spaced amounts from 0 to `max` inclusive.
pub fn sweep(max: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => alloc::vec![0.0],
        _ => (0..n).map(|k| max * k as f64 / (n - 1) as f64).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane_scene() -> (RgbGrid, Grid<bool>, Grid<f64>, CameraModel) {
        let cam = CameraModel::default_for(64, 48);
        let image = Grid::from_fn(64, 48, |c, r| [(c * 4) as u8, (r * 5) as u8, 100]);
        let mask = Grid::from_fn(64, 48, |c, r| (20..40).contains(&c) && (12..36).contains(&r));
        (image, mask, Grid::filled(64, 48, 3.0), cam)
    }

    #[test]
    fn zero_amount_is_identity() {
        let (image, mask, depth, cam) = plane_scene();
        let axis = Line2D::new(0.0, 20.0 / 64.0);
        let clip = render_rotation(&image, &mask, &axis, &depth, &cam, &[0.0, 0.3]).unwrap();
        assert_eq!(clip.frames.len(), 2);
        assert_eq!(clip.frames[0].homography, Homography::identity());
        assert_eq!(clip.frames[0].mask, mask);
        let t = render_translation(&image, &mask, &depth, &cam, &[0.0]).unwrap();
        assert_eq!(t.frames[0].mask, mask);
    }

    #[test]
    fn translation_toward_camera_grows_part() {
        let (image, mask, depth, cam) = plane_scene();
        let clip = render_translation(&image, &mask, &depth, &cam, &[0.5]).unwrap();
        assert!(clip.frames[0].mask.count() > mask.count());
        let m = clip.frames[0].homography.matrix();
        assert!(m[(0, 1)].abs() < 1e-3 && m[(1, 0)].abs() < 1e-3);
    }

    #[test]
    fn sweep_endpoints() {
        assert_eq!(sweep(1.0, 5), alloc::vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert!(sweep(1.0, 0).is_empty());
    }
}

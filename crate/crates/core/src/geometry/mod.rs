//! Non-learned geometry: image lines and their continuous encoding, Gaussian
//! keypoint targets, pinhole cameras, depth-derived normals, 3D hinge lifting,
//! rigid motions and robust homography fitting.

mod bump;
mod camera;
mod homography;
mod lift;
mod line;
mod motion;

pub use bump::{gaussian_bump, DEFAULT_BUMP_RADIUS_PX};
pub use camera::{mean_normal, normals_from_depth, CameraModel, Vec3};
pub use homography::{fit_homography_dlt, fit_homography_ransac, Homography, RansacParams};
pub use lift::lift_axis_to_3d;
pub use line::{AxisEncoding, Line2D};
pub use motion::{rotate_points_about_axis, Line3D};

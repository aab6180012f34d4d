#[allow(unused_imports)] // std, when linked, provides these inherently
use num_traits::Float;

use crate::datamodel::QueryPoint;
use crate::grid::Grid;

pub const DEFAULT_BUMP_RADIUS_PX: u32 = 5;

/// Cell index containing normalized coordinate `t` on an axis of `n` cells.
#[inline]
pub(crate) fn cell_of(t: f64, n: usize) -> usize {
    ((t * n as f64).floor().max(0.0) as usize).min(n - 1)
}

/// Soft keypoint target: `exp(-d^2 / (2 sigma^2))` with `sigma = radius / 3`,
/// where `d` is the pixel distance to the cell holding `center`. That cell is
/// exactly 1.
pub fn gaussian_bump(center: QueryPoint, radius_px: u32, out_w: usize, out_h: usize) -> Grid<f64> {
    let sigma = radius_px.max(1) as f64 / 3.0;
    let denom = 2.0 * sigma * sigma;
    let cx = cell_of(center.x, out_w) as f64;
    let cy = cell_of(center.y, out_h) as f64;
    Grid::from_fn(out_w, out_h, |c, r| {
        let dx = c as f64 - cx;
        let dy = r as f64 - cy;
        (-(dx * dx + dy * dy) / denom).exp()
    })
}

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, Matrix3, Vector3};
#[allow(unused_imports)] // std, when linked, provides these inherently
use num_traits::Float;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A planar projective map in pixel coordinates, scaled so `h[2][2] == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[[f64; 3]; 3]", try_from = "[[f64; 3]; 3]")]
pub struct Homography(Matrix3<f64>);

impl Homography {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let s = m[(2, 2)];
        if !(s.abs() > 1e-12) || !m.iter().all(|v| v.is_finite()) {
            return Err(Error::Degenerate("homography cannot be normalized".into()));
        }
        let m = m / s;
        if !(m.determinant().abs() > 1e-14) {
            return Err(Error::Degenerate("homography is singular".into()));
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let m = &self.0;
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }

    /// Maps `(x, y)`; `None` for points sent to infinity.
    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let p = self.0 * Vector3::new(x, y, 1.0);
        (p.z.abs() > 1e-12).then(|| (p.x / p.z, p.y / p.z))
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .0
            .try_inverse()
            .ok_or_else(|| Error::Degenerate("homography is not invertible".into()))?;
        Self::from_matrix(inv)
    }

    /// `self` after `first`.
    pub fn compose(&self, first: &Homography) -> Result<Self> {
        Self::from_matrix(self.0 * first.0)
    }

    /// Largest absolute entry-wise difference from `other`.
    pub fn max_abs_diff(&self, other: &Homography) -> f64 {
        (self.0 - other.0).amax()
    }
}

impl From<Homography> for [[f64; 3]; 3] {
    fn from(h: Homography) -> Self {
        h.rows()
    }
}

impl TryFrom<[[f64; 3]; 3]> for Homography {
    type Error = Error;

    fn try_from(r: [[f64; 3]; 3]) -> Result<Self> {
        Homography::from_matrix(Matrix3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacParams {
    pub threshold_px: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self { threshold_px: 2.0, iterations: 1000, seed: 0 }
    }
}

/// Similarity moving the centroid to the origin with mean distance sqrt(2).
fn normalizer(pts: &[(f64, f64)]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0 / n, a.1 + p.1 / n));
    let mean_dist = pts.iter().map(|p| ((p.0 - mx).powi(2) + (p.1 - my).powi(2)).sqrt()).sum::<f64>() / n;
    let s = if mean_dist > 1e-12 { core::f64::consts::SQRT_2 / mean_dist } else { 1.0 };
    Matrix3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0)
}

/// Normalized direct linear transform over all given correspondences.
pub fn fit_homography_dlt(src: &[(f64, f64)], dst: &[(f64, f64)]) -> Result<Homography> {
    if src.len() != dst.len() {
        return Err(Error::Shape("source and destination point counts differ".into()));
    }
    if src.len() < 4 {
        return Err(Error::Precondition("homography needs at least 4 correspondences".into()));
    }
    let ts = normalizer(src);
    let td = normalizer(dst);
    let rows = (2 * src.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (s, d)) in src.iter().zip(dst).enumerate() {
        let p = ts * Vector3::new(s.0, s.1, 1.0);
        let q = td * Vector3::new(d.0, d.1, 1.0);
        let (x, y, u, v) = (p.x, p.y, q.x, q.y);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for j in 0..9 {
            a[(2 * i, j)] = r0[j];
            a[(2 * i + 1, j)] = r1[j];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::Degenerate("SVD did not converge".into()))?;
    let (k, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, &s)| if s < best.1 { (i, s) } else { best });
    let h = v_t.row(k);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td.try_inverse().ok_or_else(|| Error::Degenerate("normalizer".into()))?;
    Homography::from_matrix(td_inv * hn * ts)
}

fn reprojection_error(h: &Homography, s: (f64, f64), d: (f64, f64)) -> f64 {
    match h.apply(s.0, s.1) {
        Some((x, y)) => ((x - d.0).powi(2) + (y - d.1).powi(2)).sqrt(),
        None => f64::INFINITY,
    }
}

/// RANSAC over 4-point DLT samples followed by a DLT refit on the inliers.
///
/// Deterministic for a given `params.seed`. Returns the model and per-point
/// inlier flags.
pub fn fit_homography_ransac(
    src: &[(f64, f64)],
    dst: &[(f64, f64)],
    params: &RansacParams,
) -> Result<(Homography, Vec<bool>)> {
    if src.len() != dst.len() {
        return Err(Error::Shape("source and destination point counts differ".into()));
    }
    let n = src.len();
    if n < 4 {
        return Err(Error::Precondition("homography needs at least 4 correspondences".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let score = |h: &Homography| {
        let mut count = 0usize;
        let mut err = 0.0;
        for (s, d) in src.iter().zip(dst) {
            let e = reprojection_error(h, *s, *d);
            if e < params.threshold_px {
                count += 1;
                err += e;
            }
        }
        (count, err)
    };

    let mut best: Option<(Homography, usize, f64)> = None;
    let mut s4 = [(0.0, 0.0); 4];
    let mut d4 = [(0.0, 0.0); 4];
    for _ in 0..params.iterations.max(1) {
        let idx = sample(&mut rng, n, 4);
        for (k, i) in idx.iter().enumerate() {
            s4[k] = src[i];
            d4[k] = dst[i];
        }
        let Ok(h) = fit_homography_dlt(&s4, &d4) else { continue };
        let (count, err) = score(&h);
        let better = match &best {
            None => true,
            Some((_, bc, be)) => count > *bc || (count == *bc && err < *be),
        };
        if better {
            best = Some((h, count, err));
        }
        if count == n {
            break;
        }
    }
    let Some((mut model, count, _)) = best else {
        return Err(Error::NoModel("no non-degenerate minimal sample".into()));
    };
    if count < 4 {
        return Err(Error::NoModel(alloc::format!("best model has {count} inliers")));
    }

    let mut inliers = vec![false; n];
    for _ in 0..2 {
        for (k, (s, d)) in src.iter().zip(dst).enumerate() {
            inliers[k] = reprojection_error(&model, *s, *d) < params.threshold_px;
        }
        let (si, di): (Vec<_>, Vec<_>) =
            src.iter().zip(dst).zip(&inliers).filter(|(_, &f)| f).map(|((s, d), _)| (*s, *d)).unzip();
        if si.len() < 4 {
            break;
        }
        match fit_homography_dlt(&si, &di) {
            Ok(h) if score(&h).0 >= si.len() => model = h,
            _ => break,
        }
    }
    for (k, (s, d)) in src.iter().zip(dst).enumerate() {
        inliers[k] = reprojection_error(&model, *s, *d) < params.threshold_px;
    }
    if inliers.iter().filter(|&&f| f).count() < 4 {
        return Err(Error::NoModel("refit lost its inliers".into()));
    }
    Ok((model, inliers))
}

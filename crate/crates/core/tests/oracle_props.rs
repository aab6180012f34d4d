//! Losses against finite differences and metrics against plain loops.

use core::f64::consts::PI;

use interact3d_core::geometry::{fit_homography_ransac, RansacParams};
use interact3d_core::losses::*;
use interact3d_core::metrics::*;
use interact3d_core::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative error between an analytic gradient and central differences.
fn fd_error(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> f64 {
    let h = 1e-6;
    let mut num = vec![0.0; x.len()];
    let mut y = x.to_vec();
    for i in 0..x.len() {
        y[i] = x[i] + h;
        let up = f(&y);
        y[i] = x[i] - h;
        let down = f(&y);
        y[i] = x[i];
        num[i] = (up - down) / (2.0 * h);
    }
    let diff: f64 = analytic.iter().zip(&num).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(num.iter().map(|a| a * a).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn vec_in(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, n)
}

/// Values at least `gap` away from every entry of `avoid`, so L1 kinks stay
/// out of the difference stencil.
fn away_from(x: f64, avoid: f64, gap: f64) -> f64 {
    if (x - avoid).abs() < gap {
        avoid + gap.copysign(x - avoid + 1e-300)
    } else {
        x
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ce_matches_fd(z in vec_in(3, -4.0, 4.0), label in 0usize..3) {
        let (_, g) = ce_loss(&z, label);
        prop_assert!(fd_error(|x| ce_loss(x, label).0, &z, &g) < 1e-4);
    }

    #[test]
    fn focal_matches_fd(z in vec_in(24, -6.0, 6.0), t in vec_in(24, 0.0, 1.0), a in 0.05f64..0.95, split in any::<bool>()) {
        let alpha = if split { FocalAlpha::PixelSplit { alpha: a, threshold: 0.5 } } else { FocalAlpha::Standard(a) };
        let (_, g) = focal_loss(&z, &t, alpha, 2.0);
        prop_assert!(fd_error(|x| focal_loss(x, &t, alpha, 2.0).0, &z, &g) < 1e-4);
    }

    #[test]
    fn dice_matches_fd(z in vec_in(24, -4.0, 4.0), t in prop::collection::vec(any::<bool>(), 24)) {
        let t: Vec<f64> = t.into_iter().map(|b| b as u8 as f64).collect();
        let (_, g) = dice_loss_logits(&z, &t);
        prop_assert!(fd_error(|x| dice_loss_logits(x, &t).0, &z, &g) < 1e-4);
    }

    #[test]
    fn spatial_kl_matches_fd(z in vec_in(24, -5.0, 5.0), t in vec_in(24, 0.0, 1.0)) {
        let (v, g) = spatial_kl_loss(&z, &t).unwrap();
        prop_assert!(v >= -1e-12);
        prop_assert!(fd_error(|x| spatial_kl_loss(x, &t).unwrap().0, &z, &g) < 1e-4);
    }

    #[test]
    fn box_terms_match_fd(p in vec_in(4, 0.0, 1.0), q in vec_in(4, 0.0, 1.0)) {
        let mk = |v: &[f64]| BoxXYXY::new(v[0].min(v[2]), v[1].min(v[3]), v[0].max(v[2]) + 0.01, v[1].max(v[3]) + 0.01);
        let gt = mk(&q);
        let g = gt.as_array();
        // Keep every predicted edge clear of the target's edges.
        let pred: Vec<f64> = mk(&p).as_array().iter().map(|&v| g.iter().fold(v, |v, &e| away_from(v, e, 1e-3))).collect();
        prop_assume!(pred[2] > pred[0] + 1e-3 && pred[3] > pred[1] + 1e-3);
        let b = |x: &[f64]| BoxXYXY::new(x[0], x[1], x[2], x[3]);
        let l = box_losses(&b(&pred), &gt).unwrap();
        prop_assert!(fd_error(|x| box_losses(&b(x), &gt).unwrap().l1, &pred, &l.l1_grad) < 1e-4);
        prop_assert!(fd_error(|x| box_losses(&b(x), &gt).unwrap().giou, &pred, &l.giou_grad) < 1e-4);
    }

    #[test]
    fn axis_terms_match_fd(p in vec_in(3, -1.0, 1.0), q in vec_in(3, -1.0, 1.0)) {
        let p: Vec<f64> = p.iter().zip(&q).map(|(&a, &b)| away_from(a, b, 1e-3)).collect();
        let gt = AxisEncoding::from_array([q[0], q[1], q[2]]);
        let enc = |x: &[f64]| AxisEncoding::from_array([x[0], x[1], x[2]]);
        let l = axis_loss(&enc(&p), &gt);
        prop_assert!(fd_error(|x| axis_loss(&enc(x), &gt).angle, &p, &l.angle_grad) < 1e-4);
        prop_assert!(fd_error(|x| axis_loss(&enc(x), &gt).offset, &p, &l.offset_grad) < 1e-4);
    }

    #[test]
    fn depth_terms_match_fd(seed in any::<u64>(), scales in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (7, 5);
        let pred = Grid::from_fn(w, h, |_, _| rng.random_range(0.5..4.0));
        let gt = Grid::from_fn(w, h, |_, _| rng.random_range(0.5..4.0));
        let valid = Grid::from_fn(w, h, |_, _| rng.random_bool(0.85));
        prop_assume!(valid.as_slice().iter().filter(|v| **v).count() >= 4);
        let grid = |x: &[f64]| Grid::from_vec(w, h, x.to_vec()).unwrap();
        let (_, g) = ssi_depth_loss(&pred, &gt, &valid).unwrap();
        prop_assert!(fd_error(|x| ssi_depth_loss(&grid(x), &gt, &valid).unwrap().0, pred.as_slice(), g.as_slice()) < 1e-4);
        let (_, g) = gradient_matching_loss(&pred, &gt, &valid, scales).unwrap();
        prop_assert!(fd_error(|x| gradient_matching_loss(&grid(x), &gt, &valid, scales).unwrap().0, pred.as_slice(), g.as_slice()) < 1e-4);
    }

    #[test]
    fn ssi_ignores_affine_maps(seed in any::<u64>(), a in 0.01f64..100.0, b in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Grid::from_fn(9, 7, |_, _| rng.random_range(0.1..10.0));
        let valid = Grid::filled(9, 7, true);
        let (loss, _) = ssi_depth_loss(&d.map(|v| a * v + b), &d, &valid).unwrap();
        prop_assert!(loss < 1e-6, "{loss}");
    }

    #[test]
    fn axis_round_trip(theta in 0.0f64..PI, r in -1.5f64..1.5) {
        let line = Line2D::new(theta, r);
        let back = line.encode().decode().unwrap();
        prop_assert!(line_error(&line, &back) < 1e-9);
        let flipped = Line2D::new(theta + PI, -r);
        let (e0, e1) = (line.encode().as_array(), flipped.encode().as_array());
        prop_assert!(e0.iter().zip(e1).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn box_iou_matches_sweep(p in vec_in(4, 0.0, 1.0), q in vec_in(4, 0.0, 1.0)) {
        let mk = |v: &[f64]| BoxXYXY::new(v[0].min(v[2]), v[1].min(v[3]), v[0].max(v[2]), v[1].max(v[3]));
        let (a, b) = (mk(&p), mk(&q));
        prop_assert!((box_iou(&a, &b) - brute_box_iou(&a, &b)).abs() < 1e-9);
    }

    #[test]
    fn mask_iou_matches_count(w in 1usize..12, h in 1usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Grid::from_fn(w, h, |_, _| rng.random_bool(0.4));
        let b = Grid::from_fn(w, h, |_, _| rng.random_bool(0.4));
        let expect = brute_iou(&a, &b);
        prop_assert_eq!(grid_iou(&a, &b).unwrap(), expect);
        prop_assert_eq!(mask_iou(&Mask::encode(&a), &Mask::encode(&b)).unwrap(), expect);
    }

    #[test]
    fn sim_matches_loop(w in 1usize..10, h in 1usize..10, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = Grid::from_fn(w, h, |_, _| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..2.0) });
        let q = Grid::from_fn(w, h, |_, _| rng.random_range(0.0..2.0));
        prop_assert!((sim(&p, &q).unwrap() - brute_sim(&p, &q)).abs() < 1e-9);
        prop_assert!((sim(&p, &q).unwrap() - sim(&q, &p).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn depth_delta_matches_count(w in 1usize..10, h in 1usize..10, seed in any::<u64>(), align in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = Grid::from_fn(w, h, |_, _| rng.random_range(0.5..3.0));
        let g = Grid::from_fn(w, h, |_, _| rng.random_range(0.5..3.0));
        for t in [1.25, 1.25 * 1.25] {
            prop_assert_eq!(depth_delta(&p, &g, t, align).unwrap(), brute_delta(&p, &g, t, align));
        }
    }

    #[test]
    fn ea_matches_clipping_loop(t1 in 0.0f64..PI, r1 in 0.05f64..0.95, t2 in 0.0f64..PI, r2 in 0.05f64..0.95) {
        let (a, b) = (Line2D::new(t1, r1), Line2D::new(t2, r2));
        prop_assume!(brute_clip(&a).is_some() && brute_clip(&b).is_some());
        prop_assert!((ea_score(&a, &b).unwrap() - brute_ea(&a, &b)).abs() < 1e-9);
        let flipped = Line2D::new(t1 + PI, -r1);
        prop_assert!((ea_score(&flipped, &b).unwrap() - ea_score(&a, &b).unwrap()).abs() < 1e-9);
    }
}

fn line_error(a: &Line2D, b: &Line2D) -> f64 {
    let direct = (a.theta - b.theta).abs() + (a.r - b.r).abs();
    let wrapped = (a.theta - b.theta).abs();
    let wrapped = (PI - wrapped).abs() + (a.r + b.r).abs();
    direct.min(wrapped)
}

/// Overlap of two intervals by sweeping their sorted breakpoints.
fn overlap(a: (f64, f64), b: (f64, f64)) -> f64 {
    let mut pts = [a.0, a.1, b.0, b.1];
    pts.sort_by(f64::total_cmp);
    let mut total = 0.0;
    for w in pts.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        if a.0 <= mid && mid <= a.1 && b.0 <= mid && mid <= b.1 {
            total += w[1] - w[0];
        }
    }
    total
}

fn brute_box_iou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let inter = overlap((a.x1, a.x2), (b.x1, b.x2)) * overlap((a.y1, a.y2), (b.y1, b.y2));
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

fn brute_iou(a: &Grid<bool>, b: &Grid<bool>) -> f64 {
    let (mut i, mut u) = (0, 0);
    for r in 0..a.height() {
        for c in 0..a.width() {
            let (x, y) = (*a.get(c, r), *b.get(c, r));
            if x && y {
                i += 1;
            }
            if x || y {
                u += 1;
            }
        }
    }
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

fn brute_sim(p: &Grid<f64>, q: &Grid<f64>) -> f64 {
    let n = p.len() as f64;
    let (sp, sq): (f64, f64) = (p.as_slice().iter().sum(), q.as_slice().iter().sum());
    let mut total = 0.0;
    for i in 0..p.len() {
        let a = if sp > 0.0 { p.as_slice()[i] / sp } else { 1.0 / n };
        let b = if sq > 0.0 { q.as_slice()[i] / sq } else { 1.0 / n };
        total += if a < b { a } else { b };
    }
    total
}

fn brute_median(v: &Grid<f64>) -> f64 {
    let mut s = v.as_slice().to_vec();
    // Insertion sort keeps this independent of the library's sort.
    for i in 1..s.len() {
        let mut j = i;
        while j > 0 && s[j - 1] > s[j] {
            s.swap(j - 1, j);
            j -= 1;
        }
    }
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

fn brute_delta(p: &Grid<f64>, g: &Grid<f64>, t: f64, align: bool) -> f64 {
    let k = if align { brute_median(g) / brute_median(p) } else { 1.0 };
    let mut hits = 0;
    for i in 0..p.len() {
        let (a, b) = (p.as_slice()[i] * k, g.as_slice()[i]);
        let ratio = if a > b { a / b } else { b / a };
        if ratio < t {
            hits += 1;
        }
    }
    hits as f64 / p.len() as f64
}

/// Segment of `x cos t + y sin t = r` inside the unit square, from the
/// intersections with the four edges.
fn brute_clip(l: &Line2D) -> Option<((f64, f64), (f64, f64))> {
    let (c, s) = (l.theta.cos(), l.theta.sin());
    let mut pts: Vec<(f64, f64)> = Vec::new();
    for edge in [0.0, 1.0] {
        if c.abs() > 1e-12 {
            let x = (l.r - edge * s) / c;
            if (-1e-12..=1.0 + 1e-12).contains(&x) {
                pts.push((x, edge));
            }
        }
        if s.abs() > 1e-12 {
            let y = (l.r - edge * c) / s;
            if (-1e-12..=1.0 + 1e-12).contains(&y) {
                pts.push((edge, y));
            }
        }
    }
    let mut best = None;
    let mut far = -1.0;
    for a in &pts {
        for b in &pts {
            let d = (a.0 - b.0).hypot(a.1 - b.1);
            if d > far {
                far = d;
                best = Some((*a, *b));
            }
        }
    }
    best.filter(|_| far > 1e-9)
}

fn brute_ea(a: &Line2D, b: &Line2D) -> f64 {
    let (a0, a1) = brute_clip(a).unwrap();
    let (b0, b1) = brute_clip(b).unwrap();
    let mut d = (a.theta - b.theta).abs();
    while d >= PI {
        d -= PI;
    }
    if d > PI / 2.0 {
        d = PI - d;
    }
    let s_angle = (1.0 - d / (PI / 2.0)).max(0.0);
    let mx = (a0.0 + a1.0) / 2.0 - (b0.0 + b1.0) / 2.0;
    let my = (a0.1 + a1.1) / 2.0 - (b0.1 + b1.1) / 2.0;
    let s_dist = (1.0 - (mx * mx + my * my).sqrt() / 2f64.sqrt()).max(0.0);
    s_angle * s_dist
}

#[test]
fn ransac_survives_thirty_percent_outliers() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = nalgebra::Matrix3::new(
            rng.random_range(0.8..1.2),
            rng.random_range(-0.2..0.2),
            rng.random_range(-40.0..40.0),
            rng.random_range(-0.2..0.2),
            rng.random_range(0.8..1.2),
            rng.random_range(-40.0..40.0),
            rng.random_range(-3e-4..3e-4),
            rng.random_range(-3e-4..3e-4),
            1.0,
        );
        let truth = Homography::from_matrix(m).unwrap();
        let src: Vec<(f64, f64)> = (0..60).map(|_| (rng.random_range(0.0..640.0), rng.random_range(0.0..480.0))).collect();
        let dst: Vec<(f64, f64)> = src
            .iter()
            .enumerate()
            .map(|(i, s)| {
                if i % 10 < 3 {
                    (rng.random_range(0.0..640.0), rng.random_range(0.0..480.0))
                } else {
                    truth.apply(s.0, s.1).unwrap()
                }
            })
            .collect();
        let (h, inliers) = fit_homography_ransac(&src, &dst, &RansacParams { seed, ..Default::default() }).unwrap();
        for (i, s) in src.iter().enumerate().filter(|(i, _)| i % 10 >= 3) {
            let (x, y) = h.apply(s.0, s.1).unwrap();
            let (tx, ty) = dst[i];
            assert!((x - tx).hypot(y - ty) < 1.0, "seed {seed}");
            assert!(inliers[i]);
        }
    }
}

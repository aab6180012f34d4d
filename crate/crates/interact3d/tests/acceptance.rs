//! Acceptance checks, one PASS/FAIL line each on stderr.
//!
//! Everything runs inside a single test so the lines come out in order and
//! the slow training check does not compete with the rest for the CPU.

mod common;

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::Engine;
use common::{check_manifest, check_response, padded_gradients, permutation_drift};
use http_body_util::BodyExt;
use interact3d::io::encode_png;
use interact3d::network::Network;
use interact3d::service::{router, AppState, Model};
use interact3d::trainer::{overfit_check, OverfitThresholds, RunConfig};
use interact3d_core::datamodel::{ImagePrediction, SampleRecord};
use interact3d_core::geometry::{fit_homography_ransac, lift_axis_to_3d, RansacParams};
use interact3d_core::losses::*;
use interact3d_core::metrics::*;
use interact3d_core::renderer::render_rotation;
use interact3d_core::synthgen::{generate_one, generate_split, GeneratedSample, ObjectKind};
use interact3d_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

#[derive(Default)]
struct Report {
    failed: Vec<String>,
    started: bool,
}

impl Report {
    fn check(&mut self, name: &str, pass: bool, detail: String) {
        // Straight to the stderr handle so the harness does not capture it.
        // The harness prints `test acceptance ... ` without a newline first.
        let lead = if self.started { "" } else { "\n" };
        self.started = true;
        let line = format!("{lead}{} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
        let _ = std::io::stderr().lock().write_all(line.as_bytes());
        if !pass {
            self.failed.push(name.to_string());
        }
    }
}

// Gradients

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
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&num).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(&num));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Moves `x` at least `gap` away from `avoid` so L1 kinks stay out of the stencil.
fn away_from(x: f64, avoid: f64, gap: f64) -> f64 {
    if (x - avoid).abs() < gap {
        avoid + gap.copysign(x - avoid + 1e-300)
    } else {
        x
    }
}

const MAP: (usize, usize) = (16, 12);

fn random_prediction(rng: &mut ChaCha8Rng, slots: usize) -> ImagePrediction {
    let mut grid = |w, h| Grid::from_fn(w, h, |_, _| rng.random_range(-3.0..3.0));
    let maps: Vec<(Grid<f64>, Grid<f64>)> = (0..slots).map(|_| (grid(MAP.0, MAP.1), grid(MAP.0, MAP.1))).collect();
    let depth = grid(MAP.0, MAP.1).map(|v| 2.0 + v);
    let mut logits = |n: usize| uniform(rng, n, -2.0, 2.0);
    let queries = maps
        .into_iter()
        .map(|(mask_logits, affordance_logits)| InteractionPrediction {
            movable_logits: logits(3).try_into().unwrap(),
            rigidity_logits: logits(2).try_into().unwrap(),
            articulation_logits: logits(3).try_into().unwrap(),
            action_logits: logits(3).try_into().unwrap(),
            bbox: BoxXYXY::new(0.1 + 0.2 * logits(1)[0].abs(), 0.3, 0.7 + 0.1 * logits(1)[0], 0.9),
            axis_enc: AxisEncoding::from_array(logits(3).try_into().unwrap()),
            mask_logits,
            affordance_logits,
        })
        .collect();
    ImagePrediction { queries, depth }
}

fn flatten(p: &ImagePrediction) -> Vec<f64> {
    let mut v = Vec::new();
    for q in &p.queries {
        v.extend(q.movable_logits);
        v.extend(q.rigidity_logits);
        v.extend(q.articulation_logits);
        v.extend(q.action_logits);
        v.extend(q.bbox.as_array());
        v.extend(q.axis_enc.as_array());
        v.extend(q.mask_logits.as_slice());
        v.extend(q.affordance_logits.as_slice());
    }
    v.extend(p.depth.as_slice());
    v
}

fn unflatten(template: &ImagePrediction, x: &[f64]) -> ImagePrediction {
    let mut it = x.iter().copied();
    let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
    let (w, h) = MAP;
    let queries = template
        .queries
        .iter()
        .map(|_| InteractionPrediction {
            movable_logits: take(3).try_into().unwrap(),
            rigidity_logits: take(2).try_into().unwrap(),
            articulation_logits: take(3).try_into().unwrap(),
            action_logits: take(3).try_into().unwrap(),
            bbox: BoxXYXY::from_array(take(4).try_into().unwrap()),
            axis_enc: AxisEncoding::from_array(take(3).try_into().unwrap()),
            mask_logits: Grid::from_vec(w, h, take(w * h)).unwrap(),
            affordance_logits: Grid::from_vec(w, h, take(w * h)).unwrap(),
        })
        .collect();
    ImagePrediction { queries, depth: Grid::from_vec(w, h, take(w * h)).unwrap() }
}

fn flatten_grad(g: &ImageGrad) -> Vec<f64> {
    let mut v = Vec::new();
    for q in &g.queries {
        v.extend(q.movable);
        v.extend(q.rigidity);
        v.extend(q.articulation);
        v.extend(q.action);
        v.extend(q.bbox);
        v.extend(q.axis);
        v.extend(&q.mask);
        v.extend(&q.affordance);
    }
    v.extend(&g.depth);
    v
}

/// Worst relative error per loss over random instances.
fn gradient_errors() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = Vec::new();
    let mut record = |name: &'static str, e: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some((_, w)) => *w = f64::max(*w, e),
        None => worst.push((name, e)),
    };
    for _ in 0..50 {
        let z = uniform(&mut rng, 3, -4.0, 4.0);
        let label = rng.random_range(0..3);
        record("ce", fd_error(|x| ce_loss(x, label).0, &z, &ce_loss(&z, label).1));

        let z = uniform(&mut rng, 24, -6.0, 6.0);
        let t = uniform(&mut rng, 24, 0.0, 1.0);
        let a = rng.random_range(0.05..0.95);
        for alpha in [FocalAlpha::Standard(a), FocalAlpha::PixelSplit { alpha: a, threshold: 0.5 }] {
            let g = focal_loss(&z, &t, alpha, 2.0).1;
            record("focal", fd_error(|x| focal_loss(x, &t, alpha, 2.0).0, &z, &g));
        }

        let bits: Vec<f64> = (0..24).map(|_| rng.random_bool(0.5) as u8 as f64).collect();
        let z = uniform(&mut rng, 24, -4.0, 4.0);
        record("dice_logits", fd_error(|x| dice_loss_logits(x, &bits).0, &z, &dice_loss_logits(&z, &bits).1));
        let p = uniform(&mut rng, 24, 0.05, 0.95);
        record("dice", fd_error(|x| dice_loss(x, &bits).0, &p, &dice_loss(&p, &bits).1));

        let t = uniform(&mut rng, 24, 0.0, 1.0);
        let z = uniform(&mut rng, 24, -5.0, 5.0);
        let g = spatial_kl_loss(&z, &t).unwrap().1;
        record("spatial_kl", fd_error(|x| spatial_kl_loss(x, &t).unwrap().0, &z, &g));

        let mk = |v: &[f64]| BoxXYXY::new(v[0].min(v[2]), v[1].min(v[3]), v[0].max(v[2]) + 0.01, v[1].max(v[3]) + 0.01);
        let gt = mk(&uniform(&mut rng, 4, 0.0, 1.0));
        let edges = gt.as_array();
        let pred: Vec<f64> = mk(&uniform(&mut rng, 4, 0.0, 1.0))
            .as_array()
            .iter()
            .map(|&v| edges.iter().fold(v, |v, &e| away_from(v, e, 1e-3)))
            .collect();
        if pred[2] > pred[0] + 1e-3 && pred[3] > pred[1] + 1e-3 {
            let b = |x: &[f64]| BoxXYXY::new(x[0], x[1], x[2], x[3]);
            let l = box_losses(&b(&pred), &gt).unwrap();
            record("box_l1", fd_error(|x| box_losses(&b(x), &gt).unwrap().l1, &pred, &l.l1_grad));
            record("box_giou", fd_error(|x| box_losses(&b(x), &gt).unwrap().giou, &pred, &l.giou_grad));
        }

        let q = uniform(&mut rng, 3, -1.0, 1.0);
        let p: Vec<f64> = uniform(&mut rng, 3, -1.0, 1.0).iter().zip(&q).map(|(&a, &b)| away_from(a, b, 1e-3)).collect();
        let gt = AxisEncoding::from_array([q[0], q[1], q[2]]);
        let enc = |x: &[f64]| AxisEncoding::from_array([x[0], x[1], x[2]]);
        let l = axis_loss(&enc(&p), &gt);
        record("axis_angle", fd_error(|x| axis_loss(&enc(x), &gt).angle, &p, &l.angle_grad));
        record("axis_offset", fd_error(|x| axis_loss(&enc(x), &gt).offset, &p, &l.offset_grad));

        let (w, h) = (7, 5);
        let pred = Grid::from_fn(w, h, |_, _| rng.random_range(0.5..4.0));
        let gt = Grid::from_fn(w, h, |_, _| rng.random_range(0.5..4.0));
        let valid = Grid::from_fn(w, h, |_, _| rng.random_bool(0.85));
        let scales = rng.random_range(1..4);
        if valid.as_slice().iter().filter(|v| **v).count() >= 4 {
            let grid = |x: &[f64]| Grid::from_vec(w, h, x.to_vec()).unwrap();
            let g = ssi_depth_loss(&pred, &gt, &valid).unwrap().1;
            record("ssi_depth", fd_error(|x| ssi_depth_loss(&grid(x), &gt, &valid).unwrap().0, pred.as_slice(), g.as_slice()));
            let g = gradient_matching_loss(&pred, &gt, &valid, scales).unwrap().1;
            record(
                "gradient_matching",
                fd_error(|x| gradient_matching_loss(&grid(x), &gt, &valid, scales).unwrap().0, pred.as_slice(), g.as_slice()),
            );
        }
    }

    // The weighted sum over every head, on annotated synthetic scenes.
    let cfg = LossConfig::default();
    for index in 0..4 {
        let sample = generate_one(21, index, 64, 48).unwrap().sample;
        let targets = ImageTargets::from_sample(&sample, MAP.0, MAP.1, MAP.0, MAP.1).unwrap();
        let n = sample.queries.len();
        let valid = vec![true; n];
        let pred = random_prediction(&mut rng, n);
        let loss = |x: &[f64]| {
            let p = unflatten(&pred, x);
            total_loss(&[LossInput { prediction: &p, targets: &targets, valid: &valid }], &cfg).unwrap().0.total
        };
        let (_, grads) = total_loss(&[LossInput { prediction: &pred, targets: &targets, valid: &valid }], &cfg).unwrap();
        record("total", fd_error(loss, &flatten(&pred), &flatten_grad(&grads[0])));
    }
    worst
}

// Metric oracles

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
            i += (x && y) as usize;
            u += (x || y) as usize;
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
        hits += (ratio < t) as usize;
    }
    hits as f64 / p.len() as f64
}

/// Segment of the line inside the unit square, from its edge intersections.
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

/// `(name, instances, mismatches, worst continuous error)` per metric.
fn metric_oracles() -> Vec<(&'static str, usize, usize, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 200;
    let mut out = Vec::new();

    let mut worst = 0f64;
    for _ in 0..n {
        let mut mk = || {
            let v = uniform(&mut rng, 4, 0.0, 1.0);
            BoxXYXY::new(v[0].min(v[2]), v[1].min(v[3]), v[0].max(v[2]), v[1].max(v[3]))
        };
        let (a, b) = (mk(), mk());
        worst = worst.max((box_iou(&a, &b) - brute_box_iou(&a, &b)).abs());
    }
    out.push(("box_iou", n, (worst >= 1e-9) as usize, worst));

    let mut bad = 0;
    for _ in 0..n {
        let (w, h) = (rng.random_range(1..12), rng.random_range(1..12));
        let a = Grid::from_fn(w, h, |_, _| rng.random_bool(0.4));
        let b = Grid::from_fn(w, h, |_, _| rng.random_bool(0.4));
        let expect = brute_iou(&a, &b);
        bad += (grid_iou(&a, &b).unwrap() != expect || mask_iou(&Mask::encode(&a), &Mask::encode(&b)).unwrap() != expect)
            as usize;
    }
    out.push(("mask_iou", n, bad, 0.0));

    let mut worst = 0f64;
    for _ in 0..n {
        let (w, h) = (rng.random_range(1..10), rng.random_range(1..10));
        let p = Grid::from_fn(w, h, |_, _| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..2.0) });
        let q = Grid::from_fn(w, h, |_, _| rng.random_range(0.0..2.0));
        worst = worst.max((sim(&p, &q).unwrap() - brute_sim(&p, &q)).abs());
    }
    out.push(("sim", n, (worst >= 1e-9) as usize, worst));

    let mut bad = 0;
    for _ in 0..n {
        let (w, h) = (rng.random_range(1..10), rng.random_range(1..10));
        let p = Grid::from_fn(w, h, |_, _| rng.random_range(0.5..3.0));
        let g = Grid::from_fn(w, h, |_, _| rng.random_range(0.5..3.0));
        let align = rng.random_bool(0.5);
        for t in [1.25, 1.25 * 1.25] {
            bad += (depth_delta(&p, &g, t, align).unwrap() != brute_delta(&p, &g, t, align)) as usize;
        }
    }
    out.push(("depth_delta", n, bad, 0.0));

    let (mut worst, mut count) = (0f64, 0);
    while count < n {
        let mut line = || Line2D::new(rng.random_range(0.0..PI), rng.random_range(0.05..0.95));
        let (a, b) = (line(), line());
        if brute_clip(&a).is_none() || brute_clip(&b).is_none() {
            continue;
        }
        count += 1;
        worst = worst.max((ea_score(&a, &b).unwrap() - brute_ea(&a, &b)).abs());
    }
    out.push(("ea_score", n, (worst >= 1e-9) as usize, worst));
    out
}

// Geometry

/// Worst inlier reprojection error per seed with 30% outliers.
fn ransac_errors(seeds: u64) -> Vec<f64> {
    (0..seeds)
        .map(|seed| {
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
            let src: Vec<(f64, f64)> =
                (0..60).map(|_| (rng.random_range(0.0..640.0), rng.random_range(0.0..480.0))).collect();
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
            let Ok((h, _)) = fit_homography_ransac(&src, &dst, &RansacParams { seed, ..Default::default() }) else {
                return f64::INFINITY;
            };
            src.iter()
                .enumerate()
                .filter(|(i, _)| i % 10 >= 3)
                .map(|(i, s)| {
                    let (x, y) = h.apply(s.0, s.1).unwrap();
                    (x - dst[i].0).hypot(y - dst[i].1)
                })
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Lift errors in degrees for the first `want` synthetic doors.
fn lift_errors(want: usize) -> Vec<f64> {
    let mut errs = Vec::new();
    let mut i = 0;
    while errs.len() < want {
        let g = generate_one(9, i, 128, 96).unwrap();
        i += 1;
        for o in g.objects.iter().filter(|o| o.kind == ObjectKind::Door) {
            let q = &g.sample.queries[o.query];
            let mask = q.mask.as_ref().unwrap().decode().unwrap();
            let err = match lift_axis_to_3d(&q.axis.unwrap(), &g.depth, &mask, &g.spec.camera) {
                Ok(line) => line.angle_to(o.hinge.as_ref().unwrap()).to_degrees(),
                Err(_) => f64::INFINITY,
            };
            errs.push(err);
        }
    }
    errs.truncate(want);
    errs
}

/// Doors whose annotated mask is their full silhouette.
fn unoccluded_doors(want: usize) -> Vec<(GeneratedSample, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while out.len() < want {
        let g = generate_one(31, i, 192, 144).unwrap();
        i += 1;
        for (k, o) in g.objects.iter().enumerate() {
            let q = &g.sample.queries[o.query];
            if o.kind == ObjectKind::Door && g.spec.silhouette(k).unwrap() == q.mask.as_ref().unwrap().decode().unwrap() {
                out.push((g.clone(), k));
            }
        }
    }
    out.truncate(want);
    out
}

fn door_warp_ious(want: usize) -> Vec<f64> {
    let a = 30f64.to_radians();
    unoccluded_doors(want)
        .into_iter()
        .map(|(g, k)| {
            let q = &g.sample.queries[g.objects[k].query];
            let mask = q.mask.as_ref().unwrap().decode().unwrap();
            let clip = render_rotation(&g.sample.image, &mask, &q.axis.unwrap(), &g.depth, &g.spec.camera, &[a]).unwrap();
            let truth = g.spec.render_moved(k, a).unwrap().object_mask(k);
            grid_iou(&clip.frames[0].mask, &truth).unwrap()
        })
        .collect()
}

// Command line

fn cli(args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_interact3d"))
        .args(args)
        .env_remove("I3D_CHECKPOINT")
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(out.stdout)
    } else {
        Err(format!("{args:?} exited {}: {}", out.status, String::from_utf8_lossy(&out.stderr)))
    }
}

/// gen-data, train, eval, predict and render-interaction on fresh data.
/// Returns the checkpoint path on success.
fn end_to_end(root: &Path) -> Result<std::path::PathBuf, String> {
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (data, runs, render) = (root.join("data"), root.join("run"), root.join("render"));
    cli(&["gen-data", "--out", &s(&data), "--n", "6", "--split", "train"])?;
    cli(&["gen-data", "--out", &s(&data), "--n", "2", "--split", "val"])?;
    cli(&["train", "--data", &s(&data), "--out", &s(&runs), "--epochs", "12"])?;
    let ckpt = runs.join("best.safetensors");

    let report = cli(&["eval", "--data", &s(&data.join("val")), "--checkpoint", &s(&ckpt)])?;
    let report: MetricReport = serde_json::from_slice(&report).map_err(|e| format!("eval output: {e}"))?;
    if report.num_images != 2 || report.movable_acc.is_none() {
        return Err(format!("eval report incomplete: {report:?}"));
    }

    // A drawer from the training split, with its metric depth.
    let mut drawer = None;
    for entry in std::fs::read_dir(data.join("train")).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            let rec: SampleRecord = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
            if let Some(q) = rec.queries.iter().find(|q| q.articulation == Some(ArticulationClass::Translation)) {
                drawer = Some((rec.image.clone(), rec.depth.clone().unwrap(), q.point));
                break;
            }
        }
    }
    let (image, depth, point) = drawer.ok_or("no drawer in the generated split")?;
    let (image, depth) = (data.join("train").join(image), data.join("train").join(depth));
    let pt = format!("{},{}", point.x, point.y);

    let resp = cli(&["predict", "--image", &s(&image), "--point", &pt, "--point", "0.5,0.5", "--checkpoint", &s(&ckpt)])?;
    let resp: Value = serde_json::from_slice(&resp).map_err(|e| format!("predict output: {e}"))?;
    check_response(&resp).map_err(|e| format!("predict schema: {e}"))?;

    cli(&[
        "render-interaction",
        "--image",
        &s(&image),
        "--point",
        &pt,
        "--checkpoint",
        &s(&ckpt),
        "--out",
        &s(&render),
        "--depth",
        &s(&depth),
        "--kind",
        "translation",
        "--frames",
        "3",
    ])?;
    let manifest: Value = serde_json::from_slice(&std::fs::read(render.join("manifest.json")).map_err(|e| e.to_string())?)
        .map_err(|e| format!("manifest: {e}"))?;
    check_manifest(&manifest).map_err(|e| format!("manifest schema: {e}"))?;
    for f in manifest["frames"].as_array().unwrap() {
        let file = render.join(f["file"].as_str().unwrap());
        interact3d::io::read_image(&file).map_err(|e| format!("frame {}: {e}", file.display()))?;
    }
    if cli(&["predict", "--image", &s(&image), "--point", "0.5,0.5", "--bogus"]).is_ok() {
        return Err("unknown flag accepted".into());
    }
    Ok(ckpt)
}

async fn predict_twice(ckpt: &Path) -> Result<(), String> {
    let state = AppState::new(Some(Model::load(ckpt).map_err(|e| e.to_string())?));
    let image = generate_one(77, 0, 256, 192).unwrap().sample.image;
    let body = json!({
        "image": base64::engine::general_purpose::STANDARD.encode(encode_png(&image)),
        "points": [{"x": 0.2, "y": 0.3}, {"x": 0.6, "y": 0.5}, {"x": 0.8, "y": 0.9}],
        "include_depth": true
    })
    .to_string();
    let mut bodies = Vec::new();
    for _ in 0..3 {
        let req = Request::post("/predict").header("content-type", "application/json").body(Body::from(body.clone())).unwrap();
        let resp = router(state.clone()).oneshot(req).await.map_err(|e| e.to_string())?;
        if resp.status() != StatusCode::OK {
            return Err(format!("status {}", resp.status()));
        }
        bodies.push(resp.into_body().collect().await.map_err(|e| e.to_string())?.to_bytes());
    }
    check_response(&serde_json::from_slice(&bodies[0]).unwrap())?;
    if bodies.iter().all(|b| *b == bodies[0]) {
        Ok(())
    } else {
        Err("responses differ".into())
    }
}

#[test]
fn acceptance() {
    let mut r = Report::default();

    let t = Instant::now();
    let errs = gradient_errors();
    let secs = t.elapsed().as_secs_f64();
    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let detail = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    r.check("gradient correctness", worst < 1e-4 && secs < 60.0, format!("{detail}; {secs:.1}s"));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0f64;
    for _ in 0..100 {
        let (a, b) = (rng.random_range(0.01..100.0), rng.random_range(-50.0..50.0));
        let d = Grid::from_fn(9, 7, |_, _| rng.random_range(0.1..10.0));
        let loss = ssi_depth_loss(&d.map(|v| a * v + b), &d, &Grid::filled(9, 7, true)).unwrap().0;
        worst = worst.max(loss);
    }
    r.check("ssi invariance", worst < 1e-6, format!("max loss {worst:.1e} over 100 affine maps"));

    let (mut trip, mut flip, mut r_exact) = (0f64, 0f64, true);
    for _ in 0..10_000 {
        let line = Line2D::new(rng.random_range(0.0..PI), rng.random_range(-1.5..1.5));
        let back = line.encode().decode().unwrap();
        let direct = (line.theta - back.theta).abs() + (line.r - back.r).abs();
        let wrapped = (PI - (line.theta - back.theta).abs()).abs() + (line.r + back.r).abs();
        trip = trip.max(direct.min(wrapped));
        let flipped = Line2D::new(line.theta + PI, -line.r);
        r_exact &= flipped.r == line.r;
        let (e0, e1) = (line.encode().as_array(), flipped.encode().as_array());
        flip = e0.iter().zip(e1).map(|(a, b)| (a - b).abs()).fold(flip, f64::max);
    }
    r.check(
        "axis encoding",
        trip < 1e-9 && r_exact && flip < 1e-12,
        format!("round trip {trip:.1e}, theta+pi encoding drift {flip:.1e}, r identical: {r_exact} (10^4 lines)"),
    );

    let oracles = metric_oracles();
    let ok = oracles.iter().all(|o| o.2 == 0);
    let detail = oracles.iter().map(|(n, k, bad, e)| format!("{n} {}/{k} (max err {e:.0e})", k - bad)).collect::<Vec<_>>();
    r.check("metric oracles", ok, detail.join(", "));

    let t = Instant::now();
    let errs = ransac_errors(100);
    let secs = t.elapsed().as_secs_f64();
    let good = errs.iter().filter(|&&e| e < 1.0).count();
    let worst = errs.iter().copied().fold(0.0, f64::max);
    r.check("ransac homography", good == 100 && secs < 60.0, format!("{good}/100 seeds < 1px (worst {worst:.2e}px); {secs:.1}s"));

    let errs = lift_errors(100);
    let good = errs.iter().filter(|&&e| e < 2.0).count();
    let ious = door_warp_ious(20);
    let min_iou = ious.iter().copied().fold(1.0, f64::min);
    r.check(
        "geometry on oracle",
        good >= 95 && min_iou > 0.8,
        format!("{good}/100 doors lifted within 2 deg; 30 deg warp IoU min {min_iou:.3} over {} doors", ious.len()),
    );

    let mut run = RunConfig::default();
    run.train.epochs = 100;
    run.train.lr = 1e-3;
    let train = generate_split(20, 7).unwrap().into_iter().map(|g| g.sample).collect();
    let heldout = generate_split(10, 8).unwrap().into_iter().map(|g| g.sample).collect();
    let budget = Duration::from_secs(30 * 60);
    let th = OverfitThresholds::default();
    match overfit_check(&run, train, heldout, budget, &th) {
        Ok((_, rep)) => {
            let (fit, held): (Vec<_>, Vec<_>) = rep.checks.iter().partition(|c| c.0 != "heldout_movable_acc");
            let detail = fit.iter().map(|c| format!("{} {:.3}>={:.2}", c.0, c.1, c.2)).collect::<Vec<_>>();
            r.check(
                "overfit run",
                fit.iter().all(|c| c.3) && rep.seconds <= budget.as_secs_f64(),
                format!("{}; {} epochs in {:.0}s", detail.join(", "), rep.epochs, rep.seconds),
            );
            let h = held[0];
            r.check(
                "generalization smoke",
                h.3,
                format!("held-out movable {:.3} vs majority {:.3} (+{:.2} needed)", h.1, rep.majority_baseline, th.heldout_margin),
            );
        }
        Err(e) => {
            r.check("overfit run", false, e.to_string());
            r.check("generalization smoke", false, "no trained model".into());
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let cli_result = end_to_end(dir.path());
    let predict_result = match &cli_result {
        Ok(ckpt) => tokio::runtime::Runtime::new().unwrap().block_on(predict_twice(ckpt)),
        Err(_) => Err("skipped, no checkpoint".into()),
    };
    let detail = match (&cli_result, &predict_result) {
        (Ok(_), Ok(())) => "all stages exit 0, outputs match schemas, 3 /predict responses byte-identical".into(),
        (Err(e), _) => e.clone(),
        (_, Err(e)) => format!("/predict: {e}"),
    };
    r.check("end-to-end cli", cli_result.is_ok() && predict_result.is_ok(), detail);

    let net = Network::new(&Default::default()).unwrap();
    let drift = permutation_drift(&net, &generate_one(13, 0, 256, 192).unwrap().sample);
    let g = padded_gradients(&net, generate_one(14, 0, 256, 192).unwrap().sample);
    r.check(
        "query independence",
        drift < 1e-5 && g.padded_output < 1e-7 && g.padded_input < 1e-7 && g.valid_input > 0.0,
        format!(
            "permutation drift {drift:.1e}; padded gradient {:.1e} on outputs, {:.1e} on inputs (valid {:.1e})",
            g.padded_output, g.padded_input, g.valid_input
        ),
    );

    assert!(r.failed.is_empty(), "failed: {}", r.failed.join(", "));
}

//! Evaluation metrics and the per-split report.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::{FRAC_PI_2, PI, SQRT_2};
use core::fmt::Write;

#[allow(unused_imports)] // std, when linked, provides these inherently
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::datamodel::{BoxXYXY, ImagePrediction, Mask, SceneSample};
use crate::error::{Error, Result};
use crate::geometry::{gaussian_bump, Line2D};
use crate::grid::Grid;

pub fn box_iou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// IoU of two binary grids; two empty grids score 1.
pub fn grid_iou(a: &Grid<bool>, b: &Grid<bool>) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "masks are {}x{} and {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::Shape("mask dimensions differ".into()));
    }
    grid_iou(&a.decode()?, &b.decode()?)
}

/// Line similarity in `[0, 1]`: the product of an angle score
/// `1 - dtheta / (pi/2)` (acute angle) and a distance score
/// `1 - |m1 - m2| / sqrt(2)` between the midpoints of both lines clipped to
/// the unit image square.
pub fn ea_score(pred: &Line2D, gt: &Line2D) -> Result<f64> {
    let (a0, a1) = pred
        .clip_to_unit_square()
        .ok_or_else(|| Error::Precondition("predicted line misses the image".into()))?;
    let (b0, b1) = gt
        .clip_to_unit_square()
        .ok_or_else(|| Error::Precondition("ground-truth line misses the image".into()))?;
    let d = (pred.theta - gt.theta).abs() % PI;
    let dtheta = d.min(PI - d);
    let s_angle = (1.0 - dtheta / FRAC_PI_2).max(0.0);
    let (mx, my) = (0.5 * (a0.0 + a1.0) - 0.5 * (b0.0 + b1.0), 0.5 * (a0.1 + a1.1) - 0.5 * (b0.1 + b1.1));
    let s_dist = (1.0 - (mx * mx + my * my).sqrt() / SQRT_2).max(0.0);
    Ok(s_angle * s_dist)
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let sum: f64 = v.iter().sum();
    if sum > 0.0 {
        v.iter().map(|x| x / sum).collect()
    } else {
        let u = 1.0 / v.len() as f64;
        v.iter().map(|_| u).collect()
    }
}

/// Histogram intersection of two nonnegative maps after normalizing each to
/// unit mass (an all-zero map counts as uniform).
pub fn sim(pred: &Grid<f64>, gt: &Grid<f64>) -> Result<f64> {
    if !pred.same_shape(gt) {
        return Err(Error::Shape("maps differ in shape".into()));
    }
    if pred.as_slice().iter().chain(gt.as_slice()).any(|v| !(*v >= 0.0)) {
        return Err(Error::Range { path: "sim".into(), message: "maps must be nonnegative".into() });
    }
    let p = normalized(pred.as_slice());
    let q = normalized(gt.as_slice());
    Ok(p.iter().zip(&q).map(|(a, b)| a.min(*b)).sum())
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}

/// Fraction of pixels with `max(p / g, g / p) < thresh`, after scaling `pred`
/// so its median matches the target's when `align` is set.
pub fn depth_delta(pred: &Grid<f64>, gt: &Grid<f64>, thresh: f64, align: bool) -> Result<f64> {
    if !pred.same_shape(gt) || pred.is_empty() {
        return Err(Error::Shape("depth maps differ in shape".into()));
    }
    if pred.as_slice().iter().chain(gt.as_slice()).any(|v| !(*v > 0.0)) {
        return Err(Error::Range { path: "depth".into(), message: "depth must be positive".into() });
    }
    let scale = if align {
        median(&mut pred.as_slice().to_vec()).recip() * median(&mut gt.as_slice().to_vec())
    } else {
        1.0
    };
    let hits = pred
        .as_slice()
        .iter()
        .zip(gt.as_slice())
        .filter(|(&p, &g)| {
            let p = p * scale;
            (p / g).max(g / p) < thresh
        })
        .count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Maps an affine-ambiguous depth prediction onto the target's shift and scale
/// (median and mean absolute deviation), floored to stay positive.
pub fn align_depth(pred: &Grid<f64>, gt: &Grid<f64>) -> Grid<f64> {
    let stats = |g: &Grid<f64>| {
        let m = median(&mut g.as_slice().to_vec());
        let mad = g.as_slice().iter().map(|v| (v - m).abs()).sum::<f64>() / g.len() as f64;
        (m, mad.max(1e-6))
    };
    let (pm, ps) = stats(pred);
    let (gm, gs) = stats(gt);
    let floor = gt.as_slice().iter().cloned().fold(f64::INFINITY, f64::min).max(1e-6) * 0.1;
    pred.map(|v| ((v - pm) / ps * gs + gm).max(floor))
}

/// Per-split means; `None` where no query carries the property.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub movable_acc: Option<f64>,
    pub rigidity_acc: Option<f64>,
    pub articulation_acc: Option<f64>,
    pub action_acc: Option<f64>,
    pub box_iou: Option<f64>,
    pub mask_iou: Option<f64>,
    pub axis_ea: Option<f64>,
    pub affordance_sim: Option<f64>,
    /// Depth accuracy at 1.25 and 1.25^2.
    pub depth_delta: [Option<f64>; 2],
    pub num_images: usize,
    pub num_queries: usize,
}

#[derive(Default, Clone, Copy)]
struct Mean {
    sum: f64,
    n: usize,
}

impl Mean {
    fn push(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    fn get(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

/// Probability map predicted for the affordance head.
pub fn affordance_probability(logits: &Grid<f64>) -> Grid<f64> {
    logits.map(|&z| 1.0 / (1.0 + (-z).exp()))
}

/// Binary mask from mask logits at the target resolution (probability 0.5).
pub fn binarize_mask(logits: &Grid<f64>, width: usize, height: usize) -> Grid<bool> {
    let up = if logits.width() == width && logits.height() == height {
        logits.clone()
    } else {
        logits.resize_bilinear(width, height)
    };
    up.map(|&z| z > 0.0)
}

/// Scores predictions against annotated samples, one prediction per query.
///
/// Each property is averaged only over queries where it is annotated, so
/// fixtures only count toward movable accuracy.
pub fn evaluate(predictions: &[ImagePrediction], samples: &[SceneSample]) -> Result<MetricReport> {
    if predictions.len() != samples.len() {
        return Err(Error::Precondition(format!(
            "{} predictions for {} samples",
            predictions.len(),
            samples.len()
        )));
    }
    let mut movable = Mean::default();
    let mut rigidity = Mean::default();
    let mut articulation = Mean::default();
    let mut action = Mean::default();
    let mut boxes = Mean::default();
    let mut masks = Mean::default();
    let mut axes = Mean::default();
    let mut affordance = Mean::default();
    let mut depth = [Mean::default(); 2];
    let mut num_queries = 0;

    for (pred, sample) in predictions.iter().zip(samples) {
        if pred.queries.len() < sample.queries.len() {
            return Err(Error::Precondition(format!("missing predictions for image {}", sample.image_id)));
        }
        for (q, gt) in pred.queries.iter().zip(&sample.queries) {
            num_queries += 1;
            movable.push((q.movable() == gt.movable) as u8 as f64);
            if let Some(c) = gt.rigidity {
                rigidity.push((q.rigidity() == c) as u8 as f64);
            }
            if let Some(c) = gt.articulation {
                articulation.push((q.articulation() == c) as u8 as f64);
            }
            if let Some(c) = gt.action {
                action.push((q.action() == c) as u8 as f64);
            }
            if let Some(b) = &gt.bbox {
                boxes.push(box_iou(&q.bbox.clamped(), b));
            }
            if let Some(m) = &gt.mask {
                let target = m.decode()?;
                let predicted = binarize_mask(&q.mask_logits, m.width, m.height);
                masks.push(grid_iou(&predicted, &target)?);
            }
            if let Some(axis) = &gt.axis {
                let score = q.axis_enc.decode().ok().and_then(|l| ea_score(&l, axis).ok()).unwrap_or(0.0);
                axes.push(score);
            }
            if let Some(k) = gt.affordance.and_then(|a| a.keypoint.map(|k| (k, a.radius_px))) {
                let grid = &q.affordance_logits;
                let target = gaussian_bump(k.0, k.1, grid.width(), grid.height());
                affordance.push(sim(&affordance_probability(grid), &target)?);
            }
        }
        if let Some(d) = &sample.depth {
            let gt = d.map(|&v| v as f64);
            let up = pred.depth.resize_bilinear(gt.width(), gt.height());
            let aligned = align_depth(&up, &gt);
            for (k, t) in [1.25, 1.25 * 1.25].into_iter().enumerate() {
                depth[k].push(depth_delta(&aligned, &gt, t, true)?);
            }
        }
    }
    Ok(MetricReport {
        movable_acc: movable.get(),
        rigidity_acc: rigidity.get(),
        articulation_acc: articulation.get(),
        action_acc: action.get(),
        box_iou: boxes.get(),
        mask_iou: masks.get(),
        axis_ea: axes.get(),
        affordance_sim: affordance.get(),
        depth_delta: [depth[0].get(), depth[1].get()],
        num_images: samples.len(),
        num_queries,
    })
}

impl MetricReport {
    /// Values that must lie in `[0, 1]`, labelled.
    pub fn values(&self) -> [(&'static str, Option<f64>); 10] {
        [
            ("movable_acc", self.movable_acc),
            ("box_iou", self.box_iou),
            ("mask_iou", self.mask_iou),
            ("rigidity_acc", self.rigidity_acc),
            ("articulation_acc", self.articulation_acc),
            ("axis_ea", self.axis_ea),
            ("action_acc", self.action_acc),
            ("affordance_sim", self.affordance_sim),
            ("depth_delta_1.25", self.depth_delta[0]),
            ("depth_delta_1.25^2", self.depth_delta[1]),
        ]
    }

    /// Plain-text table: Movable, Box, Mask, Rigidity, Articulation Cat.,
    /// Axis, Action, Affordance, then depth. Percentages, except SIM.
    pub fn table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or_else(|| String::from("-"), |v| format!("{:.1}", 100.0 * v));
        let raw = |v: Option<f64>| v.map_or_else(|| String::from("-"), |v| format!("{v:.3}"));
        let header = [
            "Movable", "Box", "Mask", "Rigidity", "Articulation Cat.", "Axis", "Action", "Affordance",
            "Depth d<1.25",
        ];
        let cells = [
            pct(self.movable_acc),
            pct(self.box_iou),
            pct(self.mask_iou),
            pct(self.rigidity_acc),
            pct(self.articulation_acc),
            pct(self.axis_ea),
            pct(self.action_acc),
            raw(self.affordance_sim),
            pct(self.depth_delta[0]),
        ];
        let mut out = String::new();
        let widths: Vec<usize> = header.iter().zip(&cells).map(|(h, c)| h.len().max(c.len())).collect();
        for (i, h) in header.iter().enumerate() {
            let _ = write!(out, "| {:w$} ", h, w = widths[i]);
        }
        out.push_str("|\n");
        for w in &widths {
            let _ = write!(out, "|{}", "-".repeat(w + 2));
        }
        out.push_str("|\n");
        for (i, c) in cells.iter().enumerate() {
            let _ = write!(out, "| {:>w$} ", c, w = widths[i]);
        }
        out.push_str("|\n");
        out
    }
}

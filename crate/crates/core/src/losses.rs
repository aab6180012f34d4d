//! Training losses with analytic gradients.
//!
//! Every loss returns its value together with the gradient with respect to
//! the raw prediction it consumes (logits, box corners, axis encoding, depth).
//! The network crate pushes these gradients back through its own graph, so
//! each formula lives in exactly one place.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // std, when linked, provides these inherently
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    ActionClass, ArticulationClass, BoxXYXY, ImagePrediction, MovableClass, QueryAnnotation, RigidityClass,
    SceneSample,
};
use crate::error::{Error, Result};
use crate::geometry::{gaussian_bump, AxisEncoding};
use crate::grid::Grid;

/// Logits are clamped to this magnitude inside the focal losses.
pub const LOGIT_CLAMP: f64 = 15.0;
/// Floor on the per-image depth scale.
pub const SCALE_FLOOR: f64 = 1e-6;
/// Bump values at or above this count as positives for the affordance alpha.
pub const AFFORDANCE_POSITIVE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub w_movable: f64,
    pub w_rigidity: f64,
    pub w_articulation: f64,
    pub w_action: f64,
    pub w_mask_focal: f64,
    pub w_mask_dice: f64,
    pub w_box_l1: f64,
    pub w_box_giou: f64,
    pub w_axis_angle: f64,
    pub w_axis_offset: f64,
    pub w_affordance: f64,
    /// Weight of the KL between the spatial softmax of the affordance
    /// logits and the normalized bump.
    pub w_affordance_spatial: f64,
    pub w_depth: f64,
    pub focal_gamma: f64,
    pub mask_focal_alpha: f64,
    pub affordance_alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            w_movable: 0.5,
            w_rigidity: 0.5,
            w_articulation: 0.5,
            w_action: 0.5,
            w_mask_focal: 2.0,
            w_mask_dice: 2.0,
            w_box_l1: 5.0,
            w_box_giou: 2.0,
            w_axis_angle: 1.0,
            w_axis_offset: 10.0,
            w_affordance: 100.0,
            w_affordance_spatial: 1.0,
            w_depth: 1.0,
            focal_gamma: 2.0,
            mask_focal_alpha: 0.25,
            affordance_alpha: 0.95,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ws = LossTerm::ALL.iter().map(|t| self.weight(*t));
        if ws.chain([self.focal_gamma]).any(|w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::range("loss_config", "weights and gamma must be finite and >= 0"));
        }
        for a in [self.mask_focal_alpha, self.affordance_alpha] {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::range("loss_config", "alpha must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn weight(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::Movable => self.w_movable,
            LossTerm::Rigidity => self.w_rigidity,
            LossTerm::Articulation => self.w_articulation,
            LossTerm::Action => self.w_action,
            LossTerm::MaskFocal => self.w_mask_focal,
            LossTerm::MaskDice => self.w_mask_dice,
            LossTerm::BoxL1 => self.w_box_l1,
            LossTerm::BoxGiou => self.w_box_giou,
            LossTerm::AxisAngle => self.w_axis_angle,
            LossTerm::AxisOffset => self.w_axis_offset,
            LossTerm::Affordance => self.w_affordance,
            LossTerm::AffordanceSpatial => self.w_affordance_spatial,
            LossTerm::DepthSsi | LossTerm::DepthGradient => self.w_depth,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Movable,
    Rigidity,
    Articulation,
    Action,
    MaskFocal,
    MaskDice,
    BoxL1,
    BoxGiou,
    AxisAngle,
    AxisOffset,
    Affordance,
    AffordanceSpatial,
    DepthSsi,
    DepthGradient,
}

impl LossTerm {
    pub const COUNT: usize = 14;

    pub const ALL: [LossTerm; Self::COUNT] = [
        LossTerm::Movable,
        LossTerm::Rigidity,
        LossTerm::Articulation,
        LossTerm::Action,
        LossTerm::MaskFocal,
        LossTerm::MaskDice,
        LossTerm::BoxL1,
        LossTerm::BoxGiou,
        LossTerm::AxisAngle,
        LossTerm::AxisOffset,
        LossTerm::Affordance,
        LossTerm::AffordanceSpatial,
        LossTerm::DepthSsi,
        LossTerm::DepthGradient,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Movable => "movable",
            LossTerm::Rigidity => "rigidity",
            LossTerm::Articulation => "articulation",
            LossTerm::Action => "action",
            LossTerm::MaskFocal => "mask_focal",
            LossTerm::MaskDice => "mask_dice",
            LossTerm::BoxL1 => "box_l1",
            LossTerm::BoxGiou => "box_giou",
            LossTerm::AxisAngle => "axis_angle",
            LossTerm::AxisOffset => "axis_offset",
            LossTerm::Affordance => "affordance",
            LossTerm::AffordanceSpatial => "affordance_spatial",
            LossTerm::DepthSsi => "depth_ssi",
            LossTerm::DepthGradient => "depth_gradient",
        }
    }
}

/// Unweighted per-term values, whether each term had any contributor, and
/// the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: [f64; LossTerm::COUNT],
    pub active: [bool; LossTerm::COUNT],
    pub total: f64,
}

impl LossReport {
    pub fn term(&self, t: LossTerm) -> f64 {
        self.terms[t as usize]
    }

    pub fn is_active(&self, t: LossTerm) -> bool {
        self.active[t as usize]
    }

    /// First term that is not finite, if any.
    pub fn non_finite_term(&self) -> Option<LossTerm> {
        LossTerm::ALL.iter().copied().find(|t| !self.term(*t).is_finite())
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))` without overflow.
#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `-log softmax(logits)[label]` and its gradient `softmax - onehot`.
pub fn ce_loss(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// How the focal loss balances positives against negatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FocalAlpha {
    /// `alpha` on the target part, `1 - alpha` on the background part.
    Standard(f64),
    /// Whole-pixel weight `alpha` where the target is at least `threshold`,
    /// `1 - alpha` elsewhere; targets stay soft.
    PixelSplit { alpha: f64, threshold: f64 },
}

/// Mean binary focal loss over `logits` with soft `target` in `[0, 1]`.
///
/// Per pixel, with `p = sigmoid(z)` and `z` clamped to +-15:
/// `-a (1 - p)^g t log p - b p^g (1 - t) log(1 - p)`.
pub fn focal_loss(logits: &[f64], target: &[f64], alpha: FocalAlpha, gamma: f64) -> (f64, Vec<f64>) {
    debug_assert_eq!(logits.len(), target.len());
    let n = logits.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (i, (&raw, &t)) in logits.iter().zip(target).enumerate() {
        let clamped = !(-LOGIT_CLAMP..=LOGIT_CLAMP).contains(&raw);
        let z = raw.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
        let (a_pos, a_neg) = match alpha {
            FocalAlpha::Standard(a) => (a, 1.0 - a),
            FocalAlpha::PixelSplit { alpha, threshold } => {
                let a = if t >= threshold { alpha } else { 1.0 - alpha };
                (a, a)
            }
        };
        let p = sigmoid(z);
        let q = 1.0 - p;
        let log_p = -softplus(-z);
        let log_q = -softplus(z);
        let qg = q.powf(gamma);
        let pg = p.powf(gamma);
        loss += -a_pos * qg * t * log_p - a_neg * pg * (1.0 - t) * log_q;
        if !clamped {
            // d/dz of each part, using dp/dz = p q.
            let d_pos = gamma * p * qg * log_p - qg * q;
            let d_neg = -gamma * pg * q * log_q + pg * p;
            grad[i] = (a_pos * t * d_pos + a_neg * (1.0 - t) * d_neg) / n;
        }
    }
    (loss / n, grad)
}

/// `1 - (2 sum(p t) + 1) / (sum(p) + sum(t) + 1)` and its gradient in `p`.
pub fn dice_loss(probs: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let inter: f64 = probs.iter().zip(target).map(|(p, t)| p * t).sum();
    let sp: f64 = probs.iter().sum();
    let st: f64 = target.iter().sum();
    let num = 2.0 * inter + 1.0;
    let den = sp + st + 1.0;
    let grad = target.iter().map(|t| -(2.0 * t * den - num) / (den * den)).collect();
    (1.0 - num / den, grad)
}

/// [`dice_loss`] on `sigmoid(logits)`, with the gradient in the logits.
pub fn dice_loss_logits(logits: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let (loss, dp) = dice_loss(&probs, target);
    let grad = dp.iter().zip(&probs).map(|(g, p)| g * p * (1.0 - p)).collect();
    (loss, grad)
}

/// `KL(q || softmax(logits))` with `q = target / sum(target)`, and its
/// gradient `softmax(logits) - q`. Unlike the per-pixel focal loss this
/// charges for probability mass spread away from the target.
pub fn spatial_kl_loss(logits: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    let mass: f64 = target.iter().sum();
    if logits.len() != target.len() || !(mass > 0.0) || target.iter().any(|t| *t < 0.0) {
        return Err(Error::Precondition("spatial target must be nonnegative with positive mass".into()));
    }
    let p = softmax(logits);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for ((&z, &t), &pi) in logits.iter().zip(target).zip(&p) {
        let q = t / mass;
        if q > 0.0 {
            loss += q * (q.ln() - (z - lse));
        }
        grad.push(pi - q);
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxLoss {
    pub l1: f64,
    pub giou: f64,
    pub l1_grad: [f64; 4],
    pub giou_grad: [f64; 4],
}

/// Generalized IoU of two boxes with positive extent.
pub fn giou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let hull = (a.x2.max(b.x2) - a.x1.min(b.x1)) * (a.y2.max(b.y2) - a.y1.min(b.y1));
    inter / union - (hull - union) / hull
}

/// L1 over the four corners and `1 - GIoU`, with gradients in `pred`.
pub fn box_losses(pred: &BoxXYXY, gt: &BoxXYXY) -> Result<BoxLoss> {
    if !(gt.x2 > gt.x1 && gt.y2 > gt.y1) {
        return Err(Error::Degenerate("ground-truth box has no area".into()));
    }
    let (p, g) = (pred.as_array(), gt.as_array());
    let mut l1 = 0.0;
    let mut l1_grad = [0.0; 4];
    for k in 0..4 {
        let d = p[k] - g[k];
        l1 += d.abs();
        l1_grad[k] = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
    }

    let [x1, y1, x2, y2] = p;
    let [gx1, gy1, gx2, gy2] = g;
    let (pw, ph) = (x2 - x1, y2 - y1);
    let area_p = pw * ph;
    let area_g = (gx2 - gx1) * (gy2 - gy1);
    let iw = x2.min(gx2) - x1.max(gx1);
    let ih = y2.min(gy2) - y1.max(gy1);
    let (iw, ih, overlap) = if iw > 0.0 && ih > 0.0 { (iw, ih, true) } else { (0.0, 0.0, false) };
    let inter = iw * ih;
    let union = area_p + area_g - inter;
    let cw = x2.max(gx2) - x1.min(gx1);
    let ch = y2.max(gy2) - y1.min(gy1);
    let hull = cw * ch;
    let giou_v = inter / union - (hull - union) / hull;

    let d_area = [-ph, -pw, ph, pw];
    let d_inter = if overlap {
        [
            if x1 > gx1 { -ih } else { 0.0 },
            if y1 > gy1 { -iw } else { 0.0 },
            if x2 < gx2 { ih } else { 0.0 },
            if y2 < gy2 { iw } else { 0.0 },
        ]
    } else {
        [0.0; 4]
    };
    let d_hull = [
        if x1 < gx1 { -ch } else { 0.0 },
        if y1 < gy1 { -cw } else { 0.0 },
        if x2 > gx2 { ch } else { 0.0 },
        if y2 > gy2 { cw } else { 0.0 },
    ];
    let mut giou_grad = [0.0; 4];
    for k in 0..4 {
        let du = d_area[k] - d_inter[k];
        let d_iou = (d_inter[k] * union - inter * du) / (union * union);
        let d_ratio = (du * hull - union * d_hull[k]) / (hull * hull);
        // loss = 2 - IoU - U / C
        giou_grad[k] = -d_iou - d_ratio;
    }
    Ok(BoxLoss { l1, giou: 1.0 - giou_v, l1_grad, giou_grad })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisLoss {
    pub angle: f64,
    pub offset: f64,
    pub angle_grad: [f64; 3],
    pub offset_grad: [f64; 3],
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// L1 on the angle pair and on the offset, kept separate for weighting.
pub fn axis_loss(pred: &AxisEncoding, gt: &AxisEncoding) -> AxisLoss {
    let (ds, dc, dr) = (pred.s2 - gt.s2, pred.c2 - gt.c2, pred.r - gt.r);
    AxisLoss {
        angle: ds.abs() + dc.abs(),
        offset: dr.abs(),
        angle_grad: [sign(ds), sign(dc), 0.0],
        offset_grad: [0.0, 0.0, sign(dr)],
    }
}

/// Per-image shift/scale normalization of the valid entries of a depth map:
/// shift is the median, scale the mean absolute deviation from it.
#[derive(Debug, Clone)]
struct Alignment {
    values: Vec<f64>,
    median: f64,
    /// `(index, d median / d value)` pairs.
    median_weights: Vec<(usize, f64)>,
    scale: f64,
    floored: bool,
}

impl Alignment {
    fn new(values: Vec<f64>) -> Self {
        let n = values.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let (median, median_weights) = if n % 2 == 1 {
            (values[order[n / 2]], vec![(order[n / 2], 1.0)])
        } else {
            let (a, b) = (order[n / 2 - 1], order[n / 2]);
            (0.5 * (values[a] + values[b]), vec![(a, 0.5), (b, 0.5)])
        };
        let mad = values.iter().map(|v| (v - median).abs()).sum::<f64>() / n as f64;
        let floored = mad < SCALE_FLOOR;
        Self { values, median, median_weights, scale: mad.max(SCALE_FLOOR), floored }
    }

    fn aligned(&self) -> Vec<f64> {
        self.values.iter().map(|v| (v - self.median) / self.scale).collect()
    }

    /// Pulls a gradient on the aligned values back onto the raw values.
    fn backward(&self, grad_aligned: &[f64]) -> Vec<f64> {
        let n = self.values.len() as f64;
        let s = self.scale;
        let g_sum: f64 = grad_aligned.iter().sum();
        let ga_sum: f64 = grad_aligned.iter().zip(&self.values).map(|(g, v)| g * (v - self.median) / s).sum();
        let mut grad: Vec<f64> = grad_aligned.iter().map(|g| g / s).collect();
        for &(j, w) in &self.median_weights {
            grad[j] -= w * g_sum / s;
        }
        if !self.floored {
            let sign_sum: f64 = self.values.iter().map(|v| sign(v - self.median)).sum();
            let mut ds: Vec<f64> = self.values.iter().map(|v| sign(v - self.median) / n).collect();
            for &(j, w) in &self.median_weights {
                ds[j] -= w * sign_sum / n;
            }
            for (g, d) in grad.iter_mut().zip(ds) {
                *g -= ga_sum / s * d;
            }
        }
        grad
    }
}

struct DepthPair {
    indices: Vec<usize>,
    pred: Alignment,
    residual: Vec<f64>,
}

fn depth_pair(pred: &Grid<f64>, gt: &Grid<f64>, valid: &Grid<bool>) -> Result<DepthPair> {
    if !pred.same_shape(gt) || !pred.same_shape(valid) {
        return Err(Error::Shape("depth prediction, target and validity differ in shape".into()));
    }
    let indices: Vec<usize> = valid.as_slice().iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i).collect();
    if indices.len() < 2 {
        return Err(Error::Precondition("depth loss needs at least 2 valid pixels".into()));
    }
    let p = Alignment::new(indices.iter().map(|&i| pred.as_slice()[i]).collect());
    let g = Alignment::new(indices.iter().map(|&i| gt.as_slice()[i]).collect());
    let residual = p.aligned().iter().zip(g.aligned()).map(|(a, b)| a - b).collect();
    Ok(DepthPair { indices, pred: p, residual })
}

impl DepthPair {
    fn scatter(&self, grad_residual: &[f64], like: &Grid<f64>) -> Grid<f64> {
        let raw = self.pred.backward(grad_residual);
        let mut out = Grid::filled(like.width(), like.height(), 0.0);
        for (&i, g) in self.indices.iter().zip(raw) {
            out.as_mut_slice()[i] = g;
        }
        out
    }
}

/// Mean L1 between the shift/scale-normalized prediction and target over
/// valid pixels. Gradient is with respect to `pred`.
pub fn ssi_depth_loss(pred: &Grid<f64>, gt: &Grid<f64>, valid: &Grid<bool>) -> Result<(f64, Grid<f64>)> {
    let pair = depth_pair(pred, gt, valid)?;
    let n = pair.residual.len() as f64;
    let loss = pair.residual.iter().map(|r| r.abs()).sum::<f64>() / n;
    let g: Vec<f64> = pair.residual.iter().map(|r| sign(*r) / n).collect();
    Ok((loss, pair.scatter(&g, pred)))
}

/// Multi-scale gradient matching on the normalized residual: at each of
/// `scales` dyadic subsamplings, the L1 of horizontal and vertical residual
/// differences between valid neighbours divided by the valid count.
pub fn gradient_matching_loss(
    pred: &Grid<f64>,
    gt: &Grid<f64>,
    valid: &Grid<bool>,
    scales: usize,
) -> Result<(f64, Grid<f64>)> {
    let pair = depth_pair(pred, gt, valid)?;
    let (w, h) = (pred.width(), pred.height());
    let mut residual = vec![0.0; w * h];
    let mut slot = vec![usize::MAX; w * h];
    for (k, &i) in pair.indices.iter().enumerate() {
        residual[i] = pair.residual[k];
        slot[i] = k;
    }
    let mut grad_r = vec![0.0; pair.residual.len()];
    let mut loss = 0.0;
    for s in 0..scales {
        let step = 1usize << s;
        let count = (0..h)
            .step_by(step)
            .flat_map(|r| (0..w).step_by(step).map(move |c| r * w + c))
            .filter(|&i| slot[i] != usize::MAX)
            .count();
        if count == 0 {
            continue;
        }
        let inv = 1.0 / count as f64;
        for r in (0..h).step_by(step) {
            for c in (0..w).step_by(step) {
                let i = r * w + c;
                if slot[i] == usize::MAX {
                    continue;
                }
                let neighbours = [(c + step < w).then(|| i + step), (r + step < h).then(|| i + step * w)];
                for j in neighbours.into_iter().flatten() {
                    if slot[j] == usize::MAX {
                        continue;
                    }
                    let d = residual[j] - residual[i];
                    loss += d.abs() * inv;
                    grad_r[slot[j]] += sign(d) * inv;
                    grad_r[slot[i]] -= sign(d) * inv;
                }
            }
        }
    }
    Ok((loss, pair.scatter(&grad_r, pred)))
}

/// Ground truth for one query slot, rasterized at the prediction resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryTarget {
    pub movable: MovableClass,
    pub rigidity: Option<RigidityClass>,
    pub articulation: Option<ArticulationClass>,
    pub action: Option<ActionClass>,
    pub bbox: Option<BoxXYXY>,
    pub mask: Option<Grid<f64>>,
    pub axis: Option<AxisEncoding>,
    pub affordance: Option<Grid<f64>>,
}

impl QueryTarget {
    pub fn from_annotation(q: &QueryAnnotation, out_w: usize, out_h: usize) -> Result<Self> {
        let mask = match &q.mask {
            Some(m) => Some(
                m.decode()?
                    .resize_nearest(out_w, out_h)
                    .map(|&b| if b { 1.0 } else { 0.0 }),
            ),
            None => None,
        };
        let affordance = q
            .affordance
            .and_then(|a| a.keypoint.map(|k| (k, a.radius_px)))
            .map(|(k, radius)| gaussian_bump(k, radius, out_w, out_h));
        Ok(Self {
            movable: q.movable,
            rigidity: q.rigidity,
            articulation: q.articulation,
            action: q.action,
            bbox: q.bbox,
            mask,
            axis: q.axis.map(|a| a.encode()),
            affordance,
        })
    }
}

/// Targets for one image; `queries[i]` pairs with prediction slot `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTargets {
    pub queries: Vec<QueryTarget>,
    pub depth: Option<Grid<f64>>,
    pub depth_valid: Option<Grid<bool>>,
}

impl ImageTargets {
    /// Targets for a stored sample: per-query maps at `map_w x map_h`, depth
    /// resampled to `depth_w x depth_h` with nonpositive cells invalid.
    pub fn from_sample(sample: &SceneSample, map_w: usize, map_h: usize, depth_w: usize, depth_h: usize) -> Result<Self> {
        let queries =
            sample.queries.iter().map(|q| QueryTarget::from_annotation(q, map_w, map_h)).collect::<Result<_>>()?;
        let (depth, depth_valid) = match &sample.depth {
            Some(d) => {
                let g = d.map(|&v| v as f64).resize_bilinear(depth_w, depth_h);
                let valid = g.map(|&v| v > 0.0 && v.is_finite());
                (Some(g), Some(valid))
            }
            None => (None, None),
        };
        Ok(Self { queries, depth, depth_valid })
    }
}

/// Gradient of the weighted total with respect to one query's outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryGrad {
    pub movable: [f64; 3],
    pub rigidity: [f64; 2],
    pub articulation: [f64; 3],
    pub action: [f64; 3],
    pub bbox: [f64; 4],
    pub axis: [f64; 3],
    pub mask: Vec<f64>,
    pub affordance: Vec<f64>,
}

impl QueryGrad {
    fn zeros(mask_len: usize, affordance_len: usize) -> Self {
        Self {
            movable: [0.0; 3],
            rigidity: [0.0; 2],
            articulation: [0.0; 3],
            action: [0.0; 3],
            bbox: [0.0; 4],
            axis: [0.0; 3],
            mask: vec![0.0; mask_len],
            affordance: vec![0.0; affordance_len],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrad {
    pub queries: Vec<QueryGrad>,
    pub depth: Vec<f64>,
}

/// One image's predictions, targets and slot validity.
#[derive(Debug, Clone, Copy)]
pub struct LossInput<'a> {
    pub prediction: &'a ImagePrediction,
    pub targets: &'a ImageTargets,
    pub valid: &'a [bool],
}

#[derive(Default, Clone, Copy)]
struct Acc {
    sum: f64,
    count: usize,
}

/// Weighted sum of every loss over a batch, plus its gradient.
///
/// Each term is averaged over the items that carry its label: class terms over
/// valid query slots with that property annotated, axis terms over rotation
/// targets, depth terms over images with depth. Padded slots and absent
/// properties contribute exactly nothing.
pub fn total_loss(batch: &[LossInput<'_>], cfg: &LossConfig) -> Result<(LossReport, Vec<ImageGrad>)> {
    let mut acc = [Acc::default(); LossTerm::COUNT];
    // Gradients are first accumulated unnormalized, then scaled per term.
    struct Pending {
        term: LossTerm,
        image: usize,
        slot: usize,
        grad: Vec<f64>,
    }
    let mut pending: Vec<Pending> = Vec::new();
    let mut grads: Vec<ImageGrad> = Vec::with_capacity(batch.len());
    let mut any_valid = false;

    for (bi, input) in batch.iter().enumerate() {
        let pred = input.prediction;
        let mask_len = pred.queries.first().map_or(0, |q| q.mask_logits.len());
        let aff_len = pred.queries.first().map_or(0, |q| q.affordance_logits.len());
        grads.push(ImageGrad {
            queries: (0..pred.queries.len()).map(|_| QueryGrad::zeros(mask_len, aff_len)).collect(),
            depth: vec![0.0; pred.depth.len()],
        });
        let mut add = |term: LossTerm, slot: usize, value: f64, grad: Vec<f64>| {
            acc[term as usize].sum += value;
            acc[term as usize].count += 1;
            pending.push(Pending { term, image: bi, slot, grad });
        };

        for (slot, target) in input.targets.queries.iter().enumerate() {
            if !input.valid.get(slot).copied().unwrap_or(false) {
                continue;
            }
            let q = pred
                .queries
                .get(slot)
                .ok_or_else(|| Error::Shape(alloc::format!("no prediction for query slot {slot}")))?;
            any_valid = true;
            let (v, g) = ce_loss(&q.movable_logits, target.movable.index());
            add(LossTerm::Movable, slot, v, g);
            if target.movable == MovableClass::Fixture {
                continue;
            }
            if let Some(c) = target.rigidity {
                let (v, g) = ce_loss(&q.rigidity_logits, c.index());
                add(LossTerm::Rigidity, slot, v, g);
            }
            if let Some(c) = target.articulation {
                let (v, g) = ce_loss(&q.articulation_logits, c.index());
                add(LossTerm::Articulation, slot, v, g);
            }
            if let Some(c) = target.action {
                let (v, g) = ce_loss(&q.action_logits, c.index());
                add(LossTerm::Action, slot, v, g);
            }
            if let Some(b) = &target.bbox {
                let bl = box_losses(&q.bbox, b)?;
                add(LossTerm::BoxL1, slot, bl.l1, bl.l1_grad.to_vec());
                add(LossTerm::BoxGiou, slot, bl.giou, bl.giou_grad.to_vec());
            }
            if let Some(m) = &target.mask {
                if !m.same_shape(&q.mask_logits) {
                    return Err(Error::Shape("mask target resolution differs from prediction".into()));
                }
                let (v, g) = focal_loss(
                    q.mask_logits.as_slice(),
                    m.as_slice(),
                    FocalAlpha::Standard(cfg.mask_focal_alpha),
                    cfg.focal_gamma,
                );
                add(LossTerm::MaskFocal, slot, v, g);
                let (v, g) = dice_loss_logits(q.mask_logits.as_slice(), m.as_slice());
                add(LossTerm::MaskDice, slot, v, g);
            }
            if target.articulation == Some(ArticulationClass::Rotation) {
                if let Some(axis) = &target.axis {
                    let al = axis_loss(&q.axis_enc, axis);
                    add(LossTerm::AxisAngle, slot, al.angle, al.angle_grad.to_vec());
                    add(LossTerm::AxisOffset, slot, al.offset, al.offset_grad.to_vec());
                }
            }
            if let Some(a) = &target.affordance {
                if !a.same_shape(&q.affordance_logits) {
                    return Err(Error::Shape("affordance target resolution differs from prediction".into()));
                }
                let (v, g) = focal_loss(
                    q.affordance_logits.as_slice(),
                    a.as_slice(),
                    FocalAlpha::PixelSplit { alpha: cfg.affordance_alpha, threshold: AFFORDANCE_POSITIVE },
                    cfg.focal_gamma,
                );
                add(LossTerm::Affordance, slot, v, g);
                let (v, g) = spatial_kl_loss(q.affordance_logits.as_slice(), a.as_slice())?;
                add(LossTerm::AffordanceSpatial, slot, v, g);
            }
        }

        if let Some(gt) = &input.targets.depth {
            let all_valid;
            let valid = match &input.targets.depth_valid {
                Some(v) => v,
                None => {
                    all_valid = Grid::filled(gt.width(), gt.height(), true);
                    &all_valid
                }
            };
            let (v, g) = ssi_depth_loss(&pred.depth, gt, valid)?;
            add(LossTerm::DepthSsi, usize::MAX, v, g.into_vec());
            let (v, g) = gradient_matching_loss(&pred.depth, gt, valid, 4)?;
            add(LossTerm::DepthGradient, usize::MAX, v, g.into_vec());
        }
    }
    if !any_valid {
        return Err(Error::Precondition("batch has no valid query".into()));
    }

    let mut terms = [0.0; LossTerm::COUNT];
    let mut active = [false; LossTerm::COUNT];
    let mut total = 0.0;
    for t in LossTerm::ALL {
        let a = acc[t as usize];
        if a.count > 0 {
            terms[t as usize] = a.sum / a.count as f64;
            active[t as usize] = true;
            total += cfg.weight(t) * terms[t as usize];
        }
    }

    for p in pending {
        let scale = cfg.weight(p.term) / acc[p.term as usize].count as f64;
        let img = &mut grads[p.image];
        let dst: &mut [f64] = match p.term {
            LossTerm::DepthSsi | LossTerm::DepthGradient => &mut img.depth,
            LossTerm::Movable => &mut img.queries[p.slot].movable,
            LossTerm::Rigidity => &mut img.queries[p.slot].rigidity,
            LossTerm::Articulation => &mut img.queries[p.slot].articulation,
            LossTerm::Action => &mut img.queries[p.slot].action,
            LossTerm::MaskFocal | LossTerm::MaskDice => &mut img.queries[p.slot].mask,
            LossTerm::BoxL1 | LossTerm::BoxGiou => &mut img.queries[p.slot].bbox,
            LossTerm::AxisAngle | LossTerm::AxisOffset => &mut img.queries[p.slot].axis,
            LossTerm::Affordance | LossTerm::AffordanceSpatial => &mut img.queries[p.slot].affordance,
        };
        for (d, g) in dst.iter_mut().zip(p.grad) {
            *d += scale * g;
        }
    }
    Ok((LossReport { terms, active, total }, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ce_confident_and_uniform() {
        assert!(ce_loss(&[1e9, 0.0, 0.0], 0).0.abs() < 1e-12);
        assert!((ce_loss(&[0.3, 0.3, 0.3], 2).0 - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn focal_perfect_prediction() {
        let (l, _) = focal_loss(&[50.0, -50.0], &[1.0, 0.0], FocalAlpha::Standard(0.25), 2.0);
        assert!(l < 1e-6);
    }

    #[test]
    fn focal_reduces_to_half_bce() {
        let z = [0.3, -1.2, 2.0];
        let t = [1.0, 0.0, 1.0];
        let (l, _) = focal_loss(&z, &t, FocalAlpha::Standard(0.5), 0.0);
        let bce: f64 = z
            .iter()
            .zip(&t)
            .map(|(&z, &t)| {
                let p = 1.0 / (1.0 + (-z).exp());
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 3.0;
        assert!((l - 0.5 * bce).abs() < 1e-12);
    }

    #[test]
    fn dice_identity_and_disjoint() {
        let t = [1.0, 1.0, 0.0, 0.0];
        let (l, _) = dice_loss(&t, &t);
        assert!((l - (1.0 - 5.0 / 5.0)).abs() < 1e-12);
        let p = [0.0, 0.0, 1.0, 1.0];
        // A = 2: 1 - 1 / (2 + 2 + 1)
        assert!((dice_loss(&p, &t).0 - (1.0 - 1.0 / 5.0)).abs() < 1e-12);
    }

    #[test]
    fn box_identity_and_far() {
        let b = BoxXYXY::new(0.1, 0.2, 0.4, 0.6);
        let l = box_losses(&b, &b).unwrap();
        assert_eq!((l.l1, l.giou), (0.0, 0.0));
        let far = BoxXYXY::new(0.8, 0.8, 0.9, 0.95);
        assert!(box_losses(&far, &b).unwrap().giou > 1.0);
        assert!(box_losses(&b, &BoxXYXY::new(0.2, 0.2, 0.2, 0.5)).is_err());
    }

    #[test]
    fn axis_perpendicular_identity() {
        let th = 0.4f64;
        let a = AxisEncoding { s2: (2.0 * th).sin(), c2: (2.0 * th).cos(), r: 0.3 };
        let b = AxisEncoding { s2: (2.0 * th + core::f64::consts::PI).sin(), c2: (2.0 * th + core::f64::consts::PI).cos(), r: 0.3 };
        let l = axis_loss(&a, &b);
        let expected = 2.0 * (2.0 * th).sin().abs() + 2.0 * (2.0 * th).cos().abs();
        assert!((l.angle - expected).abs() < 1e-12);
        assert_eq!(l.offset, 0.0);
        assert_eq!(axis_loss(&a, &a).angle, 0.0);
    }

    #[test]
    fn ssi_affine_invariance_and_flat_target() {
        let gt = Grid::from_fn(6, 5, |c, r| 1.0 + 0.3 * c as f64 + 0.17 * (r * r) as f64);
        let pred = gt.map(|d| 2.5 * d - 0.7);
        let valid = Grid::filled(6, 5, true);
        assert!(ssi_depth_loss(&pred, &gt, &valid).unwrap().0 < 1e-12);
        let flat = Grid::filled(6, 5, 3.0);
        let (l, g) = ssi_depth_loss(&pred, &flat, &valid).unwrap();
        assert!(l.is_finite() && g.as_slice().iter().all(|v| v.is_finite()));
        assert!(ssi_depth_loss(&pred, &gt, &Grid::filled(6, 5, false)).is_err());
    }

    #[test]
    fn gradient_matching_zero_cases() {
        let gt = Grid::from_fn(8, 8, |c, r| 1.0 + (c * r) as f64 * 0.1);
        let valid = Grid::filled(8, 8, true);
        assert_eq!(gradient_matching_loss(&gt, &gt, &valid, 4).unwrap().0, 0.0);
        let shifted = gt.map(|d| d + 4.0);
        assert!(gradient_matching_loss(&shifted, &gt, &valid, 4).unwrap().0 < 1e-12);
    }
}

//! Inference-facing payloads: the JSON answer for a set of query points and
//! the articulation clip built from it.

use std::collections::BTreeMap;

use interact3d_core::datamodel::{
    ActionClass, ArticulationClass, ImagePrediction, InteractionPrediction, Mask, MovableClass, QueryPoint, MAX_QUERIES,
    RigidityClass, RgbGrid,
};
use interact3d_core::geometry::Vec3;
use interact3d_core::losses::softmax;
use interact3d_core::metrics::{affordance_probability, binarize_mask};
use interact3d_core::renderer::{composite, render_rotation, render_translation, sweep, ArticulationClip, MotionKind};
use interact3d_core::{BoxXYXY, CameraModel, Grid};
use serde::{Deserialize, Serialize};

use crate::network::{Network, NetworkError};

/// JSON schema every [`PredictResponse`] validates against.
pub const RESPONSE_SCHEMA: &str = include_str!("../schema/predict_response.schema.json");
/// JSON schema of the render manifest.
pub const MANIFEST_SCHEMA: &str = include_str!("../schema/render_manifest.schema.json");

#[derive(Debug, thiserror::Error)]
pub enum PredictError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{got} points exceed the limit of {limit}")]
    TooManyPoints { got: usize, limit: usize },
    #[error("{0}")]
    Unsupported(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("{0}")]
    Core(#[from] interact3d_core::Error),
}

pub type Result<T, E = PredictError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassOutput {
    pub label: String,
    pub probabilities: BTreeMap<String, f64>,
}

impl ClassOutput {
    fn new(logits: &[f64], labels: impl Iterator<Item = &'static str>) -> Self {
        let labels: Vec<&str> = labels.collect();
        let p = softmax(logits);
        let best = interact3d_core::datamodel::argmax(&p);
        Self {
            label: labels[best].to_string(),
            probabilities: labels.iter().map(|l| l.to_string()).zip(p).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisOutput {
    pub theta: f64,
    pub r: f64,
}

/// Heatmap quantized to 8 bits as row-major `[value, run]` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffordanceOutput {
    pub width: usize,
    pub height: usize,
    pub runs: Vec<[u32; 2]>,
    pub peak: QueryPoint,
}

impl AffordanceOutput {
    pub fn from_logits(logits: &Grid<f64>) -> Self {
        let prob = affordance_probability(logits);
        let (w, h) = (prob.width(), prob.height());
        let mut runs: Vec<[u32; 2]> = Vec::new();
        for &p in prob.as_slice() {
            let q = (p * 255.0).round().clamp(0.0, 255.0) as u32;
            match runs.last_mut() {
                Some(last) if last[0] == q => last[1] += 1,
                _ => runs.push([q, 1]),
            }
        }
        let best = interact3d_core::datamodel::argmax(prob.as_slice());
        let peak = QueryPoint::new(((best % w) as f64 + 0.5) / w as f64, ((best / w) as f64 + 0.5) / h as f64);
        Self { width: w, height: h, runs, peak }
    }

    /// Expands the runs back to probabilities in `[0, 1]`.
    pub fn decode(&self) -> Option<Grid<f64>> {
        let data: Vec<f64> =
            self.runs.iter().flat_map(|&[v, n]| std::iter::repeat_n(v as f64 / 255.0, n as usize)).collect();
        Grid::from_vec(self.width, self.height, data)
    }
}

/// Depth map quantized to 8 bits between `min` and `max`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthOutput {
    pub width: usize,
    pub height: usize,
    pub min: f64,
    pub max: f64,
    pub data: Vec<u8>,
}

impl DepthOutput {
    pub fn from_grid(depth: &Grid<f64>) -> Self {
        let v = depth.as_slice();
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = (max - min).max(1e-12);
        let data = v.iter().map(|&d| ((d - min) / span * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        Self { width: depth.width(), height: depth.height(), min, max, data }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointPrediction {
    pub point: QueryPoint,
    pub movable: ClassOutput,
    pub rigidity: ClassOutput,
    pub articulation: ClassOutput,
    pub action: ClassOutput,
    #[serde(rename = "box")]
    pub bbox: BoxXYXY,
    /// Present only when the predicted articulation is a rotation.
    pub axis: Option<AxisOutput>,
    /// Binary mask at image resolution.
    pub mask: Mask,
    pub affordance: AffordanceOutput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub width: usize,
    pub height: usize,
    pub checkpoint_id: String,
    pub predictions: Vec<PointPrediction>,
    pub depth: Option<DepthOutput>,
}

fn point_prediction(point: QueryPoint, q: &InteractionPrediction, width: usize, height: usize) -> PointPrediction {
    let articulation = ClassOutput::new(&q.articulation_logits, ArticulationClass::ALL.iter().map(|c| c.label()));
    let axis = (q.articulation() == ArticulationClass::Rotation)
        .then(|| q.axis_enc.decode().ok())
        .flatten()
        .map(|l| AxisOutput { theta: l.theta, r: l.r });
    PointPrediction {
        point,
        movable: ClassOutput::new(&q.movable_logits, MovableClass::ALL.iter().map(|c| c.label())),
        rigidity: ClassOutput::new(&q.rigidity_logits, RigidityClass::ALL.iter().map(|c| c.label())),
        articulation,
        action: ClassOutput::new(&q.action_logits, ActionClass::ALL.iter().map(|c| c.label())),
        bbox: q.bbox.clamped(),
        axis,
        mask: Mask::encode(&binarize_mask(&q.mask_logits, width, height)),
        affordance: AffordanceOutput::from_logits(&q.affordance_logits),
    }
}

pub fn build_response(
    pred: &ImagePrediction,
    points: &[QueryPoint],
    width: usize,
    height: usize,
    checkpoint_id: &str,
    include_depth: bool,
) -> PredictResponse {
    PredictResponse {
        width,
        height,
        checkpoint_id: checkpoint_id.to_string(),
        predictions: points.iter().zip(&pred.queries).map(|(&p, q)| point_prediction(p, q, width, height)).collect(),
        depth: include_depth.then(|| DepthOutput::from_grid(&pred.depth)),
    }
}

/// Validates the point list of a request.
pub fn check_points(points: &[QueryPoint]) -> Result<()> {
    if points.is_empty() {
        return Err(PredictError::BadRequest("at least one point is required".into()));
    }
    if points.len() > MAX_QUERIES {
        return Err(PredictError::TooManyPoints { got: points.len(), limit: MAX_QUERIES });
    }
    for (i, p) in points.iter().enumerate() {
        p.validate(&format!("points[{i}]")).map_err(|e| PredictError::BadRequest(e.to_string()))?;
    }
    Ok(())
}

/// Runs the network and assembles the response.
pub fn predict(net: &Network, image: &RgbGrid, points: &[QueryPoint], checkpoint_id: &str, include_depth: bool) -> Result<PredictResponse> {
    check_points(points)?;
    let pred = net.predict(image, points)?;
    Ok(build_response(&pred, points, image.width(), image.height(), checkpoint_id, include_depth))
}

/// Depth the animation runs on, at image resolution.
pub enum DepthSource {
    /// Metric depth, e.g. from a sensor or a stored `.npy`.
    Metric(Grid<f64>),
    /// The network's affine-ambiguous depth, mapped to a plausible room scale.
    Predicted,
}

/// Median placed at this distance when animating with predicted depth.
pub const PREDICTED_MEDIAN_DEPTH: f64 = 3.0;
/// Mean absolute deviation from the median for predicted depth.
pub const PREDICTED_DEPTH_SPREAD: f64 = 0.5;

/// Maps an affine-ambiguous depth map to positive depths with a fixed
/// median and spread.
pub fn anchor_depth(depth: &Grid<f64>) -> Grid<f64> {
    let mut v: Vec<f64> = depth.as_slice().to_vec();
    v.sort_by(f64::total_cmp);
    let med = v[v.len() / 2];
    let mad = depth.as_slice().iter().map(|d| (d - med).abs()).sum::<f64>() / v.len() as f64;
    let scale = if mad > 1e-12 { PREDICTED_DEPTH_SPREAD / mad } else { 0.0 };
    depth.map(|d| (PREDICTED_MEDIAN_DEPTH + (d - med) * scale).max(0.1))
}

/// Upper bound on frames per clip.
pub const MAX_FRAMES: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderParams {
    /// Frames of the default sweep from rest to the final pose.
    pub frames: usize,
    /// Final angle in degrees for rotations.
    pub max_angle_deg: f64,
    /// Final offset in depth units for translations.
    pub max_offset: f64,
    /// Explicit rotation angles in degrees, replacing the sweep.
    pub angles_deg: Option<Vec<f64>>,
    /// Explicit translation offsets, replacing the sweep.
    pub offsets: Option<Vec<f64>>,
    /// Motion to render instead of the predicted articulation.
    pub kind: Option<MotionKind>,
}

impl Default for RenderParams {
    fn default() -> Self {
        Self { frames: 5, max_angle_deg: 45.0, max_offset: 0.3, angles_deg: None, offsets: None, kind: None }
    }
}

impl RenderParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PredictError::BadRequest(m));
        if self.frames == 0 || self.frames > MAX_FRAMES {
            return bad(format!("frames must be between 1 and {MAX_FRAMES}"));
        }
        if !self.max_angle_deg.is_finite() || !self.max_offset.is_finite() {
            return bad("sweep limits must be finite".into());
        }
        for (name, list) in [("angles_deg", &self.angles_deg), ("offsets", &self.offsets)] {
            if let Some(v) = list {
                if v.is_empty() || v.len() > MAX_FRAMES {
                    return bad(format!("{name} must hold 1 to {MAX_FRAMES} values"));
                }
                if v.iter().any(|a| !a.is_finite()) {
                    return bad(format!("{name} must be finite"));
                }
            }
        }
        Ok(())
    }

    fn angles(&self) -> Vec<f64> {
        match &self.angles_deg {
            Some(v) => v.iter().map(|a| a.to_radians()).collect(),
            None => sweep(self.max_angle_deg.to_radians(), self.frames),
        }
    }

    fn offsets(&self) -> Vec<f64> {
        self.offsets.clone().unwrap_or_else(|| sweep(self.max_offset, self.frames))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub index: usize,
    pub file: String,
    /// Source-to-frame homography in pixel coordinates, row-major.
    pub homography: [[f64; 3]; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderManifest {
    pub point: QueryPoint,
    pub kind: MotionKind,
    /// Radians for rotations, depth units for translations.
    pub amounts: Vec<f64>,
    pub axis_origin: [f64; 3],
    pub axis_direction: [f64; 3],
    pub depth_source: String,
    pub frames: Vec<FrameEntry>,
    pub prediction: PointPrediction,
}

/// A rendered clip with composited RGB frames.
pub struct RenderedClip {
    pub manifest: RenderManifest,
    pub clip: ArticulationClip,
    pub frames: Vec<RgbGrid>,
}

fn vec3(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

/// Renderer failures caused by the prediction itself (an axis off the image,
/// an empty mask) rather than by a bug.
fn unusable(e: interact3d_core::Error) -> PredictError {
    use interact3d_core::Error as E;
    match e {
        E::Precondition(m) | E::Degenerate(m) | E::NoModel(m) => {
            PredictError::Unsupported(format!("cannot animate this prediction: {m}"))
        }
        other => PredictError::Core(other),
    }
}

/// Predicts at `point` and animates the part it hits. Fails for parts that
/// are not predicted to rotate or translate.
pub fn render_interaction(
    net: &Network,
    image: &RgbGrid,
    point: QueryPoint,
    depth: DepthSource,
    params: &RenderParams,
    frame_name: impl Fn(usize) -> String,
) -> Result<RenderedClip> {
    params.validate()?;
    check_points(&[point])?;
    let (w, h) = (image.width(), image.height());
    let pred = net.predict(image, &[point])?;
    let q = &pred.queries[0];
    let response = point_prediction(point, q, w, h);
    let (depth, source) = match depth {
        DepthSource::Metric(d) => {
            if (d.width(), d.height()) != (w, h) {
                return Err(PredictError::BadRequest(format!(
                    "depth is {}x{}, image is {w}x{h}",
                    d.width(),
                    d.height()
                )));
            }
            (d, "metric")
        }
        DepthSource::Predicted => (anchor_depth(&pred.depth.resize_bilinear(w, h)), "predicted"),
    };
    let mask = binarize_mask(&q.mask_logits, w, h);
    let cam = CameraModel::default_for(w, h);
    let kind = match (params.kind, q.articulation()) {
        (Some(k), _) => k,
        (None, ArticulationClass::Rotation) => MotionKind::Rotation,
        (None, ArticulationClass::Translation) => MotionKind::Translation,
        (None, ArticulationClass::Freeform) => {
            return Err(PredictError::Unsupported("only rotating or translating parts can be animated".into()))
        }
    };
    let clip = match kind {
        MotionKind::Rotation => {
            render_rotation(image, &mask, &q.axis_enc.decode()?, &depth, &cam, &params.angles()).map_err(unusable)?
        }
        MotionKind::Translation => render_translation(image, &mask, &depth, &cam, &params.offsets()).map_err(unusable)?,
    };
    let frames: Vec<RgbGrid> = clip.frames.iter().map(|f| composite(image, f)).collect();
    let manifest = RenderManifest {
        point,
        kind: clip.kind,
        amounts: clip.amounts.clone(),
        axis_origin: vec3(&clip.axis.origin),
        axis_direction: vec3(&clip.axis.direction),
        depth_source: source.to_string(),
        frames: clip
            .frames
            .iter()
            .enumerate()
            .map(|(i, f)| FrameEntry { index: i, file: frame_name(i), homography: f.homography.rows() })
            .collect(),
        prediction: response,
    };
    Ok(RenderedClip { manifest, clip, frames })
}

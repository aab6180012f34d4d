//! Annotation and prediction schema shared by every other module.
//!
//! Coordinates are normalized image fractions in `[0, 1]` with the origin at
//! the top-left corner. Masks are stored at image resolution as COCO-style
//! uncompressed run-length encodings (column-major, first run counts zeros).

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AxisEncoding, Line2D, DEFAULT_BUMP_RADIUS_PX};
use crate::grid::Grid;

/// Point-query budget per image.
pub const MAX_QUERIES: usize = 15;

macro_rules! class_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $label:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];
            pub const COUNT: usize = Self::ALL.len();

            #[inline]
            pub fn index(self) -> usize {
                self as usize
            }

            pub fn from_index(i: usize) -> Option<Self> {
                Self::ALL.get(i).copied()
            }

            pub fn label(self) -> &'static str {
                match self {
                    $($name::$variant => $label),+
                }
            }
        }
    };
}

class_enum! {
    /// How easily the object at a query point can be moved.
    MovableClass { Fixture => "fixture", OneHand => "one_hand", TwoHands => "two_hands" }
}
class_enum! {
    RigidityClass { Rigid => "rigid", Nonrigid => "nonrigid" }
}
class_enum! {
    ArticulationClass { Rotation => "rotation", Translation => "translation", Freeform => "freeform" }
}
class_enum! {
    ActionClass { Pull => "pull", Push => "push", Other => "other" }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryPoint {
    pub x: f64,
    pub y: f64,
}

impl QueryPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        for (name, v) in [("x", self.x), ("y", self.y)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::range(format!("{path}.{name}"), format!("{v} is outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Pixel-center coordinates of the cell containing this point.
    pub fn to_pixel(&self, width: usize, height: usize) -> (usize, usize) {
        let c = ((self.x * width as f64) as usize).min(width - 1);
        let r = ((self.y * height as f64) as usize).min(height - 1);
        (c, r)
    }
}

/// Axis-aligned box as normalized corner coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxXYXY {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxXYXY {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_cxcywh(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn clamped(&self) -> Self {
        Self::new(
            self.x1.clamp(0.0, 1.0),
            self.y1.clamp(0.0, 1.0),
            self.x2.clamp(0.0, 1.0),
            self.y2.clamp(0.0, 1.0),
        )
    }

    /// Tight normalized box around the set cells of `mask`.
    pub fn from_mask(mask: &Grid<bool>) -> Option<Self> {
        let (c0, r0, c1, r1) = mask.bounds()?;
        let (w, h) = (mask.width() as f64, mask.height() as f64);
        Some(Self::new(c0 as f64 / w, r0 as f64 / h, (c1 + 1) as f64 / w, (r1 + 1) as f64 / h))
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        let a = self.as_array();
        if let Some(v) = a.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::range(path, format!("coordinate {v} is outside [0, 1]")));
        }
        if !(self.x1 < self.x2 && self.y1 < self.y2) {
            return Err(Error::schema(path, "box must satisfy x1 < x2 and y1 < y2"));
        }
        Ok(())
    }
}

/// Binary mask stored as COCO-style uncompressed RLE.
///
/// `data` holds alternating run lengths over the column-major pixel order,
/// starting with a run of zeros (possibly empty). Only the first run may be
/// zero-length, which makes the encoding canonical.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u32>,
}

impl Mask {
    pub fn encode(grid: &Grid<bool>) -> Self {
        let (w, h) = (grid.width(), grid.height());
        let mut data = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for c in 0..w {
            for r in 0..h {
                let v = *grid.get(c, r);
                if v != current {
                    data.push(run);
                    run = 0;
                    current = v;
                }
                run += 1;
            }
        }
        data.push(run);
        Self { width: w, height: h, data }
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![(width * height) as u32] }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::schema(path, "mask dimensions must be positive"));
        }
        if self.data.is_empty() {
            return Err(Error::schema(format!("{path}.data"), "run list is empty"));
        }
        if let Some(i) = self.data.iter().skip(1).position(|&r| r == 0) {
            return Err(Error::schema(format!("{path}.data[{}]", i + 1), "zero-length run"));
        }
        let total: u64 = self.data.iter().map(|&r| r as u64).sum();
        if total != (self.width * self.height) as u64 {
            return Err(Error::schema(
                format!("{path}.data"),
                format!("runs cover {total} cells, expected {}", self.width * self.height),
            ));
        }
        Ok(())
    }

    pub fn decode(&self) -> Result<Grid<bool>> {
        self.validate("mask")?;
        let mut grid = Grid::filled(self.width, self.height, false);
        let mut k = 0usize;
        for (i, &run) in self.data.iter().enumerate() {
            let on = i % 2 == 1;
            for _ in 0..run {
                if on {
                    grid.set(k / self.height, k % self.height, true);
                }
                k += 1;
            }
        }
        Ok(grid)
    }

    /// Number of set pixels.
    pub fn area(&self) -> usize {
        self.data.iter().skip(1).step_by(2).map(|&r| r as usize).sum()
    }
}

/// Where to act on the object, as a keypoint turned into a Gaussian target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffordanceTarget {
    pub keypoint: Option<QueryPoint>,
    #[serde(default = "default_radius")]
    pub radius_px: u32,
}

fn default_radius() -> u32 {
    DEFAULT_BUMP_RADIUS_PX
}

impl AffordanceTarget {
    pub fn at(keypoint: QueryPoint) -> Self {
        Self { keypoint: Some(keypoint), radius_px: DEFAULT_BUMP_RADIUS_PX }
    }
}

/// Ground truth for one query point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryAnnotation {
    pub point: QueryPoint,
    pub movable: MovableClass,
    pub rigidity: Option<RigidityClass>,
    pub articulation: Option<ArticulationClass>,
    pub action: Option<ActionClass>,
    #[serde(rename = "box")]
    pub bbox: Option<BoxXYXY>,
    pub mask: Option<Mask>,
    pub axis: Option<Line2D>,
    pub affordance: Option<AffordanceTarget>,
}

impl QueryAnnotation {
    pub fn fixture(point: QueryPoint) -> Self {
        Self {
            point,
            movable: MovableClass::Fixture,
            rigidity: None,
            articulation: None,
            action: None,
            bbox: None,
            mask: None,
            axis: None,
            affordance: None,
        }
    }

    /// Checks every annotation invariant; masks must be `width x height`.
    pub fn validate(&self, path: &str, width: usize, height: usize) -> Result<()> {
        self.point.validate(&format!("{path}.point"))?;
        if self.movable == MovableClass::Fixture {
            let filled = [
                ("rigidity", self.rigidity.is_some()),
                ("articulation", self.articulation.is_some()),
                ("action", self.action.is_some()),
                ("box", self.bbox.is_some()),
                ("mask", self.mask.is_some()),
                ("axis", self.axis.is_some()),
                ("affordance", self.affordance.is_some()),
            ];
            if let Some((name, _)) = filled.iter().find(|(_, set)| *set) {
                return Err(Error::schema(format!("{path}.{name}"), "fixtures carry no further annotations"));
            }
        }
        if self.axis.is_some() != (self.articulation == Some(ArticulationClass::Rotation)) {
            return Err(Error::schema(
                format!("{path}.axis"),
                "an axis is present exactly when articulation is rotation",
            ));
        }
        if self.rigidity == Some(RigidityClass::Nonrigid) && self.articulation.is_some() {
            return Err(Error::schema(format!("{path}.articulation"), "nonrigid objects have no articulation"));
        }
        if let Some(b) = &self.bbox {
            b.validate(&format!("{path}.box"))?;
        }
        if let Some(m) = &self.mask {
            let p = format!("{path}.mask");
            m.validate(&p)?;
            if (m.width, m.height) != (width, height) {
                return Err(Error::schema(
                    p,
                    format!("mask is {}x{}, image is {width}x{height}", m.width, m.height),
                ));
            }
        }
        if let Some(axis) = &self.axis {
            if !axis.is_valid() || axis.r.abs() > core::f64::consts::SQRT_2 + 1e-12 {
                return Err(Error::range(format!("{path}.axis"), "theta must lie in [0, pi) and |r| <= sqrt(2)"));
            }
        }
        if let Some(a) = &self.affordance {
            if a.radius_px < 1 {
                return Err(Error::range(format!("{path}.affordance.radius_px"), "radius must be >= 1"));
            }
            if let Some(k) = &a.keypoint {
                k.validate(&format!("{path}.affordance.keypoint"))?;
            }
        }
        Ok(())
    }
}

pub type RgbGrid = Grid<[u8; 3]>;

/// One image with its query annotations; the unit of dataset storage.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub image_id: String,
    pub image: RgbGrid,
    /// Positive depth in arbitrary per-image units.
    pub depth: Option<Grid<f32>>,
    pub normals: Option<Grid<[f32; 3]>>,
    pub queries: Vec<QueryAnnotation>,
    pub source: String,
}

impl SceneSample {
    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_id.is_empty() {
            return Err(Error::schema("image_id", "must not be empty"));
        }
        let (w, h) = (self.width(), self.height());
        if w == 0 || h == 0 {
            return Err(Error::schema("image", "image has no pixels"));
        }
        if self.queries.is_empty() {
            return Err(Error::schema("queries", "at least one query is required"));
        }
        if self.queries.len() > MAX_QUERIES {
            return Err(Error::TooManyQueries { got: self.queries.len(), limit: MAX_QUERIES });
        }
        if let Some(d) = &self.depth {
            if !d.same_shape(&self.image) {
                return Err(Error::schema("depth", "depth resolution differs from image"));
            }
            if let Some(i) = d.as_slice().iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(Error::range(format!("depth[{i}]"), "depth must be positive and finite"));
            }
        }
        if let Some(n) = &self.normals {
            if !n.same_shape(&self.image) {
                return Err(Error::schema("normals", "normal map resolution differs from image"));
            }
        }
        for (i, q) in self.queries.iter().enumerate() {
            q.validate(&format!("queries[{i}]"), w, h)?;
        }
        Ok(())
    }

    pub fn record(&self) -> SampleRecord {
        SampleRecord {
            image_id: self.image_id.clone(),
            image: format!("{}.png", self.image_id),
            width: self.width(),
            height: self.height(),
            depth: self.depth.as_ref().map(|_| format!("{}_depth.npy", self.image_id)),
            normals: self.normals.as_ref().map(|_| format!("{}_normals.npy", self.image_id)),
            queries: self.queries.clone(),
            source: self.source.clone(),
        }
    }
}

/// JSON half of a stored [`SceneSample`]: grids are referenced by sidecar
/// file name relative to the JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image_id: String,
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub depth: Option<String>,
    pub normals: Option<String>,
    pub queries: Vec<QueryAnnotation>,
    pub source: String,
}

impl SampleRecord {
    /// Reassembles and validates a sample from its loaded sidecar grids.
    pub fn into_sample(
        self,
        image: RgbGrid,
        depth: Option<Grid<f32>>,
        normals: Option<Grid<[f32; 3]>>,
    ) -> Result<SceneSample> {
        if (image.width(), image.height()) != (self.width, self.height) {
            return Err(Error::schema(
                "image",
                format!("image file is {}x{}, record says {}x{}", image.width(), image.height(), self.width, self.height),
            ));
        }
        let sample = SceneSample {
            image_id: self.image_id,
            image,
            depth,
            normals,
            queries: self.queries,
            source: self.source,
        };
        sample.validate()?;
        Ok(sample)
    }
}

/// The model's answer for one point query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionPrediction {
    pub movable_logits: [f64; 3],
    pub rigidity_logits: [f64; 2],
    pub articulation_logits: [f64; 3],
    pub action_logits: [f64; 3],
    #[serde(rename = "box")]
    pub bbox: BoxXYXY,
    pub axis_enc: AxisEncoding,
    pub mask_logits: Grid<f64>,
    pub affordance_logits: Grid<f64>,
}

impl InteractionPrediction {
    pub fn movable(&self) -> MovableClass {
        MovableClass::ALL[argmax(&self.movable_logits)]
    }

    pub fn rigidity(&self) -> RigidityClass {
        RigidityClass::ALL[argmax(&self.rigidity_logits)]
    }

    pub fn articulation(&self) -> ArticulationClass {
        ArticulationClass::ALL[argmax(&self.articulation_logits)]
    }

    pub fn action(&self) -> ActionClass {
        ActionClass::ALL[argmax(&self.action_logits)]
    }
}

/// Everything the model predicts for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePrediction {
    pub queries: Vec<InteractionPrediction>,
    /// Depth up to an unknown positive scale and shift.
    pub depth: Grid<f64>,
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Pads point queries to exactly [`MAX_QUERIES`] slots. Padded slots are
/// flagged `false` and must be excluded from every loss.
pub fn pad_queries(points: &[QueryPoint]) -> Result<(Vec<QueryPoint>, Vec<bool>)> {
    if points.len() > MAX_QUERIES {
        return Err(Error::TooManyQueries { got: points.len(), limit: MAX_QUERIES });
    }
    let mut padded = points.to_vec();
    let mut valid = vec![true; points.len()];
    padded.resize(MAX_QUERIES, QueryPoint::new(0.5, 0.5));
    valid.resize(MAX_QUERIES, false);
    Ok((padded, valid))
}

impl core::fmt::Display for MovableClass {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.label())
    }
}

impl core::str::FromStr for MovableClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.label() == s)
            .ok_or_else(|| Error::schema("movable", s.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn door_query(w: usize, h: usize) -> QueryAnnotation {
        let grid = Grid::from_fn(w, h, |c, r| (2..6).contains(&c) && (1..7).contains(&r));
        QueryAnnotation {
            point: QueryPoint::new(0.4, 0.5),
            movable: MovableClass::OneHand,
            rigidity: Some(RigidityClass::Rigid),
            articulation: Some(ArticulationClass::Rotation),
            action: Some(ActionClass::Pull),
            bbox: BoxXYXY::from_mask(&grid),
            mask: Some(Mask::encode(&grid)),
            axis: Some(Line2D::new(0.0, 0.25)),
            affordance: Some(AffordanceTarget::at(QueryPoint::new(0.6, 0.5))),
        }
    }

    #[test]
    fn valid_door_passes() {
        door_query(8, 8).validate("q", 8, 8).unwrap();
    }

    #[test]
    fn fixture_with_box_is_rejected() {
        let mut q = QueryAnnotation::fixture(QueryPoint::new(0.1, 0.1));
        q.bbox = Some(BoxXYXY::new(0.0, 0.0, 0.5, 0.5));
        let err = q.validate("queries[0]", 8, 8).unwrap_err();
        assert!(matches!(err, Error::Schema { ref path, .. } if path == "queries[0].box"));
    }

    #[test]
    fn axis_requires_rotation() {
        let mut q = door_query(8, 8);
        q.articulation = Some(ArticulationClass::Translation);
        let err = q.validate("q", 8, 8).unwrap_err();
        assert!(matches!(err, Error::Schema { ref path, .. } if path == "q.axis"));
    }

    #[test]
    fn nonrigid_has_no_articulation() {
        let mut q = door_query(8, 8);
        q.rigidity = Some(RigidityClass::Nonrigid);
        q.axis = None;
        q.articulation = Some(ArticulationClass::Freeform);
        assert!(q.validate("q", 8, 8).is_err());
    }

    #[test]
    fn out_of_range_point() {
        let q = QueryAnnotation::fixture(QueryPoint::new(1.2, 0.5));
        let err = q.validate("queries[3]", 8, 8).unwrap_err();
        assert!(matches!(err, Error::Range { ref path, .. } if path == "queries[3].point.x"));
    }

    #[test]
    fn rle_known_encoding() {
        // Column-major: column 0 = [0, 1], column 1 = [1, 1].
        let g = Grid::from_vec(2, 2, alloc::vec![false, true, true, true]).unwrap();
        let m = Mask::encode(&g);
        assert_eq!(m.data, alloc::vec![1, 3]);
        assert_eq!(m.area(), 3);
        assert_eq!(m.decode().unwrap(), g);
        let full = Mask::encode(&Grid::filled(3, 2, true));
        assert_eq!(full.data, alloc::vec![0, 6]);
    }

    #[test]
    fn non_canonical_rle_rejected() {
        let m = Mask { width: 2, height: 2, data: alloc::vec![1, 0, 3] };
        assert!(m.validate("m").is_err());
        let m = Mask { width: 2, height: 2, data: alloc::vec![1, 2] };
        assert!(m.validate("m").is_err());
    }

    #[test]
    fn padding() {
        let pts: Vec<_> = (0..4).map(|i| QueryPoint::new(0.1 * i as f64, 0.2)).collect();
        let (p, v) = pad_queries(&pts).unwrap();
        assert_eq!(p.len(), MAX_QUERIES);
        assert_eq!(&p[..4], &pts[..]);
        assert_eq!(v.iter().filter(|&&b| b).count(), 4);
        assert!(v[..4].iter().all(|&b| b));

        let (_, v) = pad_queries(&[]).unwrap();
        assert!(v.iter().all(|&b| !b));

        let full: Vec<_> = (0..15).map(|i| QueryPoint::new(i as f64 / 15.0, 0.5)).collect();
        let (p, v) = pad_queries(&full).unwrap();
        assert_eq!(p, full);
        assert!(v.iter().all(|&b| b));

        let too_many = alloc::vec![QueryPoint::new(0.5, 0.5); 16];
        assert!(matches!(pad_queries(&too_many), Err(Error::TooManyQueries { got: 16, .. })));
    }

    #[test]
    fn class_labels_round_trip() {
        for c in MovableClass::ALL {
            assert_eq!(c.label().parse::<MovableClass>().unwrap(), *c);
            assert_eq!(MovableClass::from_index(c.index()), Some(*c));
        }
    }
}

//! Deterministic synthetic scenes with exact annotations.
//!
//! A pinhole camera, pitched down, faces a wall standing on a floor. Doors and
//! drawers are flush panels on the wall, rigid cuboids and soft ellipsoidal
//! blobs rest on the floor. Every pixel is ray cast through its center, so
//! masks, depth and normals are exact, and any door angle or drawer offset can
//! be re-rendered for comparison with predicted motion.
//!
//! Scene coordinates are the camera frame (x right, y down, z forward).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)] // std, when linked, provides these inherently
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    ActionClass, AffordanceTarget, ArticulationClass, BoxXYXY, Mask, MovableClass, QueryAnnotation,
    QueryPoint, RigidityClass, SceneSample, MAX_QUERIES,
};
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, Line2D, Line3D, Vec3};
use crate::grid::Grid;

pub const DEFAULT_WIDTH: usize = 256;
pub const DEFAULT_HEIGHT: usize = 192;
pub const MAX_ATTEMPTS: usize = 100;
pub const SOURCE: &str = "synthgen";

const MIN_VISIBLE_PX: usize = 60;
const MAX_BOX_IOU: f64 = 0.2;
const BORDER_M: f64 = 0.02;
const MARGIN_PX: f64 = 3.0;

pub const LABEL_WALL: u16 = 0;
pub const LABEL_FLOOR: u16 = 1;

/// Surface label of object `k`.
pub const fn object_label(k: usize) -> u16 {
    2 + k as u16
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Door,
    Drawer,
    Rigid,
    Blob,
}

impl ObjectKind {
    pub const ALL: [ObjectKind; 4] = [ObjectKind::Door, ObjectKind::Drawer, ObjectKind::Rigid, ObjectKind::Blob];
}

/// Wall and floor placement relative to the camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Room {
    /// Downward camera tilt, radians.
    pub pitch: f64,
    /// Wall rotation about the vertical, radians.
    pub wall_yaw: f64,
    /// Horizontal distance from the camera to the wall plane.
    pub wall_distance: f64,
    pub camera_height: f64,
    pub wall_albedo: [f64; 3],
    pub floor_albedo: [[f64; 3]; 2],
}

impl Room {
    /// Unit vector pointing down in the world.
    pub fn down(&self) -> Vec3 {
        Vec3::new(0.0, self.pitch.cos(), self.pitch.sin())
    }

    fn forward(&self) -> Vec3 {
        Vec3::new(0.0, -self.pitch.sin(), self.pitch.cos())
    }

    /// Wall normal pointing away from the camera.
    pub fn wall_normal(&self) -> Vec3 {
        Vec3::x() * self.wall_yaw.sin() + self.forward() * self.wall_yaw.cos()
    }

    /// Horizontal in-wall direction, left to right as seen from the camera.
    pub fn wall_across(&self) -> Vec3 {
        Vec3::x() * self.wall_yaw.cos() - self.forward() * self.wall_yaw.sin()
    }

    /// Point on the wall at `a` metres across and `b` metres below eye level.
    pub fn wall_point(&self, a: f64, b: f64) -> Vec3 {
        self.wall_normal() * self.wall_distance + self.wall_across() * a + self.down() * b
    }

    fn wall_coords(&self, p: &Vec3) -> (f64, f64) {
        (p.dot(&self.wall_across()), p.dot(&self.down()))
    }

    /// Point on the floor at wall coordinate `a` and `dist` in front of it.
    pub fn floor_point(&self, a: f64, dist: f64) -> Vec3 {
        self.wall_point(a, self.camera_height) - self.wall_normal() * dist
    }
}

/// Rectangle in wall coordinates: `a` across, `b` down from eye level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WallRect {
    pub a0: f64,
    pub a1: f64,
    pub b0: f64,
    pub b1: f64,
}

impl WallRect {
    fn contains(&self, a: f64, b: f64) -> bool {
        a >= self.a0 && a <= self.a1 && b >= self.b0 && b <= self.b1
    }

    fn overlaps(&self, o: &WallRect, gap: f64) -> bool {
        self.a0 < o.a1 + gap && o.a0 < self.a1 + gap && self.b0 < o.b1 + gap && o.b0 < self.b1 + gap
    }

    fn center(&self) -> (f64, f64) {
        (0.5 * (self.a0 + self.a1), 0.5 * (self.b0 + self.b1))
    }
}

/// Flat part on the wall with a handle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    pub rect: WallRect,
    pub handle: WallRect,
    pub albedo: [f64; 3],
}

/// Floor object frame: base center on the floor, yaw against the wall.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Solid {
    pub base: [f64; 3],
    pub yaw: f64,
    /// Half extents across, in depth, and half the height.
    pub half: [f64; 3],
    pub albedo: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectSpec {
    Door { panel: Panel, hinge_left: bool },
    Drawer { panel: Panel },
    Rigid { solid: Solid, two_hands: bool },
    Blob { solid: Solid },
}

impl ObjectSpec {
    pub fn kind(&self) -> ObjectKind {
        match self {
            ObjectSpec::Door { .. } => ObjectKind::Door,
            ObjectSpec::Drawer { .. } => ObjectKind::Drawer,
            ObjectSpec::Rigid { .. } => ObjectKind::Rigid,
            ObjectSpec::Blob { .. } => ObjectKind::Blob,
        }
    }

    fn panel(&self) -> Option<&Panel> {
        match self {
            ObjectSpec::Door { panel, .. } | ObjectSpec::Drawer { panel } => Some(panel),
            _ => None,
        }
    }

    fn solid(&self) -> Option<&Solid> {
        match self {
            ObjectSpec::Rigid { solid, .. } | ObjectSpec::Blob { solid } => Some(solid),
            _ => None,
        }
    }
}

/// Everything needed to render one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_id: String,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub camera: CameraModel,
    pub room: Room,
    pub objects: Vec<ObjectSpec>,
    /// Number of wall or floor query points.
    pub fixtures: usize,
}

/// Articulation state for re-rendering: object index and door angle
/// (radians, opening toward the camera) or drawer offset (metres).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Motion {
    pub object: usize,
    pub amount: f64,
}

/// Per-pixel render output.
#[derive(Debug, Clone, PartialEq)]
pub struct Render {
    pub image: Grid<[u8; 3]>,
    /// Camera-frame z of the visible surface.
    pub depth: Grid<f64>,
    /// Unit normals facing the camera.
    pub normals: Grid<Vec3>,
    /// [`LABEL_WALL`], [`LABEL_FLOOR`] or [`object_label`].
    pub labels: Grid<u16>,
}

impl Render {
    pub fn object_mask(&self, k: usize) -> Grid<bool> {
        let l = object_label(k);
        self.labels.map(|&v| v == l)
    }
}

/// Hidden truth about one object of a generated image.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTruth {
    pub kind: ObjectKind,
    /// Index of the object's query in the sample.
    pub query: usize,
    /// Door hinge, oriented so a positive rotation opens toward the camera.
    pub hinge: Option<Line3D>,
    /// Drawer pull direction (unit, toward the camera).
    pub pull: Option<Vec3>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSample {
    pub sample: SceneSample,
    pub spec: SceneSpec,
    pub objects: Vec<ObjectTruth>,
    pub depth: Grid<f64>,
    pub normals: Grid<Vec3>,
    pub labels: Grid<u16>,
}

struct Hit {
    t: f64,
    label: u16,
    normal: Vec3,
    color: [f64; 3],
}

const HANDLE_ALBEDO: [f64; 3] = [0.12, 0.12, 0.14];
const CAVITY_ALBEDO: [f64; 3] = [0.08, 0.06, 0.05];

fn light() -> Vec3 {
    Vec3::new(0.35, -0.8, -0.5).normalize()
}

fn shade(albedo: [f64; 3], normal: &Vec3) -> [f64; 3] {
    let s = 0.35 + 0.65 * normal.dot(&light()).max(0.0);
    [albedo[0] * s, albedo[1] * s, albedo[2] * s]
}

fn panel_albedo(panel: &Panel, a: f64, b: f64) -> [f64; 3] {
    let r = &panel.rect;
    if panel.handle.contains(a, b) {
        return HANDLE_ALBEDO;
    }
    let edge = (a - r.a0).min(r.a1 - a).min(b - r.b0).min(r.b1 - b);
    let k = if edge < BORDER_M { 0.6 } else { 1.0 };
    [panel.albedo[0] * k, panel.albedo[1] * k, panel.albedo[2] * k]
}

/// Solid axes: across, depth (away from the camera) and down.
fn solid_axes(room: &Room, s: &Solid) -> [Vec3; 3] {
    let (u, m) = (room.wall_across(), room.wall_normal());
    let (sn, cs) = s.yaw.sin_cos();
    [u * cs + m * sn, m * cs - u * sn, room.down()]
}

fn solid_center(room: &Room, s: &Solid) -> Vec3 {
    Vec3::from(s.base) - room.down() * s.half[2]
}

/// Nearest positive hit of `ray` (from the origin) on a cuboid.
fn hit_cuboid(ray: &Vec3, center: &Vec3, axes: &[Vec3; 3], half: &[f64; 3]) -> Option<(f64, Vec3)> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut normal = Vec3::zeros();
    for k in 0..3 {
        let o = -center.dot(&axes[k]);
        let d = ray.dot(&axes[k]);
        if d.abs() < 1e-15 {
            if o.abs() > half[k] {
                return None;
            }
            continue;
        }
        let (mut a, mut b) = ((-half[k] - o) / d, (half[k] - o) / d);
        let mut n = -axes[k];
        if a > b {
            core::mem::swap(&mut a, &mut b);
            n = axes[k];
        }
        if a > t0 {
            t0 = a;
            normal = n;
        }
        t1 = t1.min(b);
    }
    (t0 <= t1 && t0 > 0.0).then_some((t0, normal))
}

/// Nearest positive hit of `ray` on an ellipsoid.
fn hit_ellipsoid(ray: &Vec3, center: &Vec3, axes: &[Vec3; 3], radii: &[f64; 3]) -> Option<(f64, Vec3)> {
    let mut o = [0.0; 3];
    let mut d = [0.0; 3];
    for k in 0..3 {
        o[k] = -center.dot(&axes[k]) / radii[k];
        d[k] = ray.dot(&axes[k]) / radii[k];
    }
    let qa: f64 = d.iter().map(|v| v * v).sum();
    let qb: f64 = 2.0 * o.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>();
    let qc: f64 = o.iter().map(|v| v * v).sum::<f64>() - 1.0;
    let disc = qb * qb - 4.0 * qa * qc;
    if disc < 0.0 {
        return None;
    }
    let t = (-qb - disc.sqrt()) / (2.0 * qa);
    if t <= 0.0 {
        return None;
    }
    let mut n = Vec3::zeros();
    for k in 0..3 {
        n += axes[k] * ((o[k] + t * d[k]) / radii[k]);
    }
    Some((t, n.normalize()))
}

/// Plane hit parameter for `n . p = c`.
fn hit_plane(ray: &Vec3, n: &Vec3, c: f64) -> Option<f64> {
    let d = ray.dot(n);
    if d.abs() < 1e-15 {
        return None;
    }
    let t = c / d;
    (t > 0.0).then_some(t)
}

fn facing(n: Vec3, ray: &Vec3) -> Vec3 {
    if n.dot(ray) > 0.0 {
        -n
    } else {
        n
    }
}

impl SceneSpec {
    /// Hinge of door `k`, oriented so a positive angle opens toward the camera.
    pub fn hinge(&self, k: usize) -> Option<Line3D> {
        let ObjectSpec::Door { panel, hinge_left } = self.objects.get(k)? else {
            return None;
        };
        let a = if *hinge_left { panel.rect.a0 } else { panel.rect.a1 };
        let top = self.room.wall_point(a, panel.rect.b0);
        let dir = if *hinge_left { self.room.down() } else { -self.room.down() };
        Line3D::new(top, dir).ok()
    }

    fn hinge_endpoints(&self, panel: &Panel, hinge_left: bool) -> (Vec3, Vec3) {
        let a = if hinge_left { panel.rect.a0 } else { panel.rect.a1 };
        (self.room.wall_point(a, panel.rect.b0), self.room.wall_point(a, panel.rect.b1))
    }

    fn trace(&self, ray: &Vec3, motion: Option<Motion>) -> Hit {
        let room = &self.room;
        let (m, g) = (room.wall_normal(), room.down());
        let mut best = Hit { t: f64::INFINITY, label: LABEL_WALL, normal: -m, color: [0.0; 3] };

        if let Some(t) = hit_plane(ray, &m, room.wall_distance) {
            let (a, b) = room.wall_coords(&(ray * t));
            let mut albedo = room.wall_albedo;
            let mut label = LABEL_WALL;
            for (k, obj) in self.objects.iter().enumerate() {
                if let Some(p) = obj.panel() {
                    if p.rect.contains(a, b) {
                        if motion.is_some_and(|mo| mo.object == k && mo.amount != 0.0) {
                            albedo = CAVITY_ALBEDO;
                        } else {
                            albedo = panel_albedo(p, a, b);
                            label = object_label(k);
                        }
                    }
                }
            }
            best = Hit { t, label, normal: -m, color: shade(albedo, &-m) };
        }
        if let Some(t) = hit_plane(ray, &g, room.camera_height) {
            if t < best.t {
                let p = ray * t;
                let (a, dist) = (p.dot(&room.wall_across()), room.wall_distance - p.dot(&m));
                let parity = ((a / 0.4).floor() as i64 + (dist / 0.4).floor() as i64).rem_euclid(2) as usize;
                best = Hit { t, label: LABEL_FLOOR, normal: -g, color: shade(room.floor_albedo[parity], &-g) };
            }
        }
        if let Some(mo) = motion.filter(|mo| mo.amount != 0.0) {
            if let Some(hit) = self.trace_moved(ray, mo) {
                if hit.t < best.t {
                    best = hit;
                }
            }
        }
        for (k, obj) in self.objects.iter().enumerate() {
            let Some(s) = obj.solid() else { continue };
            let axes = solid_axes(room, s);
            let c = solid_center(room, s);
            let hit = match obj {
                ObjectSpec::Rigid { .. } => hit_cuboid(ray, &c, &axes, &s.half),
                _ => hit_ellipsoid(ray, &c, &axes, &s.half),
            };
            if let Some((t, n)) = hit {
                if t < best.t {
                    let n = facing(n, ray);
                    best = Hit { t, label: object_label(k), normal: n, color: shade(s.albedo, &n) };
                }
            }
        }
        best
    }

    fn trace_moved(&self, ray: &Vec3, mo: Motion) -> Option<Hit> {
        let room = &self.room;
        let (m, g, u) = (room.wall_normal(), room.down(), room.wall_across());
        let label = object_label(mo.object);
        match self.objects.get(mo.object)? {
            ObjectSpec::Drawer { panel } => {
                let t = hit_plane(ray, &m, room.wall_distance - mo.amount)?;
                let (a, b) = room.wall_coords(&(ray * t));
                panel.rect.contains(a, b).then(|| Hit {
                    t,
                    label,
                    normal: -m,
                    color: shade(panel_albedo(panel, a, b), &-m),
                })
            }
            ObjectSpec::Door { panel, hinge_left } => {
                let (sign, a_h) = if *hinge_left { (1.0, panel.rect.a0) } else { (-1.0, panel.rect.a1) };
                let h0 = room.wall_point(a_h, panel.rect.b0);
                let (sn, cs) = mo.amount.sin_cos();
                let d1 = u * (sign * cs) - m * sn;
                let n = d1.cross(&g);
                let t = hit_plane(ray, &n, n.dot(&h0))?;
                let rel = ray * t - h0;
                let (s, tt) = (rel.dot(&d1), rel.dot(&g));
                let width = panel.rect.a1 - panel.rect.a0;
                let height = panel.rect.b1 - panel.rect.b0;
                if !(0.0..=width).contains(&s) || !(0.0..=height).contains(&tt) {
                    return None;
                }
                let n = facing(n.normalize(), ray);
                let albedo = panel_albedo(panel, a_h + sign * s, panel.rect.b0 + tt);
                Some(Hit { t, label, normal: n, color: shade(albedo, &n) })
            }
            _ => None,
        }
    }

    /// Ray casts every pixel center, optionally with one part moved.
    pub fn render(&self, motion: Option<Motion>) -> Render {
        let (w, h) = (self.width, self.height);
        let cam = &self.camera;
        let mut image = Grid::filled(w, h, [0u8; 3]);
        let mut depth = Grid::filled(w, h, 0.0);
        let mut normals = Grid::filled(w, h, Vec3::zeros());
        let mut labels = Grid::filled(w, h, LABEL_WALL);
        for r in 0..h {
            for c in 0..w {
                let ray = Vec3::new((c as f64 + 0.5 - cam.cx) / cam.fx, (r as f64 + 0.5 - cam.cy) / cam.fy, 1.0);
                let hit = self.trace(&ray, motion);
                let px = hit.color.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
                image.set(c, r, px);
                depth.set(c, r, hit.t);
                normals.set(c, r, hit.normal);
                labels.set(c, r, hit.label);
            }
        }
        Render { image, depth, normals, labels }
    }

    /// Pixels covered by object `k` if nothing else occluded it.
    pub fn silhouette(&self, k: usize) -> Option<Grid<bool>> {
        let obj = *self.objects.get(k)?;
        let alone = SceneSpec { objects: vec![obj], ..self.clone() };
        Some(alone.render(None).object_mask(0))
    }

    /// Re-renders with door `object` opened by `amount` radians or drawer
    /// `object` pulled out by `amount` metres.
    pub fn render_moved(&self, object: usize, amount: f64) -> Result<Render> {
        match self.objects.get(object) {
            Some(ObjectSpec::Door { .. } | ObjectSpec::Drawer { .. }) => {
                Ok(self.render(Some(Motion { object, amount })))
            }
            _ => Err(Error::Precondition(format!("object {object} is not articulated"))),
        }
    }

    /// Builds a random layout containing the given object kinds.
    pub fn random(image_id: &str, seed: u64, width: usize, height: usize, kinds: &[ObjectKind], fixtures: usize) -> Result<Self> {
        if kinds.len() + fixtures > MAX_QUERIES {
            return Err(Error::TooManyQueries { got: kinds.len() + fixtures, limit: MAX_QUERIES });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..MAX_ATTEMPTS {
            let spec = Self::propose(&mut rng, image_id, seed, width, height, kinds, fixtures);
            if let Some(spec) = spec {
                let render = spec.render(None);
                let visible = (0..spec.objects.len()).all(|k| render.object_mask(k).count() >= MIN_VISIBLE_PX);
                let background = render.labels.as_slice().iter().filter(|&&l| l < 2).count();
                if visible && background >= 20 * MIN_VISIBLE_PX {
                    return Ok(spec);
                }
            }
        }
        Err(Error::Layout { attempts: MAX_ATTEMPTS })
    }

    fn propose(
        rng: &mut ChaCha8Rng,
        image_id: &str,
        seed: u64,
        width: usize,
        height: usize,
        kinds: &[ObjectKind],
        fixtures: usize,
    ) -> Option<Self> {
        let camera = CameraModel::default_for(width, height);
        let room = Room {
            pitch: rng.random_range(12.0..22.0) * PI / 180.0,
            wall_yaw: rng.random_range(-20.0..20.0) * PI / 180.0,
            wall_distance: rng.random_range(2.3..3.0),
            camera_height: rng.random_range(1.0..1.3),
            wall_albedo: pastel(rng, 0.7, 0.95),
            floor_albedo: {
                let base = pastel(rng, 0.35, 0.6);
                [base, base.map(|v| v * 0.75)]
            },
        };
        let mut spec = SceneSpec {
            image_id: image_id.into(),
            seed,
            width,
            height,
            camera,
            room,
            objects: Vec::with_capacity(kinds.len()),
            fixtures,
        };
        let mut boxes: Vec<(f64, f64, f64, f64)> = Vec::new();
        for &kind in kinds {
            let placed = (0..MAX_ATTEMPTS).find_map(|_| {
                let obj = spec.propose_object(rng, kind)?;
                let bb = spec.image_bounds(&obj)?;
                let clear = boxes.iter().all(|o| bbox_iou(o, &bb) <= MAX_BOX_IOU)
                    && spec.objects.iter().all(|o| !collides(&spec.room, o, &obj));
                clear.then_some((obj, bb))
            });
            let (obj, bb) = placed?;
            spec.objects.push(obj);
            boxes.push(bb);
        }
        Some(spec)
    }

    fn propose_object(&self, rng: &mut ChaCha8Rng, kind: ObjectKind) -> Option<ObjectSpec> {
        let room = &self.room;
        let cam = &self.camera;
        let (w, h) = (self.width as f64, self.height as f64);
        match kind {
            ObjectKind::Door | ObjectKind::Drawer => {
                let (pw, ph) = if kind == ObjectKind::Door {
                    (rng.random_range(0.45..0.75), rng.random_range(0.8..1.3))
                } else {
                    (rng.random_range(0.5..0.85), rng.random_range(0.2..0.34))
                };
                let ray = pixel_ray(cam, rng.random_range(0.15..0.85) * w, rng.random_range(0.1..0.7) * h);
                let t = hit_plane(&ray, &room.wall_normal(), room.wall_distance)?;
                let (a, b) = room.wall_coords(&(ray * t));
                let rect = WallRect { a0: a - pw / 2.0, a1: a + pw / 2.0, b0: b - ph / 2.0, b1: b + ph / 2.0 };
                if rect.b1 > room.camera_height - 0.05 {
                    return None;
                }
                let albedo = wood(rng);
                if kind == ObjectKind::Door {
                    let hinge_left = rng.random_bool(0.5);
                    let (hs, he) = if hinge_left { (rect.a1 - 0.09, rect.a1 - 0.05) } else { (rect.a0 + 0.05, rect.a0 + 0.09) };
                    let (_, bc) = rect.center();
                    let handle = WallRect { a0: hs, a1: he, b0: bc - 0.1, b1: bc + 0.1 };
                    Some(ObjectSpec::Door { panel: Panel { rect, handle, albedo }, hinge_left })
                } else {
                    let (ac, bc) = rect.center();
                    let handle = WallRect { a0: ac - 0.09, a1: ac + 0.09, b0: bc - 0.025, b1: bc + 0.025 };
                    Some(ObjectSpec::Drawer { panel: Panel { rect, handle, albedo } })
                }
            }
            ObjectKind::Rigid | ObjectKind::Blob => {
                let ray = pixel_ray(cam, rng.random_range(0.12..0.88) * w, rng.random_range(0.6..0.92) * h);
                let t = hit_plane(&ray, &room.down(), room.camera_height)?;
                let base = ray * t;
                let yaw = rng.random_range(-0.6..0.6);
                let (half, two_hands) = match kind {
                    ObjectKind::Rigid if rng.random_bool(0.5) => {
                        ([rng.random_range(0.25..0.38), rng.random_range(0.2..0.3), rng.random_range(0.2..0.3)], true)
                    }
                    ObjectKind::Rigid => {
                        ([rng.random_range(0.1..0.16), rng.random_range(0.1..0.16), rng.random_range(0.08..0.15)], false)
                    }
                    _ => ([rng.random_range(0.16..0.3), rng.random_range(0.14..0.25), rng.random_range(0.07..0.13)], false),
                };
                let dist = room.wall_distance - base.dot(&room.wall_normal());
                if dist < half[0].max(half[1]) * 1.5 + 0.05 {
                    return None;
                }
                let solid = Solid { base: [base.x, base.y, base.z], yaw, half, albedo: vivid(rng) };
                Some(match kind {
                    ObjectKind::Rigid => ObjectSpec::Rigid { solid, two_hands },
                    _ => ObjectSpec::Blob { solid },
                })
            }
        }
    }

    /// Image-space bounding box of an object's silhouette corners, in
    /// pixels, if it lies inside the image with a margin.
    fn image_bounds(&self, obj: &ObjectSpec) -> Option<(f64, f64, f64, f64)> {
        let room = &self.room;
        let corners: Vec<Vec3> = match obj {
            ObjectSpec::Door { panel, .. } | ObjectSpec::Drawer { panel } => {
                let r = &panel.rect;
                vec![
                    room.wall_point(r.a0, r.b0),
                    room.wall_point(r.a1, r.b0),
                    room.wall_point(r.a0, r.b1),
                    room.wall_point(r.a1, r.b1),
                ]
            }
            ObjectSpec::Rigid { solid, .. } | ObjectSpec::Blob { solid } => {
                let axes = solid_axes(room, solid);
                let c = solid_center(room, solid);
                let mut v = Vec::with_capacity(8);
                for sx in [-1.0, 1.0] {
                    for sy in [-1.0, 1.0] {
                        for sz in [-1.0, 1.0] {
                            v.push(c + axes[0] * (sx * solid.half[0]) + axes[1] * (sy * solid.half[1]) + axes[2] * (sz * solid.half[2]));
                        }
                    }
                }
                v
            }
        };
        let mut bb = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &corners {
            let (u, v) = self.camera.project(p).filter(|_| p.z > 0.3)?;
            bb = (bb.0.min(u), bb.1.min(v), bb.2.max(u), bb.3.max(v));
        }
        let inside = bb.0 >= MARGIN_PX
            && bb.1 >= MARGIN_PX
            && bb.2 <= self.width as f64 - MARGIN_PX
            && bb.3 <= self.height as f64 - MARGIN_PX;
        inside.then_some(bb)
    }
}

fn pixel_ray(cam: &CameraModel, u: f64, v: f64) -> Vec3 {
    Vec3::new((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0)
}

fn bbox_iou(a: &(f64, f64, f64, f64), b: &(f64, f64, f64, f64)) -> f64 {
    let iw = (a.2.min(b.2) - a.0.max(b.0)).max(0.0);
    let ih = (a.3.min(b.3) - a.1.max(b.1)).max(0.0);
    let inter = iw * ih;
    inter / ((a.2 - a.0) * (a.3 - a.1) + (b.2 - b.0) * (b.3 - b.1) - inter)
}

fn collides(room: &Room, a: &ObjectSpec, b: &ObjectSpec) -> bool {
    match (a.panel(), b.panel(), a.solid(), b.solid()) {
        (Some(p), Some(q), _, _) => p.rect.overlaps(&q.rect, 0.06),
        (_, _, Some(s), Some(t)) => {
            let ra = s.half[0].hypot(s.half[1]);
            let rb = t.half[0].hypot(t.half[1]);
            let d = (Vec3::from(s.base) - Vec3::from(t.base)).norm();
            let _ = room;
            d < ra + rb + 0.05
        }
        _ => false,
    }
}

fn pastel(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    let base = rng.random_range(lo..hi);
    [0, 1, 2].map(|_| (base + rng.random_range(-0.06..0.06)).clamp(0.0, 1.0))
}

fn wood(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let v = rng.random_range(0.45..0.8);
    [v, v * rng.random_range(0.65..0.8), v * rng.random_range(0.35..0.55)]
}

fn vivid(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let hue = rng.random_range(0.0..1.0);
    
    [0.0, 1.0 / 3.0, 2.0 / 3.0].map(|o: f64| {
        let x = ((hue + o) * 2.0 * PI).cos();
        (0.5 + 0.4 * x).clamp(0.05, 0.95)
    })
}

/// Pixel-center normalized point of cell `(c, r)`.
fn cell_point(c: usize, r: usize, w: usize, h: usize) -> QueryPoint {
    QueryPoint::new((c as f64 + 0.5) / w as f64, (r as f64 + 0.5) / h as f64)
}

/// Picks a cell satisfying `keep`, preferring those whose neighbourhood
/// within `radius` also satisfies it.
fn pick_cell(rng: &mut ChaCha8Rng, w: usize, h: usize, radius: usize, keep: impl Fn(usize, usize) -> bool) -> Option<(usize, usize)> {
    let interior = |c: usize, r: usize| {
        c >= radius
            && r >= radius
            && c + radius < w
            && r + radius < h
            && [(0, 0), (radius, 0), (0, radius), (radius, radius)]
                .iter()
                .all(|&(dx, dy)| keep(c - radius + 2 * dx, r) && keep(c, r - radius + 2 * dy))
    };
    let strict: Vec<(usize, usize)> =
        (0..h).flat_map(|r| (0..w).map(move |c| (c, r))).filter(|&(c, r)| keep(c, r) && interior(c, r)).collect();
    let pool = if strict.is_empty() {
        (0..h).flat_map(|r| (0..w).map(move |c| (c, r))).filter(|&(c, r)| keep(c, r)).collect()
    } else {
        strict
    };
    (!pool.is_empty()).then(|| pool[rng.random_range(0..pool.len())])
}

fn normalized(cam: &CameraModel, p: &Vec3, w: usize, h: usize) -> Option<(f64, f64)> {
    cam.project(p).map(|(u, v)| (u / w as f64, v / h as f64))
}

/// Renders `spec` and annotates one query per object plus its fixtures.
pub fn generate(spec: &SceneSpec) -> Result<GeneratedSample> {
    let (w, h) = (spec.width, spec.height);
    if spec.objects.len() + spec.fixtures > MAX_QUERIES {
        return Err(Error::TooManyQueries { got: spec.objects.len() + spec.fixtures, limit: MAX_QUERIES });
    }
    let render = spec.render(None);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x005e_ed0f_9e7e);
    let mut queries = Vec::new();
    let mut objects = Vec::new();
    let cam = &spec.camera;
    let room = &spec.room;

    for (k, obj) in spec.objects.iter().enumerate() {
        let grid = render.object_mask(k);
        let (c, r) = pick_cell(&mut rng, w, h, 2, |c, r| *grid.get(c, r))
            .ok_or_else(|| Error::Degenerate(format!("object {k} is not visible")))?;
        let mut q = QueryAnnotation {
            point: cell_point(c, r, w, h),
            movable: MovableClass::OneHand,
            rigidity: Some(RigidityClass::Rigid),
            articulation: None,
            action: None,
            bbox: BoxXYXY::from_mask(&grid),
            mask: Some(Mask::encode(&grid)),
            axis: None,
            affordance: None,
        };
        let mut truth = ObjectTruth { kind: obj.kind(), query: queries.len(), hinge: None, pull: None };
        match obj {
            ObjectSpec::Door { panel, hinge_left } => {
                let (top, bottom) = spec.hinge_endpoints(panel, *hinge_left);
                let a = normalized(cam, &top, w, h).ok_or_else(|| Error::Degenerate("hinge behind camera".into()))?;
                let b = normalized(cam, &bottom, w, h).ok_or_else(|| Error::Degenerate("hinge behind camera".into()))?;
                q.articulation = Some(ArticulationClass::Rotation);
                q.action = Some(ActionClass::Pull);
                q.axis = Some(Line2D::through(a, b)?);
                q.affordance = Some(handle_target(spec, panel)?);
                truth.hinge = spec.hinge(k);
            }
            ObjectSpec::Drawer { panel } => {
                q.articulation = Some(ArticulationClass::Translation);
                q.action = Some(ActionClass::Pull);
                q.affordance = Some(handle_target(spec, panel)?);
                truth.pull = Some(-room.wall_normal());
            }
            ObjectSpec::Rigid { two_hands, .. } => {
                q.articulation = Some(ArticulationClass::Freeform);
                if *two_hands {
                    q.movable = MovableClass::TwoHands;
                }
            }
            ObjectSpec::Blob { .. } => {
                q.rigidity = Some(RigidityClass::Nonrigid);
            }
        }
        queries.push(q);
        objects.push(truth);
    }
    for f in 0..spec.fixtures {
        let want = if f % 2 == 0 { LABEL_WALL } else { LABEL_FLOOR };
        let labels = &render.labels;
        let cell = pick_cell(&mut rng, w, h, 3, |c, r| *labels.get(c, r) == want)
            .or_else(|| pick_cell(&mut rng, w, h, 3, |c, r| *labels.get(c, r) < 2))
            .ok_or_else(|| Error::Degenerate("no visible wall or floor".into()))?;
        queries.push(QueryAnnotation::fixture(cell_point(cell.0, cell.1, w, h)));
    }

    let sample = SceneSample {
        image_id: spec.image_id.clone(),
        image: render.image.clone(),
        depth: Some(render.depth.map(|&v| v as f32)),
        normals: Some(render.normals.map(|n| [n.x as f32, n.y as f32, n.z as f32])),
        queries,
        source: SOURCE.into(),
    };
    sample.validate()?;
    Ok(GeneratedSample {
        sample,
        spec: spec.clone(),
        objects,
        depth: render.depth,
        normals: render.normals,
        labels: render.labels,
    })
}

fn handle_target(spec: &SceneSpec, panel: &Panel) -> Result<AffordanceTarget> {
    let (a, b) = panel.handle.center();
    let p = spec.room.wall_point(a, b);
    let (x, y) = normalized(&spec.camera, &p, spec.width, spec.height)
        .ok_or_else(|| Error::Degenerate("handle behind camera".into()))?;
    Ok(AffordanceTarget::at(QueryPoint::new(x.clamp(0.0, 1.0), y.clamp(0.0, 1.0))))
}

/// Seed of sample `index` in a split; independent of every other sample.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Image id of sample `index` of the split seeded by `seed`.
pub fn image_id(seed: u64, index: usize) -> String {
    format!("s{seed}-{index:04}")
}

/// Object kinds of sample `index`: two to four objects, cycling through the
/// kinds so that any run of samples stays balanced.
pub fn split_kinds(seed: u64, index: usize) -> Vec<ObjectKind> {
    let s = sample_seed(seed, index);
    let count = 2 + (s % 3) as usize;
    let start = (index * 3 + (seed % 4) as usize) % 4;
    (0..count).map(|j| ObjectKind::ALL[(start + j) % 4]).collect()
}

/// Generates sample `index` of the split seeded by `seed`.
///
/// Layouts that cannot be satisfied drop their last object until one fits.
pub fn generate_one(seed: u64, index: usize, width: usize, height: usize) -> Result<GeneratedSample> {
    let s = sample_seed(seed, index);
    let fixtures = 1 + ((s >> 8) % 2) as usize;
    let mut kinds = split_kinds(seed, index);
    let id = image_id(seed, index);
    loop {
        match SceneSpec::random(&id, s, width, height, &kinds, fixtures) {
            Ok(spec) => return generate(&spec),
            Err(Error::Layout { .. }) if kinds.len() > 1 => {
                kinds.pop();
            }
            Err(e) => return Err(e),
        }
    }
}

/// `n` samples at the default toy resolution.
pub fn generate_split(n: usize, seed: u64) -> Result<Vec<GeneratedSample>> {
    generate_split_sized(n, seed, DEFAULT_WIDTH, DEFAULT_HEIGHT)
}

pub fn generate_split_sized(n: usize, seed: u64, width: usize, height: usize) -> Result<Vec<GeneratedSample>> {
    if n == 0 {
        return Err(Error::Precondition("a split needs at least one sample".into()));
    }
    (0..n).map(|i| generate_one(seed, i, width, height)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_valid() {
        let a = generate_one(7, 3, 128, 96).unwrap();
        let b = generate_one(7, 3, 128, 96).unwrap();
        assert_eq!(a, b);
        a.sample.validate().unwrap();
        assert!(a.sample.queries.iter().any(|q| q.movable == MovableClass::Fixture));
    }

    #[test]
    fn zero_motion_matches_closed_render() {
        let g = generate_one(1, 0, 96, 72).unwrap();
        let k = g.spec.objects.iter().position(|o| o.panel().is_some());
        if let Some(k) = k {
            assert_eq!(g.spec.render_moved(k, 0.0).unwrap().labels, g.labels);
        }
    }
}

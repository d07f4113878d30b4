//! Synthetic desk scenes for offline end-to-end runs.
//!
//! Objects are built from boxes and upright cylinders, ray-cast into a depth
//! raster, and labelled per pixel by whichever part is hit first, so part
//! masks always partition their object's visible mask. Each scene also
//! carries authored grasp candidates and the fixture files the deterministic
//! backends read.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::Path;

use nalgebra::{Matrix3, Point3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decomposition::{DecompositionReply, FixtureTable};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::geometry;
use crate::mask::BinaryMask;
use crate::model::{CameraIntrinsics, GraspCandidate, GraspPose, PartDecomposition, RgbdFrame};
use crate::pipeline::{FailureClass, PipelineOutcome};
use crate::segmentation::{SegmentationResult, CONFIDENCES_FILE, MASK_SUFFIX};

pub const OCCLUDER_LABEL: &str = "occluder";
const BACKGROUND_COLOR: [u8; 3] = [92, 92, 96];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Primitive {
    /// Axis-aligned box in the camera frame.
    Cuboid { min: [f64; 3], max: [f64; 3] },
    /// Solid cylinder whose axis is parallel to the camera y axis.
    UprightCylinder {
        center_x: f64,
        center_z: f64,
        radius: f64,
        y_min: f64,
        y_max: f64,
    },
}

impl Primitive {
    /// Distance along `dir` (from the camera center) to the first surface
    /// hit. With `dir.z == 1` this is the hit depth.
    pub fn intersect(&self, dir: &Vector3<f64>) -> Option<f64> {
        match *self {
            Primitive::Cuboid { min, max } => {
                let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
                for i in 0..3 {
                    if dir[i] == 0.0 {
                        if min[i] > 0.0 || max[i] < 0.0 {
                            return None;
                        }
                        continue;
                    }
                    let (a, b) = (min[i] / dir[i], max[i] / dir[i]);
                    t0 = t0.max(a.min(b));
                    t1 = t1.min(a.max(b));
                }
                (t0 <= t1 && t0 > 0.0).then_some(t0)
            }
            Primitive::UprightCylinder {
                center_x,
                center_z,
                radius,
                y_min,
                y_max,
            } => {
                let mut best: Option<f64> = None;
                let mut consider = |t: f64| {
                    if t > 0.0 && best.map_or(true, |b| t < b) {
                        best = Some(t);
                    }
                };
                let a = dir.x * dir.x + dir.z * dir.z;
                let b = -2.0 * (dir.x * center_x + dir.z * center_z);
                let c = center_x * center_x + center_z * center_z - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if a > 0.0 && disc >= 0.0 {
                    let t = (-b - disc.sqrt()) / (2.0 * a);
                    let y = t * dir.y;
                    if (y_min..=y_max).contains(&y) {
                        consider(t);
                    }
                }
                if dir.y != 0.0 {
                    for plane in [y_min, y_max] {
                        let t = plane / dir.y;
                        let (x, z) = (t * dir.x - center_x, t * dir.z - center_z);
                        if x * x + z * z <= radius * radius {
                            consider(t);
                        }
                    }
                }
                best
            }
        }
    }

    fn translated(&self, d: Vector3<f64>) -> Self {
        match *self {
            Primitive::Cuboid { min, max } => Primitive::Cuboid {
                min: [min[0] + d.x, min[1] + d.y, min[2] + d.z],
                max: [max[0] + d.x, max[1] + d.y, max[2] + d.z],
            },
            Primitive::UprightCylinder {
                center_x,
                center_z,
                radius,
                y_min,
                y_max,
            } => Primitive::UprightCylinder {
                center_x: center_x + d.x,
                center_z: center_z + d.z,
                radius,
                y_min: y_min + d.y,
                y_max: y_max + d.y,
            },
        }
    }

    fn dims_positive(&self) -> bool {
        match *self {
            Primitive::Cuboid { min, max } => (0..3).all(|i| max[i] > min[i]),
            Primitive::UprightCylinder { radius, y_min, y_max, .. } => radius > 0.0 && y_max > y_min,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartShape {
    pub label: String,
    pub primitive: Primitive,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub name: String,
    pub parts: Vec<PartShape>,
}

impl ObjectSpec {
    fn part(label: &str, primitive: Primitive, color: [u8; 3]) -> PartShape {
        PartShape {
            label: label.into(),
            primitive,
            color,
        }
    }

    /// Knife lying across the view: handle on the left, blade on the right.
    pub fn knife(offset: Vector3<f64>) -> Self {
        Self {
            name: "knife".into(),
            parts: vec![
                Self::part(
                    "handle",
                    Primitive::Cuboid { min: [-0.12, -0.02, 0.700], max: [-0.02, 0.02, 0.720] },
                    [40, 30, 25],
                ),
                Self::part(
                    "blade",
                    Primitive::Cuboid { min: [-0.02, -0.02, 0.705], max: [0.14, 0.02, 0.710] },
                    [200, 200, 210],
                ),
            ],
        }
        .translated(offset)
    }

    /// Square pan body with a handle sticking out to the right.
    pub fn pan(offset: Vector3<f64>) -> Self {
        Self {
            name: "pan".into(),
            parts: vec![
                Self::part(
                    "body",
                    Primitive::Cuboid { min: [-0.13, -0.08, 0.65], max: [0.03, 0.08, 0.70] },
                    [50, 50, 55],
                ),
                Self::part(
                    "handle",
                    Primitive::Cuboid { min: [0.03, -0.015, 0.66], max: [0.20, 0.015, 0.68] },
                    [120, 70, 30],
                ),
            ],
        }
        .translated(offset)
    }

    /// Upright bottle: cylinder body with a narrower cap on top (-y).
    pub fn bottle(offset: Vector3<f64>) -> Self {
        Self {
            name: "bottle".into(),
            parts: vec![
                Self::part(
                    "body",
                    Primitive::UprightCylinder { center_x: 0.0, center_z: 0.75, radius: 0.04, y_min: -0.06, y_max: 0.12 },
                    [60, 140, 200],
                ),
                Self::part(
                    "cap",
                    Primitive::UprightCylinder { center_x: 0.0, center_z: 0.75, radius: 0.018, y_min: -0.09, y_max: -0.06 },
                    [220, 40, 40],
                ),
            ],
        }
        .translated(offset)
    }

    /// Single-part cube of side `side` centered at `center`.
    pub fn cube(name: &str, center: Point3<f64>, side: f64) -> Self {
        let h = side / 2.0;
        Self {
            name: name.into(),
            parts: vec![Self::part(
                name,
                Primitive::Cuboid {
                    min: [center.x - h, center.y - h, center.z - h],
                    max: [center.x + h, center.y + h, center.z + h],
                },
                [180, 160, 90],
            )],
        }
    }

    pub fn translated(mut self, d: Vector3<f64>) -> Self {
        for p in &mut self.parts {
            p.primitive = p.primitive.translated(d);
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OcclusionSide {
    Top,
    Left,
}

/// A flat occluder placed in front of the target, covering `fraction` of
/// its visible pixels from `side`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccluderSpec {
    pub fraction: f64,
    pub side: OcclusionSide,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: u32,
    pub height: u32,
    /// The first object is the grasp target.
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub occluder: Option<OccluderSpec>,
    pub background_depth_m: f64,
    #[serde(default)]
    pub depth_jitter_mm: u16,
    /// Author grasp candidates for the target.
    #[serde(default = "yes")]
    pub author_candidates: bool,
}

fn yes() -> bool {
    true
}

impl SceneSpec {
    pub fn single(object: ObjectSpec) -> Self {
        Self {
            width: 640,
            height: 480,
            objects: vec![object],
            occluder: None,
            background_depth_m: 1.2,
            depth_jitter_mm: 0,
            author_candidates: true,
        }
    }
}

pub fn default_camera() -> CameraIntrinsics {
    CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0).expect("valid constants")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedOutcome {
    pub task: String,
    pub expected_part_labels: Vec<String>,
    #[serde(default)]
    pub expected_winner_id: Option<u64>,
    #[serde(default = "full_coverage")]
    pub min_part_coverage: f64,
    #[serde(default = "single_category")]
    pub category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occlusion_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_failure: Option<FailureClass>,
}

fn full_coverage() -> f64 {
    1.0
}

fn single_category() -> String {
    "single".into()
}

impl ExpectedOutcome {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_part_coverage > 0.0 && self.min_part_coverage <= 1.0) {
            return Err(Error::invalid("expected outcome", "min_part_coverage must be in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneFixture {
    pub frame: RgbdFrame,
    pub ground_truth_masks: BTreeMap<String, BinaryMask>,
    /// Confidence the fixture segmentation backend reports per label.
    pub confidences: BTreeMap<String, f64>,
    pub candidates: Vec<GraspCandidate>,
    pub decomposition_table: FixtureTable,
    pub expected: Option<ExpectedOutcome>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedScene {
    pub fixture: SceneFixture,
    /// For each target part, the candidate whose contact and approach both
    /// fall deep inside that part.
    pub part_targets: BTreeMap<String, u64>,
    /// Fraction of the target's pixels hidden by the occluder.
    pub occlusion_fraction: Option<f64>,
}

/// Per-pixel render result.
struct Render {
    depth_m: Vec<f64>,
    /// (object index, part index); `None` is background.
    labels: Vec<Option<(usize, usize)>>,
}

fn ray(intr: &CameraIntrinsics, u: u32, v: u32) -> Vector3<f64> {
    Vector3::new((u as f64 - intr.cx) / intr.fx, (v as f64 - intr.cy) / intr.fy, 1.0)
}

fn render(objects: &[ObjectSpec], width: u32, height: u32, intr: &CameraIntrinsics, background: f64, exec: Execution) -> Render {
    let rows = exec.map_range(height as usize, |v| {
        (0..width)
            .map(|u| {
                let dir = ray(intr, u, v as u32);
                let mut hit: Option<(f64, (usize, usize))> = None;
                for (oi, obj) in objects.iter().enumerate() {
                    for (pi, part) in obj.parts.iter().enumerate() {
                        if let Some(t) = part.primitive.intersect(&dir) {
                            if hit.map_or(true, |(best, _)| t < best) {
                                hit = Some((t, (oi, pi)));
                            }
                        }
                    }
                }
                match hit {
                    Some((t, label)) if t < background => (t, Some(label)),
                    _ => (background, None),
                }
            })
            .collect::<Vec<_>>()
    });
    let mut depth_m = Vec::with_capacity((width * height) as usize);
    let mut labels = Vec::with_capacity((width * height) as usize);
    for (d, l) in rows.into_iter().flatten() {
        depth_m.push(d);
        labels.push(l);
    }
    Render { depth_m, labels }
}

fn mask_where(width: u32, height: u32, labels: &[Option<(usize, usize)>], pred: impl Fn(usize, usize) -> bool) -> BinaryMask {
    let bits: Vec<u8> = labels
        .iter()
        .map(|l| l.map_or(0, |(o, p)| pred(o, p) as u8))
        .collect();
    BinaryMask::encode(&bits, width, height).expect("sized from frame")
}

fn touches_border(mask: &BinaryMask) -> bool {
    let (w, h) = mask.dims();
    mask.set_indices().any(|i| {
        let (u, v) = ((i % w as usize) as u32, (i / w as usize) as u32);
        u == 0 || v == 0 || u + 1 == w || v + 1 == h
    })
}

/// Builds the occluder cuboid so that it hides as close to `spec.fraction`
/// of `target` as row/column granularity allows.
fn place_occluder(spec: &OccluderSpec, target: &BinaryMask, target_obj: &ObjectSpec, intr: &CameraIntrinsics) -> Result<ObjectSpec> {
    if !(spec.fraction > 0.0 && spec.fraction < 1.0) {
        return Err(Error::Generation("occlusion fraction must be in (0, 1)".into()));
    }
    let (w, _) = target.dims();
    let coords: Vec<(u32, u32)> = target
        .set_indices()
        .map(|i| ((i % w as usize) as u32, (i / w as usize) as u32))
        .collect();
    let total = coords.len();
    let key = |&(u, v): &(u32, u32)| match spec.side {
        OcclusionSide::Top => v,
        OcclusionSide::Left => u,
    };
    let lo = coords.iter().map(key).min().unwrap_or(0);
    let hi = coords.iter().map(key).max().unwrap_or(0);
    // covering every line < edge
    let mut best_edge = lo;
    let mut best_err = f64::INFINITY;
    for edge in lo..=hi {
        let covered = coords.iter().filter(|c| key(c) < edge).count();
        let err = (covered as f64 / total as f64 - spec.fraction).abs();
        if err < best_err {
            best_err = err;
            best_edge = edge;
        }
    }
    let near = target_obj
        .parts
        .iter()
        .map(|p| match p.primitive {
            Primitive::Cuboid { min, .. } => min[2],
            Primitive::UprightCylinder { center_z, radius, .. } => center_z - radius,
        })
        .fold(f64::INFINITY, f64::min);
    let z = near - 0.08;
    if z <= 0.05 {
        return Err(Error::Generation("target too close for an occluder".into()));
    }
    let (umin, umax, vmin, vmax) = coords.iter().fold((u32::MAX, 0, u32::MAX, 0), |a, &(u, v)| {
        (a.0.min(u), a.1.max(u), a.2.min(v), a.3.max(v))
    });
    let to_x = |u: f64| (u - intr.cx) / intr.fx * z;
    let to_y = |v: f64| (v - intr.cy) / intr.fy * z;
    let (min, max) = match spec.side {
        OcclusionSide::Top => (
            [to_x(umin as f64 - 20.0), to_y(vmin as f64 - 20.0), z],
            [to_x(umax as f64 + 20.0), to_y(best_edge as f64 - 0.5), z + 0.01],
        ),
        OcclusionSide::Left => (
            [to_x(umin as f64 - 20.0), to_y(vmin as f64 - 20.0), z],
            [to_x(best_edge as f64 - 0.5), to_y(vmax as f64 + 20.0), z + 0.01],
        ),
    };
    Ok(ObjectSpec {
        name: OCCLUDER_LABEL.into(),
        parts: vec![PartShape {
            label: OCCLUDER_LABEL.into(),
            primitive: Primitive::Cuboid { min, max },
            color: [150, 110, 60],
        }],
    })
}

/// Pixels of `mask` whose whole (2r+1)x(2r+1) neighborhood is in the mask.
fn interior_pixels(mask: &BinaryMask, r: i64) -> Vec<(u32, u32)> {
    let (w, h) = mask.dims();
    let bits = mask.decode().expect("valid mask");
    let at = |u: i64, v: i64| u >= 0 && v >= 0 && u < w as i64 && v < h as i64 && bits[(v * w as i64 + u) as usize] == 1;
    mask.set_indices()
        .map(|i| ((i % w as usize) as i64, (i / w as usize) as i64))
        .filter(|&(u, v)| (-r..=r).all(|dv| (-r..=r).all(|du| at(u + du, v + dv))))
        .map(|(u, v)| (u as u32, v as u32))
        .collect()
}

/// Interior pixel closest to the interior centroid; ties to the first in
/// row-major order.
fn anchor_pixel(interior: &[(u32, u32)]) -> Option<(u32, u32)> {
    if interior.is_empty() {
        return None;
    }
    let n = interior.len() as f64;
    let cu = interior.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let cv = interior.iter().map(|p| p.1 as f64).sum::<f64>() / n;
    interior
        .iter()
        .copied()
        .min_by(|a, b| {
            let da = (a.0 as f64 - cu).powi(2) + (a.1 as f64 - cv).powi(2);
            let db = (b.0 as f64 - cu).powi(2) + (b.1 as f64 - cv).powi(2);
            da.total_cmp(&db)
        })
}

/// Finger contact next to `center`, preferring a horizontal offset.
fn contact_pixel(center: (u32, u32), interior: &[(u32, u32)]) -> (u32, u32) {
    let offsets: [(i64, i64); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];
    for k in (1..=6).rev() {
        for (du, dv) in offsets {
            let p = (center.0 as i64 + du * k, center.1 as i64 + dv * k);
            if p.0 >= 0 && p.1 >= 0 && interior.contains(&(p.0 as u32, p.1 as u32)) {
                return (p.0 as u32, p.1 as u32);
            }
        }
    }
    center
}

/// Pose approaching along the camera ray through `axis_point`, with the
/// finger baseline toward `contact`. The origin sits 10 cm before the
/// surface.
fn approach_pose(axis_point: Point3<f64>, contact: Point3<f64>) -> Result<GraspPose> {
    let z = axis_point.coords.normalize();
    let mut x = contact - axis_point;
    x -= z * z.dot(&x);
    if x.norm() < 1e-9 {
        x = Vector3::x() - z * z.x;
    }
    let x = x.normalize();
    let y = z.cross(&x);
    let rot = Matrix3::from_columns(&[x, y, z]);
    GraspPose::from_matrix(rot, axis_point.coords - z * 0.10)
}

pub fn generate_scene(spec: &SceneSpec, camera: &CameraIntrinsics, seed: u64) -> Result<GeneratedScene> {
    generate_scene_with(spec, camera, seed, Execution::default())
}

pub fn generate_scene_with(spec: &SceneSpec, camera: &CameraIntrinsics, seed: u64, exec: Execution) -> Result<GeneratedScene> {
    let (w, h) = (spec.width, spec.height);
    if w == 0 || h == 0 || spec.objects.is_empty() || !(spec.background_depth_m > 0.0) {
        return Err(Error::Generation("scene needs a frame, objects and a background".into()));
    }
    let mut seen = Vec::new();
    for obj in &spec.objects {
        for p in &obj.parts {
            if !p.primitive.dims_positive() {
                return Err(Error::Generation(format!("{}:{} has non-positive size", obj.name, p.label)));
            }
            for l in [&obj.name, &p.label] {
                if l == OCCLUDER_LABEL {
                    return Err(Error::Generation(format!("label {l:?} is reserved")));
                }
            }
            if seen.contains(&p.label) && p.label != obj.name {
                return Err(Error::Generation(format!("duplicate part label {:?}", p.label)));
            }
            seen.push(p.label.clone());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let clear = render(&spec.objects, w, h, camera, spec.background_depth_m, exec);
    for (oi, obj) in spec.objects.iter().enumerate() {
        let m = mask_where(w, h, &clear.labels, |o, _| o == oi);
        if m.is_empty() || touches_border(&m) {
            return Err(Error::Generation(format!("object {:?} is outside the camera frustum", obj.name)));
        }
    }

    let mut objects = spec.objects.clone();
    let mut occlusion_fraction = None;
    if let Some(occ) = &spec.occluder {
        let target = mask_where(w, h, &clear.labels, |o, _| o == 0);
        objects.push(place_occluder(occ, &target, &spec.objects[0], camera)?);
        let r = render(&objects, w, h, camera, spec.background_depth_m, exec);
        let visible = mask_where(w, h, &r.labels, |o, _| o == 0);
        occlusion_fraction = Some(1.0 - visible.count_ones() as f64 / target.count_ones() as f64);
    }
    let scene = if spec.occluder.is_some() {
        render(&objects, w, h, camera, spec.background_depth_m, exec)
    } else {
        clear
    };

    let mut masks = BTreeMap::new();
    for (oi, obj) in objects.iter().enumerate() {
        masks.insert(obj.name.clone(), mask_where(w, h, &scene.labels, |o, _| o == oi));
        for (pi, part) in obj.parts.iter().enumerate() {
            if part.label != obj.name {
                masks.insert(part.label.clone(), mask_where(w, h, &scene.labels, |o, p| o == oi && p == pi));
            }
        }
    }

    let jitter = spec.depth_jitter_mm as i32;
    let mut depth = Vec::with_capacity(scene.depth_m.len());
    let mut color = Vec::with_capacity(scene.depth_m.len());
    for (d, l) in scene.depth_m.iter().zip(&scene.labels) {
        let mut mm = (d * 1000.0).round() as i32;
        if jitter > 0 {
            mm += rng.gen_range(-jitter..=jitter);
        }
        depth.push(mm.clamp(1, u16::MAX as i32) as u16);
        color.push(l.map_or(BACKGROUND_COLOR, |(o, p)| objects[o].parts[p].color));
    }
    let frame = RgbdFrame::new(w, h, color, depth, *camera)?;

    let mut confidences = BTreeMap::new();
    for obj in &objects {
        confidences.insert(obj.name.clone(), 0.96);
        for p in &obj.parts {
            if p.label != obj.name {
                confidences.insert(p.label.clone(), round3(rng.gen_range(0.75..0.95)));
            }
        }
    }

    let (candidates, part_targets) = if spec.author_candidates {
        author_candidates(&spec.objects[0], &masks, &frame, &mut rng)?
    } else {
        (Vec::new(), BTreeMap::new())
    };

    Ok(GeneratedScene {
        fixture: SceneFixture {
            frame,
            ground_truth_masks: masks,
            confidences,
            candidates,
            decomposition_table: FixtureTable::default(),
            expected: None,
        },
        part_targets,
        occlusion_fraction,
    })
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

struct Draft {
    contact_px: (u32, u32),
    axis_px: (u32, u32),
    confidence: f64,
    target_of: Option<String>,
}

fn author_candidates(
    target: &ObjectSpec,
    masks: &BTreeMap<String, BinaryMask>,
    frame: &RgbdFrame,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<GraspCandidate>, BTreeMap<String, u64>)> {
    let parts: Vec<&str> = target
        .parts
        .iter()
        .map(|p| p.label.as_str())
        .filter(|l| *l != target.name)
        .collect();
    let mut anchors = BTreeMap::new();
    for &label in &parts {
        let interior = interior_pixels(&masks[label], 2);
        let anchor = anchor_pixel(&interior)
            .ok_or_else(|| Error::Generation(format!("part {label:?} has no interior pixel")))?;
        anchors.insert(label, (anchor, contact_pixel(anchor, &interior)));
    }
    let mut drafts = Vec::new();
    for &p in &parts {
        let (anchor, contact) = anchors[p];
        drafts.push(Draft {
            contact_px: contact,
            axis_px: anchor,
            confidence: round3(rng.gen_range(0.30..0.45)),
            target_of: Some(p.to_string()),
        });
        for &q in &parts {
            if p != q {
                drafts.push(Draft {
                    contact_px: contact,
                    axis_px: anchors[q].0,
                    confidence: round3(rng.gen_range(0.60..0.90)),
                    target_of: None,
                });
            }
        }
    }
    // one grasp at the silhouette edge: contact on the background beside the object
    let whole = &masks[&target.name];
    let w = whole.width();
    let (umin, vsum, n) = whole.set_indices().fold((u32::MAX, 0u64, 0u64), |a, i| {
        (a.0.min((i % w as usize) as u32), a.1 + (i / w as usize) as u64, a.2 + 1)
    });
    let edge_px = (umin.saturating_sub(8), (vsum / n) as u32);
    drafts.push(Draft {
        contact_px: edge_px,
        axis_px: edge_px,
        confidence: round3(rng.gen_range(0.50..0.95)),
        target_of: None,
    });

    let mut ids: Vec<u64> = (0..drafts.len() as u64).collect();
    ids.shuffle(rng);
    let intr = frame.intrinsics();
    let surface = |px: (u32, u32)| -> Result<Point3<f64>> {
        let d = frame
            .depth_m(px.0, px.1)
            .ok_or_else(|| Error::Generation(format!("no depth at {px:?}")))?;
        geometry::deproject((px.0 as f64, px.1 as f64), d, intr)
    };
    let mut candidates = Vec::new();
    let mut targets = BTreeMap::new();
    for (draft, id) in drafts.into_iter().zip(ids) {
        let contact = surface(draft.contact_px)?;
        let axis_point = surface(draft.axis_px)?;
        let pose = approach_pose(axis_point, contact)?;
        candidates.push(GraspCandidate::new(id, pose, contact, draft.confidence)?);
        if let Some(label) = draft.target_of {
            targets.insert(label, id);
        }
    }
    candidates.sort_by_key(|c| c.id);
    Ok((candidates, targets))
}

// ---------------------------------------------------------------------------
// Fixture directory I/O
// ---------------------------------------------------------------------------

pub const INTRINSICS_FILE: &str = "intrinsics.json";
pub const COLOR_FILE: &str = "color.png";
pub const DEPTH_FILE: &str = "depth.pgm";
pub const MASKS_DIR: &str = "masks";
pub const GRASPS_FILE: &str = "grasps.json";
pub const DECOMPOSITION_FILE: &str = "decomposition.json";
pub const EXPECTED_FILE: &str = "expected.json";

/// Writes through a temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn to_pretty_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

/// Binary 16-bit PGM (maxval 65535, big-endian samples).
pub fn encode_depth_pgm(frame: &RgbdFrame) -> Result<Vec<u8>> {
    let mut out = format!("P5\n{} {}\n65535\n", frame.width(), frame.height()).into_bytes();
    out.extend(frame.depth_mm().iter().flat_map(|d| d.to_be_bytes()));
    Ok(out)
}

pub fn encode_color_png(frame: &RgbdFrame) -> Result<Vec<u8>> {
    let raw: Vec<u8> = frame.color().iter().flatten().copied().collect();
    let img = image::RgbImage::from_raw(frame.width(), frame.height(), raw)
        .ok_or_else(|| Error::Dimension("color buffer size".into()))?;
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Loads `intrinsics.json`, `color.png` and the 16-bit `depth.pgm`.
pub fn load_frame(dir: &Path) -> Result<RgbdFrame> {
    let intr: CameraIntrinsics = read_json(&dir.join(INTRINSICS_FILE))?;
    let color = image::open(dir.join(COLOR_FILE))?.to_rgb8();
    let depth = match image::open(dir.join(DEPTH_FILE))? {
        image::DynamicImage::ImageLuma16(img) => img,
        _ => return Err(Error::Fixture(format!("{DEPTH_FILE} must be a 16-bit graymap"))),
    };
    if color.dimensions() != depth.dimensions() {
        return Err(Error::Dimension("color and depth sizes differ".into()));
    }
    let (w, h) = color.dimensions();
    let color = color.pixels().map(|p| p.0).collect();
    RgbdFrame::new(w, h, color, depth.into_raw(), intr)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Fixture(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Fixture(format!("{}: {e}", path.display())))
}

impl SceneFixture {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join(MASKS_DIR))?;
        write_atomic(&dir.join(INTRINSICS_FILE), &to_pretty_json(self.frame.intrinsics())?)?;
        write_atomic(&dir.join(COLOR_FILE), &encode_color_png(&self.frame)?)?;
        write_atomic(&dir.join(DEPTH_FILE), &encode_depth_pgm(&self.frame)?)?;
        for (label, mask) in &self.ground_truth_masks {
            let path = dir.join(MASKS_DIR).join(format!("{label}{MASK_SUFFIX}"));
            write_atomic(&path, &to_pretty_json(mask)?)?;
        }
        write_atomic(&dir.join(MASKS_DIR).join(CONFIDENCES_FILE), &to_pretty_json(&self.confidences)?)?;
        write_atomic(&dir.join(GRASPS_FILE), &to_pretty_json(&self.candidates)?)?;
        write_atomic(&dir.join(DECOMPOSITION_FILE), &to_pretty_json(&self.decomposition_table)?)?;
        if let Some(e) = &self.expected {
            write_atomic(&dir.join(EXPECTED_FILE), &to_pretty_json(e)?)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let frame = load_frame(dir)?;
        let mut ground_truth_masks = BTreeMap::new();
        let mask_dir = dir.join(MASKS_DIR);
        let mut entries: Vec<_> = std::fs::read_dir(&mask_dir)?.collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(label) = name.strip_suffix(MASK_SUFFIX) {
                let mask: BinaryMask = read_json(&entry.path())?;
                mask.check_dims(frame.width(), frame.height())?;
                ground_truth_masks.insert(label.to_string(), mask);
            }
        }
        let confidences = read_json(&mask_dir.join(CONFIDENCES_FILE))?;
        let candidates: Vec<GraspCandidate> = read_json(&dir.join(GRASPS_FILE))?;
        let mut ids: Vec<u64> = candidates.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Fixture("duplicate candidate ids".into()));
        }
        let decomposition_table = read_json(&dir.join(DECOMPOSITION_FILE))?;
        let expected_path = dir.join(EXPECTED_FILE);
        let expected: Option<ExpectedOutcome> = if expected_path.exists() {
            Some(read_json(&expected_path)?)
        } else {
            None
        };
        if let Some(e) = &expected {
            e.validate()?;
        }
        Ok(Self {
            frame,
            ground_truth_masks,
            confidences,
            candidates,
            decomposition_table,
            expected,
        })
    }
}

// ---------------------------------------------------------------------------
// Part selection metric
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartSelectionVerdict {
    pub success: bool,
    pub labels_match: bool,
    /// |returned ∩ truth| / |truth| per expected part.
    pub coverage: BTreeMap<String, f64>,
}

/// Labels must match the expected set, and every expected part's returned
/// mask must cover at least `min_part_coverage` of its ground truth.
pub fn part_selection_verdict(
    decomposition: Option<&PartDecomposition>,
    segmentation: Option<&SegmentationResult>,
    expected: &ExpectedOutcome,
    ground_truth: &BTreeMap<String, BinaryMask>,
) -> PartSelectionVerdict {
    let mut want: Vec<String> = expected.expected_part_labels.iter().map(|l| l.trim().to_lowercase()).collect();
    want.sort();
    want.dedup();
    let labels_match = decomposition.map_or(false, |d| {
        let mut got = d.desirable_parts().to_vec();
        got.sort();
        got == want
    });
    let mut coverage = BTreeMap::new();
    let mut covered = labels_match;
    for label in &want {
        let c = match (segmentation.and_then(|s| s.part(label)), ground_truth.get(label)) {
            (Some(seg), Some(truth)) if truth.count_ones() > 0 => seg
                .mask
                .intersection_count(truth)
                .map_or(0.0, |n| n as f64 / truth.count_ones() as f64),
            _ => 0.0,
        };
        covered &= c >= expected.min_part_coverage;
        coverage.insert(label.clone(), c);
    }
    PartSelectionVerdict {
        success: labels_match && covered,
        labels_match,
        coverage,
    }
}

pub fn evaluate_part_selection(outcome: &PipelineOutcome, fixture: &SceneFixture) -> Result<PartSelectionVerdict> {
    let expected = fixture
        .expected
        .as_ref()
        .ok_or_else(|| Error::Fixture("fixture has no expected outcome".into()))?;
    Ok(part_selection_verdict(
        outcome.report.decomposition.as_ref(),
        outcome.segmentation.as_ref(),
        expected,
        &fixture.ground_truth_masks,
    ))
}

// ---------------------------------------------------------------------------
// Bundled suite
// ---------------------------------------------------------------------------

type TaskRow = (&'static str, &'static [&'static str], &'static [&'static str]);

const KNIFE_TASKS: &[TaskRow] = &[
    ("cut the vegetables", &["handle"], &["blade"]),
    ("hand over the knife", &["blade"], &["handle"]),
    ("spread butter on the toast", &["handle"], &["blade"]),
    ("wash the handle", &["blade"], &["handle"]),
];

const PAN_TASKS: &[TaskRow] = &[
    ("fry an egg", &["handle"], &["body"]),
    ("hand over the pan", &["body"], &["handle"]),
    ("stir the sauce in the pan", &["handle"], &["body"]),
    ("wipe the handle clean", &["body"], &["handle"]),
];

const BOTTLE_TASKS: &[TaskRow] = &[
    ("pour water into the glass", &["body"], &["cap"]),
    ("unscrew the cap", &["cap"], &["body"]),
    ("shake the bottle", &["body"], &[]),
    ("wipe the bottle body", &["cap"], &["body"]),
];

fn task_table(object: &str, rows: &[TaskRow]) -> FixtureTable {
    FixtureTable(
        rows.iter()
            .map(|(task, grasp, avoid)| {
                (
                    task.to_string(),
                    DecompositionReply {
                        object: object.to_string(),
                        grasp_parts: grasp.iter().map(|s| s.to_string()).collect(),
                        avoid_parts: avoid.iter().map(|s| s.to_string()).collect(),
                    },
                )
            })
            .collect(),
    )
}

fn object_for(kind: &str, offset: Vector3<f64>) -> (ObjectSpec, &'static [TaskRow]) {
    match kind {
        "knife" => (ObjectSpec::knife(offset), KNIFE_TASKS),
        "pan" => (ObjectSpec::pan(offset), PAN_TASKS),
        _ => (ObjectSpec::bottle(offset), BOTTLE_TASKS),
    }
}

fn jittered_offset(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(
        round3(rng.gen_range(-0.03..0.03)),
        round3(rng.gen_range(-0.02..0.02)),
        round3(rng.gen_range(-0.04..0.04)),
    )
}

fn with_task(scene: &GeneratedScene, table: &FixtureTable, row: &TaskRow, category: &str) -> SceneFixture {
    let (task, grasp, _) = row;
    let mut fixture = scene.fixture.clone();
    fixture.decomposition_table = table.clone();
    fixture.expected = Some(ExpectedOutcome {
        task: task.to_string(),
        expected_part_labels: grasp.iter().map(|s| s.to_string()).collect(),
        expected_winner_id: (grasp.len() == 1).then(|| scene.part_targets[grasp[0]]),
        min_part_coverage: 1.0,
        category: category.into(),
        occlusion_fraction: scene.occlusion_fraction.map(round3),
        expected_failure: None,
    });
    fixture
}

/// Clean single-object scenes (every object x every task) followed by
/// occluded scenes, named for their directory.
pub fn bundled_suite(seed: u64) -> Result<Vec<(String, SceneFixture)>> {
    let camera = default_camera();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for kind in ["knife", "pan", "bottle"] {
        let (object, rows) = object_for(kind, jittered_offset(&mut rng));
        let scene = generate_scene(&SceneSpec::single(object), &camera, rng.gen())?;
        let table = task_table(kind, rows);
        for (i, row) in rows.iter().enumerate() {
            out.push((format!("{kind}-task{i}"), with_task(&scene, &table, row, "single")));
        }
    }
    let clutter: [(&str, f64, OcclusionSide, usize); 5] = [
        ("knife", 0.20, OcclusionSide::Top, 0),
        ("pan", 0.35, OcclusionSide::Top, 1),
        ("bottle", 0.50, OcclusionSide::Left, 0),
        ("knife", 0.60, OcclusionSide::Top, 1),
        ("pan", 0.45, OcclusionSide::Left, 0),
    ];
    for (i, (kind, fraction, side, task)) in clutter.into_iter().enumerate() {
        let (object, rows) = object_for(kind, jittered_offset(&mut rng));
        let mut spec = SceneSpec::single(object);
        spec.occluder = Some(OccluderSpec { fraction, side });
        let scene = generate_scene(&spec, &camera, rng.gen())?;
        let table = task_table(kind, rows);
        out.push((format!("clutter{i}-{kind}"), with_task(&scene, &table, &rows[task], "clutter")));
    }
    Ok(out)
}

/// One knife scene broken in each of the ways the pipeline must report.
pub fn failure_fixtures(seed: u64) -> Result<Vec<(String, SceneFixture)>> {
    let camera = default_camera();
    let scene = generate_scene(&SceneSpec::single(ObjectSpec::knife(Vector3::zeros())), &camera, seed)?;
    let table = task_table("knife", KNIFE_TASKS);
    let base = with_task(&scene, &table, &KNIFE_TASKS[0], "failure");
    let task = KNIFE_TASKS[0].0.to_string();
    let mut out = Vec::new();

    let mut f = base.clone();
    f.decomposition_table.0.get_mut(&task).expect("task row").grasp_parts.clear();
    out.push((FailureClass::DecompositionFailure, f));

    let mut f = base.clone();
    f.ground_truth_masks.remove("knife");
    out.push((FailureClass::NoObjectSegment, f));

    let mut f = base.clone();
    let knife = f.ground_truth_masks["knife"].clone();
    let depth = f.frame.depth_mm_mut();
    for i in knife.set_indices() {
        depth[i] = 0;
    }
    out.push((FailureClass::EmptyCloud, f));

    let mut f = base;
    f.candidates.clear();
    out.push((FailureClass::NoCandidates, f));

    Ok(out
        .into_iter()
        .map(|(class, mut f)| {
            if let Some(e) = f.expected.as_mut() {
                e.expected_failure = Some(class);
                e.expected_winner_id = None;
            }
            (class.as_str().to_string(), f)
        })
        .collect())
}

/// Writes `<out>/suite/<name>` and `<out>/failures/<class>` directories.
pub fn write_bundled(out: &Path, seed: u64) -> Result<Vec<std::path::PathBuf>> {
    let mut written = Vec::new();
    for (sub, fixtures) in [("suite", bundled_suite(seed)?), ("failures", failure_fixtures(seed)?)] {
        for (name, fixture) in fixtures {
            let dir = out.join(sub).join(name);
            fixture.save(&dir)?;
            written.push(dir);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cuboid_and_cylinder_hits() {
        let b = Primitive::Cuboid { min: [-0.1, -0.1, 1.0], max: [0.1, 0.1, 1.2] };
        assert_eq!(b.intersect(&Vector3::new(0.0, 0.0, 1.0)), Some(1.0));
        assert_eq!(b.intersect(&Vector3::new(0.2, 0.0, 1.0)), None);
        let c = Primitive::UprightCylinder { center_x: 0.0, center_z: 1.0, radius: 0.1, y_min: -0.2, y_max: 0.2 };
        let t = c.intersect(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert!((t - 0.9).abs() < 1e-12);
        assert_eq!(c.intersect(&Vector3::new(0.0, 0.5, 1.0)), None);
        // looking up at the underside cap of a cylinder above the camera
        let above = Primitive::UprightCylinder { center_x: 0.0, center_z: 1.0, radius: 0.3, y_min: -0.5, y_max: -0.2 };
        let t = above.intersect(&Vector3::new(0.0, -0.25, 1.0)).unwrap();
        assert!((t * -0.25 - -0.2).abs() < 1e-12);
    }

    #[test]
    fn fronto_parallel_cube_area() {
        // a 1 m cube at 1 m overflows a 640x480 frame at f = 500, so a
        // 0.2 m cube stands in
        let side = 0.2;
        let spec = SceneSpec {
            author_candidates: false,
            ..SceneSpec::single(ObjectSpec::cube("box", Point3::new(0.0, 0.0, 1.0), side))
        };
        let g = generate_scene(&spec, &default_camera(), 1).unwrap();
        let face_z = 1.0 - side / 2.0;
        let predicted = (side * 500.0 / face_z).powi(2);
        let count = g.fixture.ground_truth_masks["box"].count_ones() as f64;
        assert!((count - predicted).abs() / predicted < 0.02, "{count} vs {predicted}");
        // every box pixel sits on the front face
        let mm = (face_z * 1000.0).round() as u16;
        for i in g.fixture.ground_truth_masks["box"].set_indices() {
            assert_eq!(g.fixture.frame.depth_mm()[i], mm);
        }
    }

    #[test]
    fn oversized_cube_is_out_of_frustum() {
        let spec = SceneSpec::single(ObjectSpec::cube("box", Point3::new(0.0, 0.0, 1.0), 1.0));
        assert!(matches!(generate_scene(&spec, &default_camera(), 0), Err(Error::Generation(_))));
        let behind = SceneSpec::single(ObjectSpec::cube("box", Point3::new(0.0, 0.0, -2.0), 0.2));
        assert!(generate_scene(&behind, &default_camera(), 0).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SceneSpec::single(ObjectSpec::knife(Vector3::zeros()));
        let a = generate_scene(&spec, &default_camera(), 7).unwrap();
        let b = generate_scene_with(&spec, &default_camera(), 7, Execution::Sequential).unwrap();
        assert_eq!(a, b);
        let da = tempfile::tempdir().unwrap();
        let db = tempfile::tempdir().unwrap();
        a.fixture.save(da.path()).unwrap();
        b.fixture.save(db.path()).unwrap();
        for f in [COLOR_FILE, DEPTH_FILE, GRASPS_FILE, "masks/knife.mask.json"] {
            assert_eq!(std::fs::read(da.path().join(f)).unwrap(), std::fs::read(db.path().join(f)).unwrap());
        }
    }

    #[test]
    fn knife_parts_partition_object() {
        let g = generate_scene(&SceneSpec::single(ObjectSpec::knife(Vector3::zeros())), &default_camera(), 3).unwrap();
        let m = &g.fixture.ground_truth_masks;
        assert_eq!(m["handle"].intersection_count(&m["blade"]).unwrap(), 0);
        assert_eq!(m["handle"].union(&m["blade"]).unwrap(), m["knife"]);
    }

    #[test]
    fn depth_consistent_with_masks() {
        let g = generate_scene(&SceneSpec::single(ObjectSpec::bottle(Vector3::zeros())), &default_camera(), 3).unwrap();
        let bottle = g.fixture.ground_truth_masks["bottle"].decode().unwrap();
        for (i, &d) in g.fixture.frame.depth_mm().iter().enumerate() {
            if bottle[i] == 1 {
                assert!(d > 0 && d < 1200);
            } else {
                assert_eq!(d, 1200);
            }
        }
    }

    #[test]
    fn fixture_round_trips_through_directory() {
        let g = generate_scene(&SceneSpec::single(ObjectSpec::pan(Vector3::zeros())), &default_camera(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        g.fixture.save(dir.path()).unwrap();
        let back = SceneFixture::load(dir.path()).unwrap();
        assert_eq!(back, g.fixture);
    }

    #[test]
    fn occluder_hits_requested_fraction() {
        let cases = [
            (ObjectSpec::knife(Vector3::zeros()), 0.2, OcclusionSide::Top),
            (ObjectSpec::knife(Vector3::zeros()), 0.6, OcclusionSide::Top),
            (ObjectSpec::bottle(Vector3::zeros()), 0.5, OcclusionSide::Left),
            (ObjectSpec::pan(Vector3::zeros()), 0.45, OcclusionSide::Left),
        ];
        for (object, fraction, side) in cases {
            let name = object.name.clone();
            let labels: Vec<String> = object.parts.iter().map(|p| p.label.clone()).collect();
            let mut spec = SceneSpec::single(object);
            spec.occluder = Some(OccluderSpec { fraction, side });
            let g = generate_scene(&spec, &default_camera(), 1).unwrap();
            let got = g.occlusion_fraction.unwrap();
            assert!((got - fraction).abs() < 0.05, "{name}: {got} vs {fraction}");
            let m = &g.fixture.ground_truth_masks;
            assert_eq!(m[&labels[0]].union(&m[&labels[1]]).unwrap(), m[&name]);
            assert_eq!(m[&name].intersection_count(&m[OCCLUDER_LABEL]).unwrap(), 0);
        }
    }

    #[test]
    fn fully_hidden_part_is_a_generation_error() {
        // half the knife from the left is the whole handle
        let mut spec = SceneSpec::single(ObjectSpec::knife(Vector3::zeros()));
        spec.occluder = Some(OccluderSpec { fraction: 0.5, side: OcclusionSide::Left });
        assert!(matches!(generate_scene(&spec, &default_camera(), 1), Err(Error::Generation(_))));
    }

    #[test]
    fn part_selection_coverage_rules() {
        let truth = BinaryMask::from_fn(10, 10, |u, _| u < 5);
        let mut gt = BTreeMap::new();
        gt.insert("handle".to_string(), truth.clone());
        let expected = ExpectedOutcome {
            task: "t".into(),
            expected_part_labels: vec!["handle".into()],
            expected_winner_id: None,
            min_part_coverage: 1.0,
            category: "single".into(),
            occlusion_fraction: None,
            expected_failure: None,
        };
        let d = PartDecomposition::new("knife", ["handle"], ["blade"]).unwrap();
        let seg = |m: BinaryMask| SegmentationResult {
            object_segment: None,
            part_segments: vec![crate::model::PartSegment::new("handle", m, 0.9).unwrap()],
            missing_labels: vec![],
        };
        let v = part_selection_verdict(Some(&d), Some(&seg(truth.clone())), &expected, &gt);
        assert!(v.success);
        assert_eq!(v.coverage["handle"], 1.0);
        // drop 10% of the truth pixels
        let partial = BinaryMask::from_fn(10, 10, |u, v| u < 5 && !(u == 0 && v < 5));
        let v = part_selection_verdict(Some(&d), Some(&seg(partial)), &expected, &gt);
        assert!(!v.success);
        assert!((v.coverage["handle"] - 0.9).abs() < 1e-12);
        let wrong = PartDecomposition::new("knife", ["blade"], ["handle"]).unwrap();
        assert!(!part_selection_verdict(Some(&wrong), Some(&seg(truth)), &expected, &gt).success);
    }
}

//! Shared domain types and their JSON forms.
//!
//! All 3D quantities live in the camera optical frame: +x right, +y down,
//! +z forward, meters.

use nalgebra::{Matrix3, Point3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawIntrinsics")]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Deserialize)]
struct RawIntrinsics {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

impl TryFrom<RawIntrinsics> for CameraIntrinsics {
    type Error = Error;

    fn try_from(r: RawIntrinsics) -> Result<Self> {
        CameraIntrinsics::new(r.fx, r.fy, r.cx, r.cy)
    }
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fx.is_finite() && fy > 0.0 && fy.is_finite()) {
            return Err(Error::invalid(
                "intrinsics",
                format!("focal lengths must be positive, got fx={fx} fy={fy}"),
            ));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::invalid("intrinsics", "principal point must be finite"));
        }
        Ok(Self { fx, fy, cx, cy })
    }
}

/// Registered color + depth raster. Depth is stored in millimeters, 0 means
/// no measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawFrame")]
pub struct RgbdFrame {
    width: u32,
    height: u32,
    color: Vec<[u8; 3]>,
    depth: Vec<u16>,
    intrinsics: CameraIntrinsics,
}

#[derive(Deserialize)]
struct RawFrame {
    width: u32,
    height: u32,
    color: Vec<[u8; 3]>,
    depth: Vec<u16>,
    intrinsics: CameraIntrinsics,
}

impl TryFrom<RawFrame> for RgbdFrame {
    type Error = Error;

    fn try_from(r: RawFrame) -> Result<Self> {
        RgbdFrame::new(r.width, r.height, r.color, r.depth, r.intrinsics)
    }
}

impl RgbdFrame {
    pub fn new(
        width: u32,
        height: u32,
        color: Vec<[u8; 3]>,
        depth: Vec<u16>,
        intrinsics: CameraIntrinsics,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!(
                "frame must be at least 1x1, got {width}x{height}"
            )));
        }
        let n = width as usize * height as usize;
        if color.len() != n || depth.len() != n {
            return Err(Error::Dimension(format!(
                "{width}x{height} frame needs {n} pixels, got {} color and {} depth",
                color.len(),
                depth.len()
            )));
        }
        Ok(Self {
            width,
            height,
            color,
            depth,
            intrinsics,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intrinsics
    }

    pub fn color(&self) -> &[[u8; 3]] {
        &self.color
    }

    pub fn depth_mm(&self) -> &[u16] {
        &self.depth
    }

    pub fn depth_mm_mut(&mut self) -> &mut [u16] {
        &mut self.depth
    }

    /// Depth at a pixel in meters, `None` when unmeasured.
    pub fn depth_m(&self, u: u32, v: u32) -> Option<f64> {
        let d = self.depth[v as usize * self.width as usize + u as usize];
        (d > 0).then(|| d as f64 / 1000.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTask")]
pub struct TaskRequest {
    pub task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_hint: Option<String>,
}

#[derive(Deserialize)]
struct RawTask {
    task: String,
    #[serde(default)]
    object_hint: Option<String>,
}

impl TryFrom<RawTask> for TaskRequest {
    type Error = Error;

    fn try_from(r: RawTask) -> Result<Self> {
        let mut t = TaskRequest::new(r.task)?;
        t.object_hint = r.object_hint;
        Ok(t)
    }
}

impl TaskRequest {
    pub fn new(task: impl Into<String>) -> Result<Self> {
        let task = task.into();
        if task.trim().is_empty() {
            return Err(Error::invalid("task", "task text is empty"));
        }
        Ok(Self {
            task,
            object_hint: None,
        })
    }
}

/// Lowercases, trims, drops empties and removes duplicates, keeping first
/// occurrence order.
pub fn normalize_part_names<I, S>(names: I) -> Vec<String>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut out: Vec<String> = Vec::new();
    for n in names {
        let n = n.as_ref().trim().to_lowercase();
        if !n.is_empty() && !out.contains(&n) {
            out.push(n);
        }
    }
    out
}

/// Object name with the parts to grasp and the parts to avoid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawDecomposition")]
pub struct PartDecomposition {
    object_name: String,
    desirable_parts: Vec<String>,
    undesirable_parts: Vec<String>,
}

#[derive(Deserialize)]
struct RawDecomposition {
    object_name: String,
    desirable_parts: Vec<String>,
    #[serde(default)]
    undesirable_parts: Vec<String>,
}

impl TryFrom<RawDecomposition> for PartDecomposition {
    type Error = Error;

    fn try_from(r: RawDecomposition) -> Result<Self> {
        PartDecomposition::new(r.object_name, r.desirable_parts, r.undesirable_parts)
    }
}

impl PartDecomposition {
    /// Normalizes all names and enforces the decomposition invariants.
    pub fn new<S: AsRef<str>>(
        object_name: impl AsRef<str>,
        desirable: impl IntoIterator<Item = S>,
        undesirable: impl IntoIterator<Item = S>,
    ) -> Result<Self> {
        let object_name = object_name.as_ref().trim().to_lowercase();
        if object_name.is_empty() {
            return Err(Error::InvalidDecomposition("object name is empty".into()));
        }
        let desirable_parts = normalize_part_names(desirable);
        let undesirable_parts = normalize_part_names(undesirable);
        if desirable_parts.is_empty() {
            return Err(Error::InvalidDecomposition(format!(
                "no graspable part named for {object_name:?}"
            )));
        }
        if let Some(dup) = desirable_parts
            .iter()
            .find(|p| undesirable_parts.contains(p))
        {
            return Err(Error::InvalidDecomposition(format!(
                "part {dup:?} is listed as both grasp and avoid"
            )));
        }
        Ok(Self {
            object_name,
            desirable_parts,
            undesirable_parts,
        })
    }

    pub fn object_name(&self) -> &str {
        &self.object_name
    }

    pub fn desirable_parts(&self) -> &[String] {
        &self.desirable_parts
    }

    pub fn undesirable_parts(&self) -> &[String] {
        &self.undesirable_parts
    }

    /// Desirable then undesirable part labels.
    pub fn all_parts(&self) -> Vec<String> {
        self.desirable_parts
            .iter()
            .chain(&self.undesirable_parts)
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSegment")]
pub struct PartSegment {
    pub label: String,
    pub mask: BinaryMask,
    confidence: f64,
}

#[derive(Deserialize)]
struct RawSegment {
    label: String,
    mask: BinaryMask,
    confidence: f64,
}

impl TryFrom<RawSegment> for PartSegment {
    type Error = Error;

    fn try_from(r: RawSegment) -> Result<Self> {
        PartSegment::new(r.label, r.mask, r.confidence)
    }
}

impl PartSegment {
    pub fn new(label: impl Into<String>, mask: BinaryMask, confidence: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::invalid(
                "segment",
                format!("confidence {confidence} outside [0, 1]"),
            ));
        }
        Ok(Self {
            label: label.into(),
            mask,
            confidence,
        })
    }

    pub fn confidence(&self) -> f64 {
        self.confidence
    }
}

/// Rigid end-effector pose. The third rotation column is the approach axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPose", into = "RawPose")]
pub struct GraspPose {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawPose {
    /// w, x, y, z
    quaternion: [f64; 4],
    translation: [f64; 3],
}

impl TryFrom<RawPose> for GraspPose {
    type Error = Error;

    fn try_from(r: RawPose) -> Result<Self> {
        GraspPose::from_wxyz(r.quaternion, r.translation)
    }
}

impl From<GraspPose> for RawPose {
    fn from(p: GraspPose) -> Self {
        let q = p.rotation.quaternion();
        RawPose {
            quaternion: [q.w, q.i, q.j, q.k],
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

/// Maximum deviation of a quaternion norm from 1 accepted on input.
pub const QUATERNION_NORM_TOLERANCE: f64 = 1e-6;

impl GraspPose {
    pub fn from_wxyz(q: [f64; 4], translation: [f64; 3]) -> Result<Self> {
        if q.iter().chain(&translation).any(|x| !x.is_finite()) {
            return Err(Error::invalid("pose", "non-finite component"));
        }
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        let norm = quat.norm();
        if (norm - 1.0).abs() > QUATERNION_NORM_TOLERANCE {
            return Err(Error::invalid(
                "pose",
                format!("quaternion norm {norm} is not unit"),
            ));
        }
        // already-normalized input is kept bit-exact so JSON round-trips
        let rotation = if (norm - 1.0).abs() <= 1e-9 {
            UnitQuaternion::new_unchecked(quat)
        } else {
            UnitQuaternion::new_normalize(quat)
        };
        Ok(Self {
            rotation,
            translation: Vector3::from(translation),
        })
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Builds a pose from a rotation matrix, rejecting matrices that are not
    /// orthonormal within 1e-6.
    pub fn from_matrix(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if err > 1e-6 || (rotation.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::invalid("pose", "rotation is not orthonormal"));
        }
        let rot = nalgebra::Rotation3::from_matrix_unchecked(rotation);
        Ok(Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation))
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn origin(&self) -> Point3<f64> {
        Point3::from(self.translation)
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn approach_axis(&self) -> Vector3<f64> {
        self.rotation_matrix().column(2).into_owned()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCandidate")]
pub struct GraspCandidate {
    pub id: u64,
    pub pose: GraspPose,
    pub contact_point: Point3<f64>,
    #[serde(rename = "confidence")]
    generator_confidence: f64,
}

#[derive(Deserialize)]
struct RawCandidate {
    id: u64,
    pose: GraspPose,
    contact_point: Point3<f64>,
    confidence: f64,
}

impl TryFrom<RawCandidate> for GraspCandidate {
    type Error = Error;

    fn try_from(r: RawCandidate) -> Result<Self> {
        GraspCandidate::new(r.id, r.pose, r.contact_point, r.confidence)
    }
}

impl GraspCandidate {
    pub fn new(
        id: u64,
        pose: GraspPose,
        contact_point: Point3<f64>,
        generator_confidence: f64,
    ) -> Result<Self> {
        if !contact_point.coords.iter().all(|c| c.is_finite()) {
            return Err(Error::invalid("grasp candidate", "contact point not finite"));
        }
        if !(0.0..=1.0).contains(&generator_confidence) {
            return Err(Error::invalid(
                "grasp candidate",
                format!("confidence {generator_confidence} outside [0, 1]"),
            ));
        }
        Ok(Self {
            id,
            pose,
            contact_point,
            generator_confidence,
        })
    }

    pub fn generator_confidence(&self) -> f64 {
        self.generator_confidence
    }
}

/// A scored candidate. `total_score` is always `contact_score + zaxis_score`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRanked")]
pub struct RankedGrasp {
    candidate: GraspCandidate,
    contact_score: f64,
    zaxis_score: f64,
    total_score: f64,
    contact_pixel: Option<[f64; 2]>,
    zaxis_pixel: Option<[u32; 2]>,
}

#[derive(Deserialize)]
struct RawRanked {
    candidate: GraspCandidate,
    contact_score: f64,
    zaxis_score: f64,
    total_score: f64,
    contact_pixel: Option<[f64; 2]>,
    zaxis_pixel: Option<[u32; 2]>,
}

impl TryFrom<RawRanked> for RankedGrasp {
    type Error = Error;

    fn try_from(r: RawRanked) -> Result<Self> {
        let g = RankedGrasp::new(
            r.candidate,
            r.contact_score,
            r.zaxis_score,
            r.contact_pixel,
            r.zaxis_pixel,
        );
        if g.total_score.to_bits() != r.total_score.to_bits() {
            return Err(Error::invalid(
                "ranked grasp",
                "total_score differs from contact_score + zaxis_score",
            ));
        }
        Ok(g)
    }
}

impl RankedGrasp {
    pub fn new(
        candidate: GraspCandidate,
        contact_score: f64,
        zaxis_score: f64,
        contact_pixel: Option<[f64; 2]>,
        zaxis_pixel: Option<[u32; 2]>,
    ) -> Self {
        Self {
            candidate,
            contact_score,
            zaxis_score,
            total_score: contact_score + zaxis_score,
            contact_pixel,
            zaxis_pixel,
        }
    }

    pub fn candidate(&self) -> &GraspCandidate {
        &self.candidate
    }

    pub fn id(&self) -> u64 {
        self.candidate.id
    }

    pub fn contact_score(&self) -> f64 {
        self.contact_score
    }

    pub fn zaxis_score(&self) -> f64 {
        self.zaxis_score
    }

    pub fn total_score(&self) -> f64 {
        self.total_score
    }

    /// Projected contact point; `None` when it lies behind the camera.
    pub fn contact_pixel(&self) -> Option<[f64; 2]> {
        self.contact_pixel
    }

    /// Source pixel of the cloud point nearest the approach axis.
    pub fn zaxis_pixel(&self) -> Option<[u32; 2]> {
        self.zaxis_pixel
    }
}

/// Object points in meters with the pixel each one was deprojected from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCloud")]
pub struct ObjectPointCloud {
    points: Vec<Point3<f64>>,
    source_pixels: Vec<[u32; 2]>,
}

#[derive(Deserialize)]
struct RawCloud {
    points: Vec<Point3<f64>>,
    source_pixels: Vec<[u32; 2]>,
}

impl TryFrom<RawCloud> for ObjectPointCloud {
    type Error = Error;

    fn try_from(r: RawCloud) -> Result<Self> {
        ObjectPointCloud::new(r.points, r.source_pixels)
    }
}

impl ObjectPointCloud {
    pub fn new(points: Vec<Point3<f64>>, source_pixels: Vec<[u32; 2]>) -> Result<Self> {
        if points.len() != source_pixels.len() {
            return Err(Error::Dimension(format!(
                "{} points but {} source pixels",
                points.len(),
                source_pixels.len()
            )));
        }
        if let Some(p) = points.iter().find(|p| !(p.z > 0.0)) {
            return Err(Error::invalid(
                "point cloud",
                format!("point {p:?} is not in front of the camera"),
            ));
        }
        Ok(Self {
            points,
            source_pixels,
        })
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    pub fn source_pixels(&self) -> &[[u32; 2]] {
        &self.source_pixels
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap()
    }

    #[test]
    fn intrinsics_reject_bad_focal() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
        assert!(CameraIntrinsics::new(1.0, -1.0, 0.0, 0.0).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, f64::NAN, 0.0).is_err());
        assert!(serde_json::from_str::<CameraIntrinsics>(
            r#"{"fx":0,"fy":1,"cx":0,"cy":0}"#
        )
        .is_err());
    }

    #[test]
    fn frame_checks_dims() {
        assert!(RgbdFrame::new(2, 2, vec![[0; 3]; 4], vec![0; 3], intr()).is_err());
        assert!(RgbdFrame::new(0, 2, vec![], vec![], intr()).is_err());
        let f = RgbdFrame::new(2, 1, vec![[0; 3]; 2], vec![0, 1500], intr()).unwrap();
        assert_eq!(f.depth_m(0, 0), None);
        assert_eq!(f.depth_m(1, 0), Some(1.5));
        let json = serde_json::to_string(&f).unwrap();
        assert_eq!(serde_json::from_str::<RgbdFrame>(&json).unwrap(), f);
    }

    #[test]
    fn task_must_be_non_blank() {
        assert!(TaskRequest::new("   ").is_err());
        assert!(serde_json::from_str::<TaskRequest>(r#"{"task":" "}"#).is_err());
        assert_eq!(TaskRequest::new("pour tea").unwrap().task, "pour tea");
    }

    #[test]
    fn decomposition_normalizes_and_validates() {
        let d = PartDecomposition::new(" Knife ", [" Handle", "handle", ""], ["BLADE "]).unwrap();
        assert_eq!(d.object_name(), "knife");
        assert_eq!(d.desirable_parts(), ["handle"]);
        assert_eq!(d.undesirable_parts(), ["blade"]);
        assert!(matches!(
            PartDecomposition::new("knife", Vec::<&str>::new(), vec!["blade"]),
            Err(Error::InvalidDecomposition(_))
        ));
        assert!(matches!(
            PartDecomposition::new("knife", ["Blade"], ["blade "]),
            Err(Error::InvalidDecomposition(_))
        ));
        assert!(PartDecomposition::new(" ", ["a"], ["b"]).is_err());
    }

    #[test]
    fn segment_confidence_range() {
        let m = BinaryMask::empty(2, 2);
        assert!(PartSegment::new("a", m.clone(), 1.2).is_err());
        assert!(PartSegment::new("a", m.clone(), f64::NAN).is_err());
        assert!(PartSegment::new("a", m, 0.0).is_ok());
    }

    #[test]
    fn pose_approach_axis_is_third_column() {
        // 90 degrees about x maps z to -y
        let q = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::FRAC_PI_2);
        let pose = GraspPose::new(q, Vector3::new(0.0, 0.0, 1.0));
        let z = pose.approach_axis();
        assert!((z - Vector3::new(0.0, -1.0, 0.0)).norm() < 1e-12);
        assert!(GraspPose::from_wxyz([2.0, 0.0, 0.0, 0.0], [0.0; 3]).is_err());
        assert!(GraspPose::from_wxyz([1.0 + 5e-7, 0.0, 0.0, 0.0], [0.0; 3]).is_ok());
        let bad = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(GraspPose::from_matrix(bad, Vector3::zeros()).is_err());
    }

    #[test]
    fn candidate_json_form() {
        let json = r#"{"id":3,"pose":{"quaternion":[1,0,0,0],"translation":[0,0,0.5]},
                       "contact_point":[0.01,0.0,0.6],"confidence":0.7}"#;
        let c: GraspCandidate = serde_json::from_str(json).unwrap();
        assert_eq!(c.id, 3);
        assert_eq!(c.generator_confidence(), 0.7);
        let back = serde_json::to_string(&c).unwrap();
        assert!(back.contains("\"confidence\":0.7"));
        assert!(serde_json::from_str::<GraspCandidate>(
            &json.replace("0.7", "1.5")
        )
        .is_err());
    }

    #[test]
    fn ranked_total_is_sum() {
        let c = GraspCandidate::new(
            0,
            GraspPose::from_wxyz([1.0, 0.0, 0.0, 0.0], [0.0; 3]).unwrap(),
            Point3::new(0.0, 0.0, 1.0),
            0.5,
        )
        .unwrap();
        let r = RankedGrasp::new(c, 200.0, 100.0, Some([1.0, 2.0]), Some([3, 4]));
        assert_eq!(r.total_score(), 300.0);
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<RankedGrasp>(&json).unwrap(), r);
        let tampered = json.replace("\"total_score\":300.0", "\"total_score\":301.0");
        assert!(serde_json::from_str::<RankedGrasp>(&tampered).is_err());
    }

    #[test]
    fn cloud_invariants() {
        assert!(ObjectPointCloud::new(vec![Point3::new(0.0, 0.0, 1.0)], vec![]).is_err());
        assert!(ObjectPointCloud::new(vec![Point3::new(0.0, 0.0, 0.0)], vec![[0, 0]]).is_err());
    }

    proptest! {
        #[test]
        fn pose_and_candidate_json_round_trip(
            w in -1.0f64..1.0, x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0,
            t in proptest::array::uniform3(-2.0f64..2.0),
            conf in 0.0f64..=1.0,
            id in 0u64..1000,
        ) {
            let n = (w * w + x * x + y * y + z * z).sqrt();
            prop_assume!(n > 1e-3);
            let pose = GraspPose::from_wxyz([w / n, x / n, y / n, z / n], t).unwrap();
            let r = pose.rotation_matrix();
            prop_assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-6);
            let c = GraspCandidate::new(id, pose, Point3::new(t[0], t[1], t[2] + 3.0), conf).unwrap();
            let json = serde_json::to_string(&c).unwrap();
            let back: GraspCandidate = serde_json::from_str(&json).unwrap();
            prop_assert_eq!(serde_json::to_string(&back).unwrap(), json);
        }
    }
}

//! Pinhole projection, object cloud extraction and nearest-point-to-line
//! queries.

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::mask::BinaryMask;
use crate::model::{CameraIntrinsics, ObjectPointCloud, RgbdFrame};

/// Pixel `(u, v)` for a camera-frame point.
pub fn project(point: &Point3<f64>, intrinsics: &CameraIntrinsics) -> Result<(f64, f64)> {
    if !(point.z > 0.0) {
        return Err(Error::BehindCamera(point.z));
    }
    Ok((
        intrinsics.fx * point.x / point.z + intrinsics.cx,
        intrinsics.fy * point.y / point.z + intrinsics.cy,
    ))
}

pub fn deproject(pixel: (f64, f64), depth_m: f64, intrinsics: &CameraIntrinsics) -> Result<Point3<f64>> {
    if !(depth_m > 0.0) || !depth_m.is_finite() {
        return Err(Error::InvalidDepth(depth_m));
    }
    let (u, v) = pixel;
    Ok(Point3::new(
        (u - intrinsics.cx) * depth_m / intrinsics.fx,
        (v - intrinsics.cy) * depth_m / intrinsics.fy,
        depth_m,
    ))
}

/// One point per masked pixel with a valid depth reading.
pub fn extract_object_cloud(frame: &RgbdFrame, object_mask: &BinaryMask) -> Result<ObjectPointCloud> {
    let (w, _) = frame.dims();
    object_mask.check_dims(frame.width(), frame.height())?;
    let intr = frame.intrinsics();
    let depth = frame.depth_mm();
    let mut points = Vec::new();
    let mut pixels = Vec::new();
    for idx in object_mask.set_indices() {
        let d = depth[idx];
        if d == 0 {
            continue;
        }
        let (u, v) = ((idx % w as usize) as u32, (idx / w as usize) as u32);
        let p = deproject((u as f64, v as f64), d as f64 / 1000.0, intr)?;
        points.push(p);
        pixels.push([u, v]);
    }
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    ObjectPointCloud::new(points, pixels)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line3 {
    origin: Point3<f64>,
    direction: Vector3<f64>,
}

impl Line3 {
    /// Normalizes `direction`; fails on a zero or non-finite vector.
    pub fn new(origin: Point3<f64>, direction: Vector3<f64>) -> Result<Self> {
        let n = direction.norm();
        if !(n > 0.0) || !n.is_finite() || !origin.coords.iter().all(|c| c.is_finite()) {
            return Err(Error::invalid("line", "direction must be a finite nonzero vector"));
        }
        Ok(Self {
            origin,
            direction: direction / n,
        })
    }

    pub fn origin(&self) -> &Point3<f64> {
        &self.origin
    }

    pub fn direction(&self) -> &Vector3<f64> {
        &self.direction
    }
}

/// Whether the approach axis is the whole line or only the half-line ahead
/// of the gripper origin.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisExtent {
    #[default]
    Line,
    Ray,
}

/// Perpendicular distance `|(q - origin) x direction|`; for a ray, points
/// behind the origin measure to the origin itself.
pub fn distance_to_axis(q: &Point3<f64>, line: &Line3, extent: AxisExtent) -> f64 {
    let rel = q - line.origin;
    if extent == AxisExtent::Ray && rel.dot(&line.direction) < 0.0 {
        return rel.norm();
    }
    rel.cross(&line.direction).norm()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NearestPoint {
    pub index: usize,
    pub point: Point3<f64>,
    pub pixel: [u32; 2],
    pub distance: f64,
}

pub fn nearest_point_to_line(cloud: &ObjectPointCloud, line: &Line3) -> Result<NearestPoint> {
    nearest_point_to_axis(cloud, line, AxisExtent::Line, Execution::default())
}

/// Exhaustive scan; ties go to the lowest point index in both execution
/// modes.
pub fn nearest_point_to_axis(
    cloud: &ObjectPointCloud,
    line: &Line3,
    extent: AxisExtent,
    exec: Execution,
) -> Result<NearestPoint> {
    let points = cloud.points();
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let better = |a: (f64, usize), b: (f64, usize)| {
        if b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)).is_lt() {
            b
        } else {
            a
        }
    };
    let best = if exec.is_parallel() {
        par_min(points, line, extent, better)
    } else {
        points
            .iter()
            .enumerate()
            .map(|(i, p)| (distance_to_axis(p, line, extent), i))
            .fold((f64::INFINITY, usize::MAX), better)
    };
    let index = best.1;
    Ok(NearestPoint {
        index,
        point: points[index],
        pixel: cloud.source_pixels()[index],
        distance: best.0,
    })
}

#[cfg(feature = "parallel")]
fn par_min(
    points: &[Point3<f64>],
    line: &Line3,
    extent: AxisExtent,
    better: impl Fn((f64, usize), (f64, usize)) -> (f64, usize) + Sync + Send,
) -> (f64, usize) {
    use rayon::prelude::*;
    points
        .par_iter()
        .enumerate()
        .map(|(i, p)| (distance_to_axis(p, line, extent), i))
        .reduce(|| (f64::INFINITY, usize::MAX), &better)
}

#[cfg(not(feature = "parallel"))]
fn par_min(
    points: &[Point3<f64>],
    line: &Line3,
    extent: AxisExtent,
    better: impl Fn((f64, usize), (f64, usize)) -> (f64, usize),
) -> (f64, usize) {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| (distance_to_axis(p, line, extent), i))
        .fold((f64::INFINITY, usize::MAX), better)
}

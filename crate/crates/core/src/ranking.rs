//! Grasp scoring against an affordance heatmap.
//!
//! Each candidate gets a contact score (heatmap at the projected contact
//! point) and an approach score (heatmap at the source pixel of the object
//! point nearest the gripper's approach axis). Candidates are ordered by the
//! sum, then by generator confidence, then by id.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::geometry::{self, AxisExtent, Line3};
use crate::heatmap::{self, AffordanceHeatmap};
use crate::model::{CameraIntrinsics, GraspCandidate, ObjectPointCloud, RankedGrasp};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    #[default]
    GeneratorConfidenceThenId,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankingConfig {
    pub zaxis_mode: AxisExtent,
    pub tie_break: TieBreak,
}

pub fn score_candidate(
    candidate: &GraspCandidate,
    heatmap: &AffordanceHeatmap,
    cloud: &ObjectPointCloud,
    intrinsics: &CameraIntrinsics,
    config: &RankingConfig,
) -> Result<RankedGrasp> {
    score_with(candidate, heatmap, cloud, intrinsics, config, Execution::Sequential)
}

fn score_with(
    candidate: &GraspCandidate,
    heatmap: &AffordanceHeatmap,
    cloud: &ObjectPointCloud,
    intrinsics: &CameraIntrinsics,
    config: &RankingConfig,
    exec: Execution,
) -> Result<RankedGrasp> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let contact_pixel = geometry::project(&candidate.contact_point, intrinsics).ok();
    let contact_score = contact_pixel.map_or(0.0, |px| heatmap::sample(heatmap, px));

    let axis = Line3::new(candidate.pose.origin(), candidate.pose.approach_axis())?;
    let nearest = geometry::nearest_point_to_axis(cloud, &axis, config.zaxis_mode, exec)?;
    let [xp, yp] = nearest.pixel;
    let zaxis_score = heatmap::sample(heatmap, (xp as f64, yp as f64));

    Ok(RankedGrasp::new(
        candidate.clone(),
        contact_score,
        zaxis_score,
        contact_pixel.map(|(u, v)| [u, v]),
        Some(nearest.pixel),
    ))
}

/// Descending total score, then higher generator confidence, then lower id.
pub fn ranking_order(a: &RankedGrasp, b: &RankedGrasp) -> Ordering {
    b.total_score()
        .total_cmp(&a.total_score())
        .then_with(|| {
            b.candidate()
                .generator_confidence()
                .total_cmp(&a.candidate().generator_confidence())
        })
        .then_with(|| a.id().cmp(&b.id()))
}

pub fn rank(
    candidates: &[GraspCandidate],
    heatmap: &AffordanceHeatmap,
    cloud: &ObjectPointCloud,
    intrinsics: &CameraIntrinsics,
    config: &RankingConfig,
) -> Result<Vec<RankedGrasp>> {
    rank_with(candidates, heatmap, cloud, intrinsics, config, Execution::default())
}

/// Parallel mode scores candidates concurrently; the order is identical to
/// sequential evaluation.
pub fn rank_with(
    candidates: &[GraspCandidate],
    heatmap: &AffordanceHeatmap,
    cloud: &ObjectPointCloud,
    intrinsics: &CameraIntrinsics,
    config: &RankingConfig,
    exec: Execution,
) -> Result<Vec<RankedGrasp>> {
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    let scored = exec.map(candidates, |c| {
        score_with(c, heatmap, cloud, intrinsics, config, Execution::Sequential)
    });
    let mut ranked = scored.into_iter().collect::<Result<Vec<_>>>()?;
    ranked.sort_by(ranking_order);
    Ok(ranked)
}

/// Warnings for candidates whose contact point sat behind the camera.
pub fn behind_camera_warnings(ranked: &[RankedGrasp]) -> Vec<String> {
    let mut ids: Vec<u64> = ranked
        .iter()
        .filter(|g| g.contact_pixel().is_none())
        .map(RankedGrasp::id)
        .collect();
    ids.sort_unstable();
    ids.into_iter()
        .map(|id| format!("candidate {id}: contact point behind camera, contact score set to 0"))
        .collect()
}

/// The grasp target: the first ranked grasp.
pub fn select_target(ranked: &[RankedGrasp]) -> Result<&RankedGrasp> {
    ranked.first().ok_or(Error::NoCandidates)
}

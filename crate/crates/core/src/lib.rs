//! Task-oriented grasp filtering.
//!
//! A task string is decomposed into parts to grasp and parts to avoid, the
//! parts are segmented in an RGB-D frame, and the masks are composed into a
//! signed affordance heatmap. Grasp candidates are then scored by looking up
//! the heatmap at their projected contact point and at the object point
//! nearest to their approach axis, and ranked by the sum of both lookups.
//!
//! The `parallel` feature (on by default) runs the data-parallel inner loops
//! on rayon. Without it every `Execution::Parallel` request falls back to the
//! sequential path, which produces bitwise-identical results.

pub mod decomposition;
pub mod error;
pub mod exec;
pub mod geometry;
pub mod heatmap;
pub mod mask;
pub mod model;
pub mod pipeline;
pub mod ranking;
pub mod scene;
pub mod segmentation;

pub use error::{Error, Result};
pub use exec::Execution;
pub use mask::BinaryMask;
pub use model::{
    CameraIntrinsics, GraspCandidate, GraspPose, ObjectPointCloud, PartDecomposition,
    PartSegment, RankedGrasp, RgbdFrame, TaskRequest,
};

//! End-to-end simulation: calibration, hand-eye, teaching, random scenes,
//! matching, grasp transfer and waypoint planning.

mod config;
mod plan;
mod run;
mod sim;

pub use config::{
    CalibrationConfig, CameraConfig, HandEyeConfig, ObjectConfig, PipelineConfig, PlanConfig, SceneConfig, SensorConfig, ToleranceConfig,
};
pub use plan::{plan_pick_place, GripperAction, PickPlacePlan, Waypoint, WaypointLabel};
pub use run::{
    run_pipeline, run_pipeline_with_db, CalibrationStage, GraspError, HandEyeStage, PipelineReport, SceneReport, SceneStatus, SeedRecord,
    StageStatus, Summary, TaughtFace, TeachStage, REPORT_SCHEMA_VERSION,
};
pub use sim::{look_at, simulate_view, symmetric_pose_error, synth_cloud, ShapeKind, ShapeSpec, Symmetry, ViewSpec, Visibility};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("no points left after visibility culling")]
    EmptyAfterCulling,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("failed to parse config {path}: {message}")]
    ConfigParse { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{stage} stage failed: {message}")]
    Stage { stage: String, message: String },
}

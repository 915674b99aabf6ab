//! Library-level flow: teach faces from simulated views, persist the
//! database, then match, transfer and plan for a moved object.

use std::path::PathBuf;

use pickplace_core::geom3::rodrigues_exp;
use pickplace_core::graspdb::{GraspDb, GraspDbError, GripperType, MatchParams};
use pickplace_core::pipeline::{
    look_at, plan_pick_place, simulate_view, symmetric_pose_error, synth_cloud, PipelineConfig, ShapeSpec, ViewSpec, Visibility,
    WaypointLabel,
};
use pickplace_core::{Pose, Vec3};

fn camera() -> Pose {
    look_at(&Vec3::new(0.5, -0.45, 0.55), &Vec3::new(0.5, 0.0, 0.0), &Vec3::z()).unwrap()
}

/// Box resting on the table at `(x, y)` with the given yaw.
fn placed(x: f64, y: f64, yaw: f64) -> Pose {
    Pose::new(rodrigues_exp(&Vec3::new(0.0, 0.0, yaw)), Vec3::new(x, y, 0.025))
}

fn scan(model: &pickplace_core::cloud::PointCloud, pose: Pose, seed: u64) -> pickplace_core::cloud::PointCloud {
    let view = ViewSpec { object_pose: pose, camera_pose: camera(), noise_sigma: 0.0005, visibility: Visibility::CameraFacing, seed };
    simulate_view(model, &view).unwrap()
}

#[test]
fn taught_grasp_follows_the_object() {
    let spec = ShapeSpec::cuboid(0.12, 0.08, 0.05, 1.5e5);
    let model = synth_cloud(&spec, 1).unwrap();
    let taught = placed(0.5, 0.0, 0.8);
    // Top-down grasp 1 cm below the top face, in the object frame.
    let grasp_rel = Pose::new(rodrigues_exp(&Vec3::new(std::f64::consts::PI, 0.0, 0.0)), Vec3::new(0.0, 0.0, 0.015));

    let mut db = GraspDb::new();
    let face = db.register_face("block", scan(&model, taught, 2), taught.compose(&grasp_rel), GripperType::TwoFinger).unwrap();
    assert_eq!(face, "block_0");
    let dir = tempfile::tempdir().unwrap();
    db.save(dir.path()).unwrap();
    let db = GraspDb::load(dir.path()).unwrap();

    let params = MatchParams { max_tilt_deg: Some(10.0), ..Default::default() };
    let place = Pose::new(rodrigues_exp(&Vec3::new(std::f64::consts::PI, 0.0, 0.0)), Vec3::new(0.2, 0.45, 0.06));
    for (k, (x, y, yaw)) in [(0.45, -0.05, 0.6), (0.55, 0.08, 1.0), (0.5, 0.0, 0.8)].into_iter().enumerate() {
        let truth = placed(x, y, yaw);
        let m = db.match_object(&scan(&model, truth, 10 + k as u64), &params).unwrap();
        assert!(m.score >= params.accept_threshold && m.alignment.fitness >= m.score);
        let (er, et) = symmetric_pose_error(&m.grasp_in_scene, &truth, &grasp_rel, &spec.symmetry());
        assert!(er <= 1f64.to_radians() && et <= 0.003, "scene {k}: {er} rad, {et} m");

        let plan = plan_pick_place(&m.grasp_in_scene, &place, 0.1).unwrap();
        let c = truth.translation();
        let approach = plan.waypoint(WaypointLabel::Approach).unwrap().pose;
        let grasp = plan.waypoint(WaypointLabel::Grasp).unwrap().pose;
        assert!((approach.translation() - c).norm() > (grasp.translation() - c).norm());
        assert_eq!(plan.waypoint(WaypointLabel::Place).unwrap().pose, place);
    }
}

#[test]
fn foreign_object_is_rejected() {
    let block = synth_cloud(&ShapeSpec::cuboid(0.12, 0.08, 0.05, 1.5e5), 3).unwrap();
    let can = synth_cloud(&ShapeSpec::cylinder(0.03, 0.1, 1.5e5), 4).unwrap();
    let mut db = GraspDb::new();
    let taught = placed(0.5, 0.0, 0.8);
    db.register_face("block", scan(&block, taught, 5), taught, GripperType::ThreeFinger).unwrap();
    let can_pose = Pose::from_translation(Vec3::new(0.5, 0.0, 0.05));
    match db.match_object(&scan(&can, can_pose, 6), &MatchParams::default()) {
        Err(GraspDbError::NoMatch { best_score, threshold, .. }) => assert!(best_score < threshold),
        other => panic!("{other:?}"),
    }
}

#[test]
fn shipped_configs_are_valid() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let c = PipelineConfig::from_path(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        c.validate().unwrap();
        n += 1;
    }
    assert!(n >= 4);
}

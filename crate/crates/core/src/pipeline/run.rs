//! Orchestration of a full simulated run and the report it produces.

use std::f64::consts::PI;

use chrono::{DateTime, Utc};
use nalgebra::{UnitQuaternion, Vector3};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::plan::{plan_pick_place, PickPlacePlan};
use super::sim::{simulate_view, symmetric_pose_error, synth_cloud, ShapeKind, ShapeSpec, ViewSpec};
use super::PipelineError;
use crate::calib::{calibrate, project, CameraIntrinsics, Pixel, PlanarView};
use crate::cloud::{crop_aabb, voxel_downsample, PointCloud};
use crate::geom3::{pose_error, rodrigues_exp, FrameId, Pose, Vec3};
use crate::graspdb::{GraspDb, GraspDbError, GripperType};
use crate::handeye::{calibrate_eye_to_hand, marker_pnp, MarkerSpec, StationSample};
use crate::register::AlignmentResult;
use crate::sampling::{derive_seed, gaussian, gaussian_vec3, seeded_rng, SimRng};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ok,
    Failed,
    /// Not run because an earlier stage failed.
    Skipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub model: u64,
    pub calibration: u64,
    pub handeye: u64,
    pub teach: u64,
    pub scenes: u64,
}

impl SeedRecord {
    fn new(seed: u64) -> Self {
        Self {
            seed,
            model: derive_seed(seed, 0),
            calibration: derive_seed(seed, 1),
            handeye: derive_seed(seed, 2),
            teach: derive_seed(seed, 3),
            scenes: derive_seed(seed, 4),
        }
    }

    fn unregistered_model(&self) -> u64 {
        derive_seed(self.seed, 5)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStage {
    pub status: StageStatus,
    pub error: Option<String>,
    pub views: usize,
    pub intrinsics_true: CameraIntrinsics,
    pub intrinsics: Option<CameraIntrinsics>,
    pub rms_px: Option<f64>,
    pub initial_rms_px: Option<f64>,
    pub iterations: Option<usize>,
    /// Largest relative error over fx, fy, cx, cy.
    pub max_relative_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandEyeStage {
    pub status: StageStatus,
    pub error: Option<String>,
    pub stations: usize,
    pub base_to_camera_true: Pose,
    pub base_to_camera: Option<Pose>,
    pub ee_to_marker_true: Pose,
    pub ee_to_marker: Option<Pose>,
    pub rot_residual: Option<f64>,
    pub trans_residual: Option<f64>,
    pub pairs: Option<usize>,
    pub rot_error_rad: Option<f64>,
    pub trans_error_m: Option<f64>,
    /// Worst marker reprojection RMS over the stations, pixels.
    pub marker_rms_px_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaughtFace {
    pub face_id: String,
    pub rest_face: usize,
    pub object_pose_true: Pose,
    pub grasp: Pose,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeachStage {
    pub status: StageStatus,
    pub error: Option<String>,
    pub object_id: String,
    pub faces: Vec<TaughtFace>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneStatus {
    Planned,
    NoMatch,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspError {
    pub rot_rad: f64,
    pub trans_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneReport {
    pub index: usize,
    pub seed: u64,
    /// Whether the object in the scene is the taught one.
    pub registered: bool,
    pub shape: ShapeKind,
    pub rest_face: usize,
    pub object_pose_true: Pose,
    /// Points in the segmented cloud.
    pub points: Option<usize>,
    pub status: SceneStatus,
    pub error: Option<String>,
    /// Score of the accepted match, or of the best rejected candidate.
    pub match_score: Option<f64>,
    pub matched_face: Option<String>,
    pub alignment: Option<AlignmentResult>,
    pub grasp_in_scene: Option<Pose>,
    /// Taught object-frame grasp carried by the true object pose.
    pub grasp_truth: Option<Pose>,
    /// Planned grasp against ground truth, modulo the object's symmetries.
    pub grasp_error: Option<GraspError>,
    pub within_tolerance: Option<bool>,
    pub plan: Option<PickPlacePlan>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub scenes: usize,
    pub registered_scenes: usize,
    pub unregistered_scenes: usize,
    pub planned: usize,
    pub no_match: usize,
    pub failed: usize,
    pub skipped: usize,
    /// Planned registered scenes whose grasp is within tolerance.
    pub within_tolerance: usize,
    /// 0 when every stage succeeded and every scene was planned.
    pub exit_code: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub schema_version: u32,
    pub seeds: SeedRecord,
    pub config: PipelineConfig,
    pub calibration: CalibrationStage,
    pub handeye: HandEyeStage,
    pub teach: TeachStage,
    pub scenes: Vec<SceneReport>,
    pub summary: Summary,
}

impl PipelineReport {
    pub fn exit_code(&self) -> i32 {
        self.summary.exit_code
    }

    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// The first stage failure, with the stage named.
    pub fn first_error(&self) -> Option<PipelineError> {
        let stage = |stage: &str, e: &Option<String>| e.clone().map(|message| PipelineError::Stage { stage: stage.into(), message });
        if self.calibration.status == StageStatus::Failed {
            return stage("calibration", &self.calibration.error);
        }
        if self.handeye.status == StageStatus::Failed {
            return stage("handeye", &self.handeye.error);
        }
        if self.teach.status == StageStatus::Failed {
            return stage("teach", &self.teach.error);
        }
        self.scenes
            .iter()
            .find(|s| matches!(s.status, SceneStatus::NoMatch | SceneStatus::Failed))
            .and_then(|s| stage(&format!("scene {}", s.index), &s.error))
    }
}

/// Runs every stage and reports on all of them. Only an invalid config is
/// an error; stage failures are recorded in the report.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineReport, PipelineError> {
    run_pipeline_with_db(config).map(|(report, _)| report)
}

/// [`run_pipeline`], also returning the taught database (empty if teaching
/// did not run).
pub fn run_pipeline_with_db(config: &PipelineConfig) -> Result<(PipelineReport, GraspDb), PipelineError> {
    config.validate()?;
    let seeds = SeedRecord::new(config.seed);
    let camera_pose = config.camera.pose()?;
    let model = synth_cloud(&config.object.shape, seeds.model)?;
    let foreign = match &config.scenes.unregistered {
        Some(spec) => Some((spec.clone(), synth_cloud(spec, seeds.unregistered_model())?)),
        None => None,
    };

    let (calibration, k_est) = calibration_stage(config, seeds.calibration);
    let (handeye, x_est) = match &k_est {
        Some(k) => handeye_stage(config, k, &camera_pose, seeds.handeye),
        None => (skipped_handeye(config, &camera_pose, "calibration"), None),
    };
    let ctx = SceneContext { config, model: &model, camera_pose, x_est: x_est.unwrap_or(camera_pose) };
    let (teach, db) = match x_est {
        Some(_) => teach_stage(&ctx, seeds.teach),
        None => (
            TeachStage {
                status: StageStatus::Skipped,
                error: Some("skipped: handeye stage did not succeed".into()),
                object_id: config.object.object_id.clone(),
                faces: vec![],
            },
            None,
        ),
    };

    let total = config.scenes.count + config.scenes.unregistered_count;
    let scenes: Vec<SceneReport> = (0..total)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(seeds.scenes, i as u64);
            let registered = i < config.scenes.count;
            let (spec, cloud) = if registered {
                (&config.object.shape, &model)
            } else {
                let (s, c) = foreign.as_ref().expect("validated");
                (s, c)
            };
            ctx.scene(i, seed, spec, cloud, registered, db.as_ref(), &teach)
        })
        .collect();

    let summary = summarize(&calibration, &handeye, &teach, &scenes, config.scenes.count);
    let report = PipelineReport {
        schema_version: REPORT_SCHEMA_VERSION,
        seeds,
        config: config.clone(),
        calibration,
        handeye,
        teach,
        scenes,
        summary,
    };
    Ok((report, db.unwrap_or_default()))
}

fn summarize(
    calibration: &CalibrationStage,
    handeye: &HandEyeStage,
    teach: &TeachStage,
    scenes: &[SceneReport],
    registered: usize,
) -> Summary {
    let count = |s: SceneStatus| scenes.iter().filter(|r| r.status == s).count();
    let planned = count(SceneStatus::Planned);
    let stages_ok = [calibration.status, handeye.status, teach.status].iter().all(|s| *s == StageStatus::Ok);
    Summary {
        scenes: scenes.len(),
        registered_scenes: registered,
        unregistered_scenes: scenes.len() - registered,
        planned,
        no_match: count(SceneStatus::NoMatch),
        failed: count(SceneStatus::Failed),
        skipped: count(SceneStatus::Skipped),
        within_tolerance: scenes.iter().filter(|s| s.registered && s.within_tolerance == Some(true)).count(),
        exit_code: if stages_ok && planned == scenes.len() { 0 } else { 1 },
    }
}

/// A pose whose normal is tilted from the optical axis by an angle in
/// `tilt_deg`, with random spin, centred at `centre` in the camera frame.
fn tilted_target(rng: &mut SimRng, tilt_deg: [f64; 2], centre: Vec3, target_centre: Vec3) -> Pose {
    let a: f64 = rng.random_range(0.0..2.0 * PI);
    let axis = Vec3::new(a.cos(), a.sin(), 0.0);
    let tilt = rng.random_range(tilt_deg[0]..=tilt_deg[1]).to_radians();
    let spin = rng.random_range(-PI..PI);
    let rot = rodrigues_exp(&(axis * tilt)) * rodrigues_exp(&Vec3::new(0.0, 0.0, spin));
    Pose::new(rot, centre - rot * target_centre)
}

fn noisy_projection(k: &CameraIntrinsics, cam_point: &Vec3, rng: &mut SimRng, sigma: f64) -> Result<Pixel, String> {
    let p = project(k, cam_point).map_err(|e| e.to_string())?;
    Ok(p + Pixel::new(gaussian(rng, sigma), gaussian(rng, sigma)))
}

fn calibration_stage(config: &PipelineConfig, seed: u64) -> (CalibrationStage, Option<CameraIntrinsics>) {
    let c = &config.calibration;
    let k_true = config.camera.intrinsics;
    let mut stage = CalibrationStage {
        status: StageStatus::Failed,
        error: None,
        views: c.views,
        intrinsics_true: k_true,
        intrinsics: None,
        rms_px: None,
        initial_rms_px: None,
        iterations: None,
        max_relative_error: None,
    };
    let simulate = || -> Result<Vec<PlanarView>, String> {
        let mut rng = seeded_rng(seed);
        let board = c.board.object_points();
        let s = c.board.square_size_m;
        let centre = Vec3::new((c.board.cols - 1) as f64 * s / 2.0, (c.board.rows - 1) as f64 * s / 2.0, 0.0);
        (0..c.views)
            .map(|_| {
                let at = Vec3::new(
                    rng.random_range(-0.05..=0.05),
                    rng.random_range(-0.04..=0.04),
                    rng.random_range(c.distance_m[0]..=c.distance_m[1]),
                );
                let pose = tilted_target(&mut rng, c.tilt_deg, at, centre);
                let image = board
                    .iter()
                    .map(|x| noisy_projection(&k_true, &pose.transform_point(x), &mut rng, c.pixel_noise))
                    .collect::<Result<Vec<_>, _>>()?;
                PlanarView::new(board.clone(), image).map_err(|e| e.to_string())
            })
            .collect()
    };
    let result = simulate().and_then(|views| calibrate(&views, &c.lm).map_err(|e| e.to_string()));
    match result {
        Ok(r) => {
            let k = r.intrinsics;
            let rel = [(k.fx, k_true.fx), (k.fy, k_true.fy), (k.cx, k_true.cx), (k.cy, k_true.cy)]
                .iter()
                .map(|(a, b)| ((a - b) / b).abs())
                .fold(0.0, f64::max);
            stage.status = StageStatus::Ok;
            stage.intrinsics = Some(k);
            stage.rms_px = Some(r.rms_px);
            stage.initial_rms_px = Some(r.initial_rms_px);
            stage.iterations = Some(r.iterations);
            stage.max_relative_error = Some(rel);
            (stage, Some(k))
        }
        Err(e) => {
            stage.error = Some(e);
            (stage, None)
        }
    }
}

fn skipped_handeye(config: &PipelineConfig, camera_pose: &Pose, after: &str) -> HandEyeStage {
    HandEyeStage {
        status: StageStatus::Skipped,
        error: Some(format!("skipped: {after} stage did not succeed")),
        stations: config.handeye.stations,
        base_to_camera_true: *camera_pose,
        base_to_camera: None,
        ee_to_marker_true: config.handeye.ee_to_marker,
        ee_to_marker: None,
        rot_residual: None,
        trans_residual: None,
        pairs: None,
        rot_error_rad: None,
        trans_error_m: None,
        marker_rms_px_max: None,
    }
}

fn handeye_stage(config: &PipelineConfig, k_est: &CameraIntrinsics, camera_pose: &Pose, seed: u64) -> (HandEyeStage, Option<Pose>) {
    let h = &config.handeye;
    let mut stage = skipped_handeye(config, camera_pose, "");
    stage.status = StageStatus::Failed;
    stage.error = None;
    let k_true = config.camera.intrinsics;
    let y_true = h.ee_to_marker;
    let run = || -> Result<(crate::handeye::HandEyeResult, f64), String> {
        let spec = MarkerSpec::new(h.marker_side).map_err(|e| e.to_string())?;
        let mut rng = seeded_rng(seed);
        let mut samples = Vec::with_capacity(h.stations);
        let mut worst_rms: f64 = 0.0;
        for _ in 0..h.stations {
            let at = Vec3::new(
                rng.random_range(-0.08..=0.08),
                rng.random_range(-0.06..=0.06),
                rng.random_range(h.distance_m[0]..=h.distance_m[1]),
            );
            let c_true = tilted_target(&mut rng, h.tilt_deg, at, Vec3::zeros());
            let corners = spec.corners();
            let mut px = [Pixel::zeros(); 4];
            for (p, x) in px.iter_mut().zip(&corners) {
                *p = noisy_projection(&k_true, &c_true.transform_point(x), &mut rng, h.pixel_noise)?;
            }
            let m = marker_pnp(k_est, &spec, &px).map_err(|e| e.to_string())?;
            worst_rms = worst_rms.max(m.rms_px);
            let base_to_ee = camera_pose.compose(&c_true).compose(&y_true.inverse());
            samples.push(StationSample { base_to_ee, cam_to_marker: m.cam_to_marker });
        }
        let r = calibrate_eye_to_hand(&samples, &h.params).map_err(|e| e.to_string())?;
        Ok((r, worst_rms))
    };
    match run() {
        Ok((r, worst)) => {
            let (re, te) = pose_error(&r.base_to_camera, camera_pose);
            stage.status = StageStatus::Ok;
            stage.base_to_camera = Some(r.base_to_camera);
            stage.ee_to_marker = Some(r.ee_to_marker);
            stage.rot_residual = Some(r.rot_residual);
            stage.trans_residual = Some(r.trans_residual);
            stage.pairs = Some(r.pairs);
            stage.rot_error_rad = Some(re);
            stage.trans_error_m = Some(te);
            stage.marker_rms_px_max = Some(worst);
            (stage, Some(r.base_to_camera))
        }
        Err(e) => {
            stage.error = Some(e);
            (stage, None)
        }
    }
}

/// Fixed so reports do not depend on the wall clock.
fn teach_timestamp() -> DateTime<Utc> {
    DateTime::UNIX_EPOCH
}

struct SceneContext<'a> {
    config: &'a PipelineConfig,
    model: &'a PointCloud,
    camera_pose: Pose,
    /// Estimated `robot_base_to_camera`, used to bring sensor data into the base frame.
    x_est: Pose,
}

/// Object pose resting on the table (z = 0) at `xy` with the given yaw.
fn rest_pose(model: &PointCloud, rest: &UnitQuaternion<f64>, xy: [f64; 2], yaw: f64) -> Pose {
    let min_z = model.points().iter().map(|p| (rest * p).z).fold(f64::INFINITY, f64::min);
    let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw) * rest;
    Pose::new(rot, Vec3::new(xy[0], xy[1], -min_z))
}

/// Top-down grasp over the centre of the object, `depth` below its top.
fn top_grasp(model: &PointCloud, object_pose: &Pose, depth: f64) -> Pose {
    let placed = model.transformed(object_pose, FrameId::robot_base());
    let c = placed.centroid().expect("nonempty model");
    let top = placed.points().iter().map(|p| p.z).fold(f64::NEG_INFINITY, f64::max);
    Pose::new(UnitQuaternion::from_axis_angle(&Vector3::x_axis(), PI), Vec3::new(c.x, c.y, top - depth))
}

impl SceneContext<'_> {
    /// Simulated capture and segmentation: the returned cloud is in
    /// `robot_base` via the estimated hand-eye transform.
    fn scan(&self, cloud: &PointCloud, object_pose: &Pose, seed: u64) -> Result<PointCloud, PipelineError> {
        let s = &self.config.sensor;
        let view = ViewSpec {
            object_pose: *object_pose,
            camera_pose: self.camera_pose,
            noise_sigma: s.noise_sigma,
            visibility: s.visibility,
            seed: derive_seed(seed, 0),
        };
        let mut scene = simulate_view(cloud, &view)?.without_normals();
        if s.table_density > 0.0 && self.camera_pose.translation().z > 0.0 {
            let mut rng = seeded_rng(derive_seed(seed, 1));
            let (lo, hi) = (s.crop.min(), s.crop.max());
            let n = ((hi.x - lo.x) * (hi.y - lo.y) * s.table_density).round() as usize;
            let table: Vec<Vec3> = (0..n)
                .map(|_| {
                    Vec3::new(rng.random_range(lo.x..=hi.x), rng.random_range(lo.y..=hi.y), 0.0) + gaussian_vec3(&mut rng, s.noise_sigma)
                })
                .collect();
            scene = scene.concat(&PointCloud::new(table, FrameId::robot_base()).expect("finite"));
        }
        let sensor_frame = scene.transformed(&self.camera_pose.inverse(), FrameId::camera());
        let base = sensor_frame.transformed(&self.x_est, FrameId::robot_base());
        let mut seg = crop_aabb(&base, &s.crop);
        if s.voxel > 0.0 {
            seg = voxel_downsample(&seg, s.voxel).map_err(|e| PipelineError::InvalidSpec(e.to_string()))?;
        }
        if seg.is_empty() {
            return Err(PipelineError::EmptyAfterCulling);
        }
        Ok(seg)
    }

    #[allow(clippy::too_many_arguments)]
    fn scene(
        &self,
        index: usize,
        seed: u64,
        spec: &ShapeSpec,
        cloud: &PointCloud,
        registered: bool,
        db: Option<&GraspDb>,
        teach: &TeachStage,
    ) -> SceneReport {
        let sc = &self.config.scenes;
        let mut rng = seeded_rng(seed);
        let faces = if registered { self.config.object.faces } else { 3 };
        let rest_face = rng.random_range(0..faces);
        let xy = [rng.random_range(sc.area[0]..=sc.area[2]), rng.random_range(sc.area[1]..=sc.area[3])];
        let yaw_max = sc.yaw_range_deg.to_radians();
        let yaw = self.config.object.teach_yaw_deg.to_radians() + if yaw_max > 0.0 { rng.random_range(-yaw_max..=yaw_max) } else { 0.0 };
        let object_pose = rest_pose(cloud, &spec.rest_orientations()[rest_face], xy, yaw);

        let mut report = SceneReport {
            index,
            seed,
            registered,
            shape: spec.kind,
            rest_face,
            object_pose_true: object_pose,
            points: None,
            status: SceneStatus::Failed,
            error: None,
            match_score: None,
            matched_face: None,
            alignment: None,
            grasp_in_scene: None,
            grasp_truth: None,
            grasp_error: None,
            within_tolerance: None,
            plan: None,
        };
        // Object-frame grasp taught for this resting face.
        let taught = registered
            .then(|| teach.faces.iter().find(|f| f.rest_face == rest_face))
            .flatten()
            .map(|f| f.object_pose_true.inverse().compose(&f.grasp));
        if let Some(rel) = &taught {
            report.grasp_truth = Some(object_pose.compose(rel));
        }
        let Some(db) = db else {
            report.status = SceneStatus::Skipped;
            report.error = Some("skipped: teach stage did not succeed".into());
            return report;
        };
        let scanned = match self.scan(cloud, &object_pose, derive_seed(seed, 1)) {
            Ok(s) => s,
            Err(e) => {
                report.error = Some(format!("scan: {e}"));
                return report;
            }
        };
        report.points = Some(scanned.len());
        let m = match db.match_object(&scanned, &self.config.matching) {
            Ok(m) => m,
            Err(e) => {
                if let GraspDbError::NoMatch { best_score, .. } = &e {
                    report.status = SceneStatus::NoMatch;
                    report.match_score = Some(*best_score);
                }
                report.error = Some(format!("match: {e}"));
                return report;
            }
        };
        report.match_score = Some(m.score);
        report.matched_face = Some(m.face_id.clone());
        report.grasp_in_scene = Some(m.grasp_in_scene);
        report.alignment = Some(m.alignment);
        match plan_pick_place(&m.grasp_in_scene, &self.config.plan.place_pose, self.config.plan.approach_offset) {
            Ok(plan) => {
                report.plan = Some(plan);
                report.status = SceneStatus::Planned;
            }
            Err(e) => {
                report.error = Some(format!("plan: {e}"));
                return report;
            }
        }
        if let Some(rel) = &taught {
            let (r, t) = symmetric_pose_error(&m.grasp_in_scene, &object_pose, rel, &spec.symmetry());
            let tol = &self.config.tolerance;
            report.grasp_error = Some(GraspError { rot_rad: r, trans_m: t });
            report.within_tolerance = Some(r <= tol.rot_deg.to_radians() && t <= tol.trans_m);
        }
        report
    }
}

fn teach_stage(ctx: &SceneContext<'_>, seed: u64) -> (TeachStage, Option<GraspDb>) {
    let o = &ctx.config.object;
    let mut stage = TeachStage { status: StageStatus::Failed, error: None, object_id: o.object_id.clone(), faces: vec![] };
    let mut db = GraspDb::new();
    let rests = o.shape.rest_orientations();
    for (f, rest) in rests.iter().enumerate().take(o.faces) {
        let pose = rest_pose(ctx.model, rest, o.teach_xy, o.teach_yaw_deg.to_radians());
        let grasp = top_grasp(ctx.model, &pose, o.grasp_depth);
        let result =
            ctx.scan(ctx.model, &pose, derive_seed(seed, f as u64)).map_err(|e| format!("face {f}: scan: {e}")).and_then(|cloud| {
                let n = cloud.len();
                db.register_face_at(&o.object_id, cloud, grasp, GripperType::TwoFinger, teach_timestamp())
                    .map(|id| (id, n))
                    .map_err(|e| format!("face {f}: {e}"))
            });
        match result {
            Ok((face_id, points)) => stage.faces.push(TaughtFace { face_id, rest_face: f, object_pose_true: pose, grasp, points }),
            Err(e) => {
                stage.error = Some(e);
                return (stage, None);
            }
        }
    }
    stage.status = StageStatus::Ok;
    (stage, Some(db))
}

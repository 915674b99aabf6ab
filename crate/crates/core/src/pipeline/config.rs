//! Pipeline configuration. Every field has a default, so an empty file is
//! the demo configuration.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::sim::{look_at, ShapeSpec, Visibility};
use super::PipelineError;
use crate::calib::{BoardSpec, CameraIntrinsics, LmParams};
use crate::cloud::Aabb;
use crate::geom3::{Pose, Vec3};
use crate::graspdb::MatchParams;
use crate::handeye::HandEyeParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub camera: CameraConfig,
    pub calibration: CalibrationConfig,
    pub handeye: HandEyeConfig,
    pub object: ObjectConfig,
    pub sensor: SensorConfig,
    pub scenes: SceneConfig,
    pub matching: MatchParams,
    pub plan: PlanConfig,
    pub tolerance: ToleranceConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            camera: CameraConfig::default(),
            calibration: CalibrationConfig::default(),
            handeye: HandEyeConfig::default(),
            object: ObjectConfig::default(),
            sensor: SensorConfig::default(),
            scenes: SceneConfig::default(),
            matching: MatchParams { max_tilt_deg: Some(10.0), ..MatchParams::default() },
            plan: PlanConfig::default(),
            tolerance: ToleranceConfig::default(),
        }
    }
}

/// The simulated camera (ground truth).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub intrinsics: CameraIntrinsics,
    pub width: f64,
    pub height: f64,
    /// Camera centre in the robot base frame, meters.
    pub eye: [f64; 3],
    /// Point the optical axis passes through.
    pub target: [f64; 3],
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            intrinsics: CameraIntrinsics { fx: 615.0, fy: 615.0, cx: 320.0, cy: 240.0, skew: 0.0, k1: 0.05, k2: -0.02 },
            width: 640.0,
            height: 480.0,
            eye: [0.5, -0.45, 0.55],
            target: [0.5, 0.0, 0.0],
        }
    }
}

impl CameraConfig {
    /// `robot_base_to_camera`.
    pub fn pose(&self) -> Result<Pose, PipelineError> {
        look_at(&Vec3::from(self.eye), &Vec3::from(self.target), &Vec3::z())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub views: usize,
    pub board: BoardSpec,
    /// Corner detection noise, pixels.
    pub pixel_noise: f64,
    /// Board tilt range against the image plane, degrees.
    pub tilt_deg: [f64; 2],
    /// Board distance range from the camera, meters.
    pub distance_m: [f64; 2],
    pub lm: LmParams,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            views: 10,
            board: BoardSpec { cols: 11, rows: 8, square_size_m: 0.03 },
            pixel_noise: 0.2,
            tilt_deg: [15.0, 45.0],
            distance_m: [0.5, 0.8],
            lm: LmParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HandEyeConfig {
    pub stations: usize,
    /// Marker side length, meters.
    pub marker_side: f64,
    /// Corner detection noise, pixels.
    pub pixel_noise: f64,
    /// Marker tilt range against the image plane, degrees.
    pub tilt_deg: [f64; 2],
    /// Marker distance range from the camera, meters.
    pub distance_m: [f64; 2],
    /// Ground-truth marker mount on the flange.
    pub ee_to_marker: Pose,
    pub params: HandEyeParams,
}

impl Default for HandEyeConfig {
    fn default() -> Self {
        Self {
            stations: 15,
            marker_side: 0.1,
            pixel_noise: 0.2,
            tilt_deg: [30.0, 55.0],
            distance_m: [0.35, 0.55],
            ee_to_marker: Pose::new(UnitQuaternion::from_axis_angle(&Vector3::x_axis(), PI), Vec3::new(0.0, 0.0, 0.06)),
            params: HandEyeParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectConfig {
    pub object_id: String,
    pub shape: ShapeSpec,
    /// Resting faces taught, 1 to 3.
    pub faces: usize,
    /// Table position of the object during teaching, meters.
    pub teach_xy: [f64; 2],
    /// Object yaw during teaching, degrees.
    pub teach_yaw_deg: f64,
    /// Grasp point depth below the top of the object, meters.
    pub grasp_depth: f64,
}

impl Default for ObjectConfig {
    fn default() -> Self {
        Self {
            object_id: "block".into(),
            shape: ShapeSpec::cuboid(0.12, 0.08, 0.05, 1.5e5),
            faces: 3,
            teach_xy: [0.5, 0.0],
            teach_yaw_deg: 45.0,
            grasp_depth: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorConfig {
    /// Depth noise per coordinate, meters.
    pub noise_sigma: f64,
    pub visibility: Visibility,
    /// Table-plane samples per square meter; 0 disables the table.
    pub table_density: f64,
    /// Segmentation box in the robot base frame.
    pub crop: Aabb,
    /// Voxel edge for downsampling segmented clouds; 0 disables it.
    pub voxel: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.001,
            visibility: Visibility::CameraFacing,
            table_density: 2e4,
            crop: Aabb::new(Vec3::new(0.2, -0.35, 0.005), Vec3::new(0.8, 0.35, 0.4)).expect("ordered bounds"),
            voxel: 0.003,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Scenes with the taught object.
    pub count: usize,
    /// Object placement area on the table, `[x_min, y_min, x_max, y_max]`.
    pub area: [f64; 4],
    /// Yaw is drawn within `yaw_range_deg` of the teaching yaw.
    pub yaw_range_deg: f64,
    /// Object that was never taught, placed in `unregistered_count` extra scenes.
    pub unregistered: Option<ShapeSpec>,
    pub unregistered_count: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { count: 20, area: [0.4, -0.1, 0.6, 0.1], yaw_range_deg: 30.0, unregistered: None, unregistered_count: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanConfig {
    pub approach_offset: f64,
    /// Gripper pose at release (`robot_base_to_gripper`).
    pub place_pose: Pose,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            approach_offset: 0.1,
            place_pose: Pose::new(UnitQuaternion::from_axis_angle(&Vector3::x_axis(), PI), Vec3::new(0.2, 0.45, 0.06)),
        }
    }
}

/// Ground-truth acceptance band for a planned grasp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToleranceConfig {
    pub rot_deg: f64,
    pub trans_m: f64,
}

impl Default for ToleranceConfig {
    fn default() -> Self {
        Self { rot_deg: 1.0, trans_m: 0.003 }
    }
}

/// Objects merge key by key; any other value replaces the base.
fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn ordered_positive(name: &str, r: [f64; 2]) -> Result<(), PipelineError> {
    if r.iter().all(|v| v.is_finite() && *v >= 0.0) && r[0] <= r[1] {
        Ok(())
    } else {
        Err(PipelineError::InvalidConfig(format!("{name} must be an ordered non-negative range, got {r:?}")))
    }
}

impl PipelineConfig {
    /// Reads TOML or JSON, chosen by extension (`.toml`, `.json`); other
    /// extensions are tried as JSON, then TOML.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io { path: path.into(), source })?;
        let parse_err = |message: String| PipelineError::ConfigParse { path: path.into(), message };
        let config = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => Self::from_toml_str(&text).map_err(parse_err)?,
            Some("json") => Self::from_json_str(&text).map_err(parse_err)?,
            _ => Self::from_json_str(&text).or_else(|_| Self::from_toml_str(&text)).map_err(parse_err)?,
        };
        config.validate()?;
        Ok(config)
    }

    /// Parses a TOML document. Keys it sets replace the defaults at any
    /// depth; everything else keeps its default.
    pub fn from_toml_str(text: &str) -> Result<Self, String> {
        let value: toml::Value = toml::from_str(text).map_err(|e| e.to_string())?;
        Self::overlay(serde_json::to_value(value).map_err(|e| e.to_string())?)
    }

    /// JSON counterpart of [`PipelineConfig::from_toml_str`].
    pub fn from_json_str(text: &str) -> Result<Self, String> {
        Self::overlay(serde_json::from_str(text).map_err(|e| e.to_string())?)
    }

    fn overlay(over: serde_json::Value) -> Result<Self, String> {
        let mut merged = serde_json::to_value(Self::default()).map_err(|e| e.to_string())?;
        merge(&mut merged, over);
        serde_json::from_value(merged).map_err(|e| e.to_string())
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidConfig(m));
        self.camera
            .intrinsics
            .validate_within(self.camera.width, self.camera.height)
            .map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        self.camera.pose()?;
        self.object.shape.validate()?;
        if let Some(s) = &self.scenes.unregistered {
            s.validate()?;
        }
        if !(1..=3).contains(&self.object.faces) {
            return bad(format!("object.faces must be 1..=3, got {}", self.object.faces));
        }
        if self.calibration.views < 3 {
            return bad(format!("calibration.views must be at least 3, got {}", self.calibration.views));
        }
        if self.calibration.board.cols * self.calibration.board.rows < 4 || !(self.calibration.board.square_size_m > 0.0) {
            return bad("calibration.board needs at least 4 corners and a positive square size".into());
        }
        if self.handeye.stations < 3 {
            return bad(format!("handeye.stations must be at least 3, got {}", self.handeye.stations));
        }
        if !(self.handeye.marker_side > 0.0) {
            return bad(format!("handeye.marker_side must be positive, got {}", self.handeye.marker_side));
        }
        for (name, v) in [
            ("calibration.pixel_noise", self.calibration.pixel_noise),
            ("handeye.pixel_noise", self.handeye.pixel_noise),
            ("sensor.noise_sigma", self.sensor.noise_sigma),
            ("sensor.table_density", self.sensor.table_density),
            ("sensor.voxel", self.sensor.voxel),
            ("object.grasp_depth", self.object.grasp_depth),
            ("object.teach_yaw_deg", self.object.teach_yaw_deg.abs()),
            ("scenes.yaw_range_deg", self.scenes.yaw_range_deg),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        ordered_positive("calibration.tilt_deg", self.calibration.tilt_deg)?;
        ordered_positive("calibration.distance_m", self.calibration.distance_m)?;
        ordered_positive("handeye.tilt_deg", self.handeye.tilt_deg)?;
        ordered_positive("handeye.distance_m", self.handeye.distance_m)?;
        if self.calibration.distance_m[0] <= 0.0 || self.handeye.distance_m[0] <= 0.0 {
            return bad("distance ranges must start above 0".into());
        }
        let a = self.scenes.area;
        if !(a.iter().all(|v| v.is_finite()) && a[0] <= a[2] && a[1] <= a[3]) {
            return bad(format!("scenes.area must be [x_min, y_min, x_max, y_max], got {a:?}"));
        }
        if self.scenes.unregistered_count > 0 && self.scenes.unregistered.is_none() {
            return bad("scenes.unregistered_count > 0 needs scenes.unregistered".into());
        }
        self.matching.validate().map_err(|e| PipelineError::InvalidConfig(format!("matching: {e}")))?;
        if !(self.plan.approach_offset.is_finite() && self.plan.approach_offset > 0.0) {
            return bad(format!("plan.approach_offset must be positive, got {}", self.plan.approach_offset));
        }
        if !(self.tolerance.rot_deg >= 0.0 && self.tolerance.trans_m >= 0.0) {
            return bad("tolerance values must be >= 0".into());
        }
        Ok(())
    }
}

//! Eye-to-hand calibration: a fixed camera observes a marker carried by the
//! robot's end effector.
//!
//! For station `i`, with `E_i = base_to_ee` and `C_i = cam_to_marker`, the
//! marker pose in the base frame can be written two ways:
//!
//! ```text
//! E_i · Y = X · C_i        X = base_to_camera, Y = ee_to_marker
//! ```
//!
//! Eliminating `Y` between stations `i` and `j` gives `A X = X B` with
//! `A = E_j E_i⁻¹` (motion seen in the base frame) and `B = C_j C_i⁻¹`
//! (the same motion seen by the camera).

use nalgebra::{DMatrix, DVector, UnitQuaternion, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calib::{collinear, extrinsics_from_homography, homography_dlt, refine_pose, CalibError, CameraIntrinsics, LmParams, Pixel};
use crate::geom3::{average_rotations, rodrigues_exp, rodrigues_log, rotation_angle, FrameId, Pose, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HandEyeError {
    #[error("need at least {needed} stations, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("need at least {needed} motion pairs, got {got}")]
    TooFewPairs { needed: usize, got: usize },
    #[error("degenerate motions: {0}")]
    DegenerateMotions(String),
    #[error("marker side length must be positive, got {0}")]
    InvalidMarker(f64),
    #[error(transparent)]
    Calib(#[from] CalibError),
}

/// One robot station: the kinematic end-effector pose and the observed
/// marker pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationSample {
    pub base_to_ee: Pose,
    pub cam_to_marker: Pose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// Stations (i, i+1): N-1 pairs.
    #[default]
    Consecutive,
    /// Every (i, j) with i < j: N(N-1)/2 pairs.
    AllPairs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HandEyeParams {
    pub pairing: Pairing,
    /// Motions rotating less than this (radians) carry no axis information.
    pub min_motion_angle: f64,
    /// Motions rotating more than this (radians) have an unstable axis.
    pub max_motion_angle: f64,
    /// Smallest angle (radians) that at least two motion axes must differ by.
    pub min_axis_separation: f64,
}

impl Default for HandEyeParams {
    fn default() -> Self {
        Self {
            pairing: Pairing::Consecutive,
            min_motion_angle: 1e-3,
            max_motion_angle: std::f64::consts::PI - 1e-3,
            min_axis_separation: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandEyeResult {
    pub base_frame: FrameId,
    pub camera_frame: FrameId,
    pub base_to_camera: Pose,
    pub ee_to_marker: Pose,
    /// RMS over motion pairs of the rotation angle between AX and XB, radians.
    pub rot_residual: f64,
    /// RMS over motion pairs of the translation gap between AX and XB, meters.
    pub trans_residual: f64,
    pub pairs: usize,
}

/// Builds the `(A, B)` motion pairs.
pub fn relative_motions(samples: &[StationSample], pairing: Pairing) -> Result<Vec<(Pose, Pose)>, HandEyeError> {
    if samples.len() < 2 {
        return Err(HandEyeError::TooFewSamples { needed: 2, got: samples.len() });
    }
    let motion = |i: usize, j: usize| {
        let (si, sj) = (&samples[i], &samples[j]);
        (sj.base_to_ee.compose(&si.base_to_ee.inverse()), sj.cam_to_marker.compose(&si.cam_to_marker.inverse()))
    };
    let n = samples.len();
    Ok(match pairing {
        Pairing::Consecutive => (0..n - 1).map(|i| motion(i, i + 1)).collect(),
        Pairing::AllPairs => (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| motion(i, j)).collect(),
    })
}

fn check_motions(pairs: &[(Pose, Pose)], params: &HandEyeParams) -> Result<(), HandEyeError> {
    if pairs.len() < 2 {
        return Err(HandEyeError::TooFewPairs { needed: 2, got: pairs.len() });
    }
    let mut axes = Vec::with_capacity(pairs.len());
    for (i, (a, b)) in pairs.iter().enumerate() {
        for (name, m) in [("A", a), ("B", b)] {
            let angle = rotation_angle(m.rotation());
            if !(angle > params.min_motion_angle && angle < params.max_motion_angle) {
                return Err(HandEyeError::DegenerateMotions(format!(
                    "motion {i} ({name}) rotates {angle:.3e} rad, outside ({:.1e}, {:.6})",
                    params.min_motion_angle, params.max_motion_angle
                )));
            }
        }
        axes.push(a.rotation().axis().expect("nonzero angle").into_inner());
    }
    let separated =
        axes.iter().enumerate().any(|(i, u)| axes[i + 1..].iter().any(|v| u.dot(v).abs().min(1.0).acos() > params.min_axis_separation));
    if !separated {
        return Err(HandEyeError::DegenerateMotions("all motion axes are parallel".into()));
    }
    Ok(())
}

/// Modified Rodrigues vector 2·sin(θ/2)·n.
fn half_angle_vector(q: &UnitQuaternion<f64>) -> Vec3 {
    let q = crate::geom3::canonicalize(*q);
    q.quaternion().imag() * 2.0
}

fn least_squares(a: DMatrix<f64>, b: DVector<f64>) -> Option<DVector<f64>> {
    a.svd(true, true).solve(&b, 1e-14).ok()
}

/// One linear rotation stage: finds R with R_A R = R R_B for every pair.
fn tsai_rotation(pairs: &[(UnitQuaternion<f64>, UnitQuaternion<f64>)]) -> Option<UnitQuaternion<f64>> {
    let n = pairs.len();
    let mut m = DMatrix::zeros(3 * n, 3);
    let mut rhs = DVector::zeros(3 * n);
    for (k, (ra, rb)) in pairs.iter().enumerate() {
        let pa = half_angle_vector(ra);
        let pb = half_angle_vector(rb);
        m.view_mut((3 * k, 0), (3, 3)).copy_from(&crate::geom3::skew(&(pa + pb)));
        rhs.rows_mut(3 * k, 3).copy_from(&(pb - pa));
    }
    let k = least_squares(m, rhs)?;
    // k = tan(φ/2)·u
    let k = Vec3::new(k[0], k[1], k[2]);
    let norm = k.norm();
    if !norm.is_finite() {
        return None;
    }
    if norm == 0.0 {
        return Some(UnitQuaternion::identity());
    }
    Some(rodrigues_exp(&(k / norm * (2.0 * norm.atan()))))
}

fn residuals(pairs: &[(Pose, Pose)], x: &Pose) -> (f64, f64) {
    let mut rot = 0.0;
    let mut trans = 0.0;
    for (a, b) in pairs {
        let ax = a.compose(x);
        let xb = x.compose(b);
        rot += rotation_angle(&(ax.rotation().inverse() * xb.rotation())).powi(2);
        trans += (ax.translation() - xb.translation()).norm_squared();
    }
    let n = pairs.len() as f64;
    ((rot / n).sqrt(), (trans / n).sqrt())
}

/// Tsai-Lenz solve of `A X = X B`. Returns X and the RMS rotation and
/// translation residuals.
///
/// The rotation stage runs twice: the second pass re-centers the camera-side
/// motions on the first estimate, so the remaining correction is small and
/// the half-angle parameterization stays well conditioned even when X
/// rotates by nearly π.
pub fn solve_ax_xb(pairs: &[(Pose, Pose)], params: &HandEyeParams) -> Result<(Pose, f64, f64), HandEyeError> {
    check_motions(pairs, params)?;
    let rots: Vec<_> = pairs.iter().map(|(a, b)| (*a.rotation(), *b.rotation())).collect();
    let degenerate = || HandEyeError::DegenerateMotions("rotation system is rank deficient".into());
    let r0 = tsai_rotation(&rots).ok_or_else(degenerate)?;
    let recentered: Vec<_> = rots.iter().map(|(ra, rb)| (*ra, r0 * rb * r0.inverse())).collect();
    let r1 = tsai_rotation(&recentered).ok_or_else(degenerate)?;
    let rx = r1 * r0;

    let n = pairs.len();
    let mut m = DMatrix::zeros(3 * n, 3);
    let mut rhs = DVector::zeros(3 * n);
    for (k, (a, b)) in pairs.iter().enumerate() {
        let ra = a.rotation_matrix() - nalgebra::Matrix3::identity();
        m.view_mut((3 * k, 0), (3, 3)).copy_from(&ra);
        rhs.rows_mut(3 * k, 3).copy_from(&(rx * b.translation() - a.translation()));
    }
    let t = least_squares(m, rhs).ok_or_else(degenerate)?;
    let x = Pose::new(rx, Vec3::new(t[0], t[1], t[2]));
    if !x.is_finite() {
        return Err(degenerate());
    }
    let (rot, trans) = residuals(pairs, &x);
    Ok((x, rot, trans))
}

/// Recovers `base_to_camera` and the constant `ee_to_marker` from robot
/// stations observed by a fixed camera.
pub fn calibrate_eye_to_hand(samples: &[StationSample], params: &HandEyeParams) -> Result<HandEyeResult, HandEyeError> {
    if samples.len() < 3 {
        return Err(HandEyeError::TooFewSamples { needed: 3, got: samples.len() });
    }
    let pairs = relative_motions(samples, params.pairing)?;
    let (x, rot_residual, trans_residual) = solve_ax_xb(&pairs, params)?;
    // Y_i = E_i⁻¹ X C_i, averaged over stations.
    let ys: Vec<Pose> = samples.iter().map(|s| s.base_to_ee.inverse().compose(&x).compose(&s.cam_to_marker)).collect();
    let q = average_rotations(&ys.iter().map(|y| *y.rotation()).collect::<Vec<_>>()).expect("nonempty");
    let t = ys.iter().map(|y| *y.translation()).sum::<Vec3>() / ys.len() as f64;
    Ok(HandEyeResult {
        base_frame: FrameId::robot_base(),
        camera_frame: FrameId::camera(),
        base_to_camera: x,
        ee_to_marker: Pose::new(q, t),
        rot_residual,
        trans_residual,
        pairs: pairs.len(),
    })
}

/// Square planar marker. Corners run counter-clockwise from the top-left as
/// seen from the marker's +z side: (-s/2, s/2), (-s/2, -s/2), (s/2, -s/2),
/// (s/2, s/2).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkerSpec {
    pub side_length: f64,
}

impl MarkerSpec {
    pub fn new(side_length: f64) -> Result<Self, HandEyeError> {
        if !(side_length > 0.0) || !side_length.is_finite() {
            return Err(HandEyeError::InvalidMarker(side_length));
        }
        Ok(Self { side_length })
    }

    pub fn corners(&self) -> [Vec3; 4] {
        let h = self.side_length / 2.0;
        [Vec3::new(-h, h, 0.0), Vec3::new(-h, -h, 0.0), Vec3::new(h, -h, 0.0), Vec3::new(h, h, 0.0)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkerPose {
    pub cam_to_marker: Pose,
    /// Per-component reprojection RMS of the four corners, pixels.
    pub rms_px: f64,
}

/// Marker pose from its four observed corners.
pub fn marker_pnp(k: &CameraIntrinsics, spec: &MarkerSpec, corners_px: &[Pixel; 4]) -> Result<MarkerPose, HandEyeError> {
    k.validate()?;
    MarkerSpec::new(spec.side_length)?;
    if collinear(corners_px) {
        return Err(CalibError::DegenerateConfiguration("marker corners are collinear".into()).into());
    }
    let corners = spec.corners();
    let plane: Vec<Vector2<f64>> = corners.iter().map(|c| c.xy()).collect();
    let normalized: Vec<Vector2<f64>> = corners_px.iter().map(|p| k.pixel_to_normalized(p)).collect();
    let h = homography_dlt(&plane, &normalized)?;
    let pose0 = extrinsics_from_homography(&CameraIntrinsics::pinhole(1.0, 1.0, 0.0, 0.0), &h)?;
    let (pose, rms_px) = refine_pose(k, &corners, corners_px, &pose0, &LmParams::default())?;
    Ok(MarkerPose { cam_to_marker: pose, rms_px })
}

/// Rotation-vector distance, for callers that compare against thresholds.
pub fn rotation_distance(a: &Pose, b: &Pose) -> f64 {
    rodrigues_log(&(a.rotation().inverse() * b.rotation())).map(|v| v.norm()).unwrap_or(std::f64::consts::PI)
}

//! Planar chessboard calibration of a pinhole camera with two-term radial
//! distortion, plus color/depth extrinsics and a depth-deviation metric.
//!
//! Board poses follow the crate naming: `camera_to_board` maps board-frame
//! points (z = 0 on the board) into camera coordinates.

mod refine;

use nalgebra::{DMatrix, Matrix2, Matrix3, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{Plane, PointCloud};
use crate::geom3::{average_rotations, orthonormalize, pose_error, Pose, Vec3};

pub use refine::{refine_pose, refine_reprojection, LmParams, RefineResult};

/// Pixel coordinates (u right, v down).
pub type Pixel = Vector2<f64>;

/// Condition number of the closed-form constraint system above which the
/// view set is rejected.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibError {
    #[error("point has depth {z} m; it must lie in front of the camera")]
    BehindCamera { z: f64 },
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("need at least {needed} views, got {got}")]
    InsufficientViews { needed: usize, got: usize },
    #[error("ill-conditioned: {0}")]
    IllConditioned(String),
    #[error("refinement diverged: cost rose through {0} consecutive damping increases")]
    DivergedRefinement(usize),
    #[error("empty input")]
    EmptyInput,
    #[error("invalid view: {0}")]
    InvalidView(String),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub skew: f64,
    #[serde(default)]
    pub k1: f64,
    #[serde(default)]
    pub k2: f64,
}

impl CameraIntrinsics {
    /// Distortion-free, zero-skew camera.
    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self { fx, fy, cx, cy, skew: 0.0, k1: 0.0, k2: 0.0 }
    }

    pub fn validate(&self) -> Result<(), CalibError> {
        let all = [self.fx, self.fy, self.cx, self.cy, self.skew, self.k1, self.k2];
        if !all.iter().all(|v| v.is_finite()) {
            return Err(CalibError::InvalidIntrinsics("non-finite parameter".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(CalibError::InvalidIntrinsics(format!("focal lengths must be positive, got fx={} fy={}", self.fx, self.fy)));
        }
        Ok(())
    }

    /// Validates and additionally checks the principal point lies inside a
    /// `width` x `height` image.
    pub fn validate_within(&self, width: f64, height: f64) -> Result<(), CalibError> {
        self.validate()?;
        if !(0.0..=width).contains(&self.cx) || !(0.0..=height).contains(&self.cy) {
            return Err(CalibError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {width}x{height} image",
                self.cx, self.cy
            )));
        }
        Ok(())
    }

    /// The affine part as a 3x3 matrix (distortion excluded).
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, self.skew, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    fn distortion_factor(&self, r2: f64) -> f64 {
        1.0 + self.k1 * r2 + self.k2 * r2 * r2
    }

    /// Maps undistorted normalized coordinates to pixels.
    pub fn normalized_to_pixel(&self, xn: &Vector2<f64>) -> Pixel {
        let f = self.distortion_factor(xn.norm_squared());
        let (xd, yd) = (f * xn.x, f * xn.y);
        Pixel::new(self.fx * xd + self.skew * yd + self.cx, self.fy * yd + self.cy)
    }

    /// Inverse of [`normalized_to_pixel`](Self::normalized_to_pixel); the
    /// distortion is inverted by Newton iteration.
    pub fn pixel_to_normalized(&self, px: &Pixel) -> Vector2<f64> {
        let yd = (px.y - self.cy) / self.fy;
        let xd = (px.x - self.cx - self.skew * yd) / self.fx;
        let target = Vector2::new(xd, yd);
        if self.k1 == 0.0 && self.k2 == 0.0 {
            return target;
        }
        let mut x = target;
        for _ in 0..50 {
            let r2 = x.norm_squared();
            let f = self.distortion_factor(r2);
            let g = 2.0 * (self.k1 + 2.0 * self.k2 * r2);
            let residual = x * f - target;
            let j = Matrix2::new(f + g * x.x * x.x, g * x.x * x.y, g * x.x * x.y, f + g * x.y * x.y);
            let Some(jinv) = j.try_inverse() else { break };
            let step = jinv * residual;
            x -= step;
            if step.norm() <= 1e-16 * (1.0 + x.norm()) {
                break;
            }
        }
        x
    }

    /// Camera-frame point at depth `z` that projects to `px`.
    pub fn unproject(&self, px: &Pixel, z: f64) -> Vec3 {
        let xn = self.pixel_to_normalized(px);
        Vec3::new(xn.x * z, xn.y * z, z)
    }
}

/// Projects a camera-frame point to pixels.
pub fn project(k: &CameraIntrinsics, cam_point: &Vec3) -> Result<Pixel, CalibError> {
    if !(cam_point.z > 1e-9) {
        return Err(CalibError::BehindCamera { z: cam_point.z });
    }
    Ok(k.normalized_to_pixel(&Vector2::new(cam_point.x / cam_point.z, cam_point.y / cam_point.z)))
}

/// Board corners (z = 0, meters) and where they were observed (pixels).
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarView {
    object_points: Vec<Vec3>,
    image_points: Vec<Pixel>,
}

impl PlanarView {
    pub fn new(object_points: Vec<Vec3>, image_points: Vec<Pixel>) -> Result<Self, CalibError> {
        if object_points.len() != image_points.len() {
            return Err(CalibError::InvalidView(format!("{} object points but {} image points", object_points.len(), image_points.len())));
        }
        if object_points.len() < 4 {
            return Err(CalibError::InvalidView(format!("need at least 4 correspondences, got {}", object_points.len())));
        }
        if !object_points.iter().all(|p| p.iter().all(|v| v.is_finite())) || !image_points.iter().all(|p| p.iter().all(|v| v.is_finite())) {
            return Err(CalibError::InvalidView("non-finite coordinate".into()));
        }
        if let Some(p) = object_points.iter().find(|p| p.z != 0.0) {
            return Err(CalibError::InvalidView(format!("object point {p:?} is off the board plane (z must be 0)")));
        }
        let planar: Vec<Vector2<f64>> = object_points.iter().map(|p| p.xy()).collect();
        if collinear(&planar) {
            return Err(CalibError::DegenerateConfiguration("object points are collinear".into()));
        }
        Ok(Self { object_points, image_points })
    }

    pub fn object_points(&self) -> &[Vec3] {
        &self.object_points
    }

    pub fn image_points(&self) -> &[Pixel] {
        &self.image_points
    }

    pub fn len(&self) -> usize {
        self.object_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.object_points.is_empty()
    }
}

pub(crate) fn collinear(points: &[Vector2<f64>]) -> bool {
    let n = points.len() as f64;
    let c = points.iter().sum::<Vector2<f64>>() / n;
    let mut cov = Matrix2::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    !(hi > 0.0) || lo <= 1e-18 * hi
}

/// Plane-to-image homography, scaled so the bottom-right entry is 1 when
/// that entry is nonzero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(Matrix3<f64>);

impl Homography {
    pub fn new(m: Matrix3<f64>) -> Result<Self, CalibError> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(CalibError::IllConditioned("non-finite homography".into()));
        }
        let scale = if m[(2, 2)].abs() > 1e-15 * m.abs().max() { m[(2, 2)] } else { m.norm() };
        let m = m / scale;
        let det = m.determinant();
        if !(det.abs() > 1e-12) {
            return Err(CalibError::IllConditioned(format!("homography is singular (det {det:e})")));
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Maps a plane point (x, y) through the homography.
    pub fn apply(&self, p: &Vector2<f64>) -> Vector2<f64> {
        let h = self.0 * p.push(1.0);
        Vector2::new(h.x / h.z, h.y / h.z)
    }
}

/// Similarity taking the points to zero mean and mean distance sqrt(2).
fn hartley(points: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let c = points.iter().sum::<Vector2<f64>>() / n;
    let mean_dist = points.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

fn apply_affine(t: &Matrix3<f64>, p: &Vector2<f64>) -> Vector2<f64> {
    Vector2::new(t[(0, 0)] * p.x + t[(0, 2)], t[(1, 1)] * p.y + t[(1, 2)])
}

/// Direct linear transform from plane points to image points with Hartley
/// normalization of both sides.
pub fn homography_dlt(plane: &[Vector2<f64>], image: &[Vector2<f64>]) -> Result<Homography, CalibError> {
    if plane.len() != image.len() || plane.len() < 4 {
        return Err(CalibError::DegenerateConfiguration(format!("need at least 4 paired points, got {} and {}", plane.len(), image.len())));
    }
    if collinear(plane) {
        return Err(CalibError::DegenerateConfiguration("plane points are collinear".into()));
    }
    if collinear(image) {
        return Err(CalibError::DegenerateConfiguration("image points are collinear".into()));
    }
    let tp = hartley(plane);
    let ti = hartley(image);
    let n = plane.len();
    // Padding to at least 9 rows keeps the full right-singular basis.
    let mut a = DMatrix::zeros((2 * n).max(9), 9);
    for (k, (p, q)) in plane.iter().zip(image).enumerate() {
        let p = apply_affine(&tp, p);
        let q = apply_affine(&ti, q);
        let (x, y, u, v) = (p.x, p.y, q.x, q.y);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for j in 0..9 {
            a[(2 * k, j)] = r0[j];
            a[(2 * k + 1, j)] = r1[j];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("svd v_t");
    let imin = svd.singular_values.imin();
    let h = v_t.row(imin);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let ti_inv = ti.try_inverse().expect("similarity is invertible");
    Homography::new(ti_inv * hn * tp)
}

/// Homography from the board plane to the image for one view.
pub fn estimate_homography(view: &PlanarView) -> Result<Homography, CalibError> {
    let plane: Vec<Vector2<f64>> = view.object_points.iter().map(|p| p.xy()).collect();
    homography_dlt(&plane, &view.image_points)
}

fn constraint_row(h: &Matrix3<f64>, i: usize, j: usize) -> [f64; 6] {
    let hi = h.column(i);
    let hj = h.column(j);
    [
        hi[0] * hj[0],
        hi[0] * hj[1] + hi[1] * hj[0],
        hi[1] * hj[1],
        hi[2] * hj[0] + hi[0] * hj[2],
        hi[2] * hj[1] + hi[1] * hj[2],
        hi[2] * hj[2],
    ]
}

/// Closed-form intrinsics from three or more board homographies, assuming
/// zero skew and no distortion.
pub fn zhang_intrinsics(homographies: &[Homography]) -> Result<CameraIntrinsics, CalibError> {
    if homographies.len() < 3 {
        return Err(CalibError::InsufficientViews { needed: 3, got: homographies.len() });
    }
    // Rescale pixels to order one so the constraint matrix is well scaled.
    let s = homographies.iter().map(|h| h.0.column(2).xy().norm() / h.0[(2, 2)].abs().max(1e-300)).fold(0.0, f64::max).max(1.0);
    let n = Matrix3::new(1.0 / s, 0.0, 0.0, 0.0, 1.0 / s, 0.0, 0.0, 0.0, 1.0);

    let rows = 2 * homographies.len() + 1;
    let mut v = DMatrix::zeros(rows, 6);
    for (k, h) in homographies.iter().enumerate() {
        let hn = n * h.0;
        let hn = hn / hn.norm();
        let v12 = constraint_row(&hn, 0, 1);
        let v11 = constraint_row(&hn, 0, 0);
        let v22 = constraint_row(&hn, 1, 1);
        for j in 0..6 {
            v[(2 * k, j)] = v12[j];
            v[(2 * k + 1, j)] = v11[j] - v22[j];
        }
    }
    // Zero-skew constraint B12 = 0.
    v[(rows - 1, 1)] = 1.0;

    let svd = v.svd(false, true);
    let mut sv: Vec<(f64, usize)> = svd.singular_values.iter().copied().zip(0..).collect();
    sv.sort_by(|a, b| b.0.total_cmp(&a.0));
    let cond = sv[0].0 / sv[4].0;
    if !(cond <= MAX_CONDITION) {
        return Err(CalibError::IllConditioned(format!(
            "constraint system condition number {cond:e} exceeds {MAX_CONDITION:e}; board orientations are too similar"
        )));
    }
    let v_t = svd.v_t.expect("svd v_t");
    let mut b: Vec<f64> = v_t.row(sv[5].1).iter().copied().collect();
    if b[0] < 0.0 {
        b.iter_mut().for_each(|x| *x = -*x);
    }
    let (b11, b12, b22, b13, b23, b33) = (b[0], b[1], b[2], b[3], b[4], b[5]);
    let den = b11 * b22 - b12 * b12;
    let ill = || CalibError::IllConditioned("closed-form solution is not a valid camera".into());
    if !(den > 0.0 && b11 > 0.0) {
        return Err(ill());
    }
    let v0 = (b12 * b13 - b11 * b23) / den;
    let lambda = b33 - (b13 * b13 + v0 * (b12 * b13 - b11 * b23)) / b11;
    if !(lambda / b11 > 0.0) {
        return Err(ill());
    }
    let alpha = (lambda / b11).sqrt();
    let beta = (lambda * b11 / den).sqrt();
    let gamma = -b12 * alpha * alpha * beta / lambda;
    let u0 = gamma * v0 / beta - b13 * alpha * alpha / lambda;
    let k = CameraIntrinsics::pinhole(alpha * s, beta * s, u0 * s, v0 * s);
    k.validate().map_err(|_| ill())?;
    Ok(k)
}

/// Board pose in the camera frame (`camera_to_board`) from a homography.
pub fn extrinsics_from_homography(k: &CameraIntrinsics, h: &Homography) -> Result<Pose, CalibError> {
    k.validate()?;
    let kinv = k.matrix().try_inverse().ok_or_else(|| CalibError::IllConditioned("singular camera matrix".into()))?;
    let a = kinv * h.0;
    let (n1, n2) = (a.column(0).norm(), a.column(1).norm());
    if !(n1 > 1e-300 && n2 > 1e-300) || !n1.is_finite() || !n2.is_finite() {
        return Err(CalibError::IllConditioned("homography columns vanish".into()));
    }
    let mut lambda = 2.0 / (n1 + n2);
    if (a.column(2) * lambda).z < 0.0 {
        lambda = -lambda;
    }
    let r1: Vec3 = a.column(0) * lambda;
    let r2: Vec3 = a.column(1) * lambda;
    let r3 = r1.cross(&r2);
    let t: Vec3 = a.column(2) * lambda;
    let r = orthonormalize(&Matrix3::from_columns(&[r1, r2, r3]));
    Ok(Pose::from_matrix(&r, t))
}

/// Per-component reprojection RMS of `views` under `k` and board poses.
pub fn reprojection_rms(k: &CameraIntrinsics, views: &[PlanarView], camera_to_board: &[Pose]) -> Result<f64, CalibError> {
    let mut ss = 0.0;
    let mut count = 0usize;
    for (view, pose) in views.iter().zip(camera_to_board) {
        for (x, obs) in view.object_points.iter().zip(&view.image_points) {
            let px = project(k, &pose.transform_point(x))?;
            ss += (px - obs).norm_squared();
            count += 2;
        }
    }
    if count == 0 {
        return Err(CalibError::EmptyInput);
    }
    Ok((ss / count as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub intrinsics: CameraIntrinsics,
    /// One `camera_to_board` pose per input view.
    pub board_poses: Vec<Pose>,
    /// Per-component reprojection RMS after refinement, pixels.
    pub rms_px: f64,
    /// Same metric for the closed-form estimate.
    pub initial_rms_px: f64,
    pub iterations: usize,
}

/// Closed-form estimate followed by joint nonlinear refinement.
pub fn calibrate(views: &[PlanarView], params: &LmParams) -> Result<CalibrationResult, CalibError> {
    if views.len() < 3 {
        return Err(CalibError::InsufficientViews { needed: 3, got: views.len() });
    }
    let hs = views.iter().map(estimate_homography).collect::<Result<Vec<_>, _>>()?;
    let k0 = zhang_intrinsics(&hs)?;
    let poses0 = hs.iter().map(|h| extrinsics_from_homography(&k0, h)).collect::<Result<Vec<_>, _>>()?;
    let r = refine_reprojection(views, &k0, &poses0, params)?;
    Ok(CalibrationResult {
        intrinsics: r.intrinsics,
        board_poses: r.poses,
        rms_px: r.rms,
        initial_rms_px: r.initial_rms,
        iterations: r.iterations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StereoExtrinsic {
    /// Maps camera-B coordinates into camera A.
    pub a_to_b: Pose,
    /// Largest rotation disagreement between any two per-pair estimates, radians.
    pub max_rot_disagreement: f64,
    /// Largest translation disagreement between any two per-pair estimates, meters.
    pub max_trans_disagreement: f64,
}

/// Rigid transform between two cameras that observed the same boards.
///
/// Each pair is `(camera_a_to_board, camera_b_to_board)` for one
/// synchronized capture.
pub fn stereo_extrinsic(pairs: &[(Pose, Pose)]) -> Result<StereoExtrinsic, CalibError> {
    if pairs.is_empty() {
        return Err(CalibError::EmptyInput);
    }
    let estimates: Vec<Pose> = pairs.iter().map(|(a, b)| a.compose(&b.inverse())).collect();
    let mut max_rot: f64 = 0.0;
    let mut max_trans: f64 = 0.0;
    for i in 0..estimates.len() {
        for j in i + 1..estimates.len() {
            let (r, t) = pose_error(&estimates[i], &estimates[j]);
            max_rot = max_rot.max(r);
            max_trans = max_trans.max(t);
        }
    }
    let a_to_b = if estimates.iter().all(|e| *e == estimates[0]) {
        estimates[0]
    } else {
        let qs: Vec<_> = estimates.iter().map(|e| *e.rotation()).collect();
        let q = average_rotations(&qs).ok_or(CalibError::EmptyInput)?;
        let t = estimates.iter().map(|e| *e.translation()).sum::<Vec3>() / estimates.len() as f64;
        Pose::new(q, t)
    };
    Ok(StereoExtrinsic { a_to_b, max_rot_disagreement: max_rot, max_trans_disagreement: max_trans })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthDeviation {
    /// Mean signed distance to the plane along its normal, meters.
    pub mean: f64,
    pub rms: f64,
    /// Largest absolute distance, meters.
    pub max: f64,
}

/// Signed orthogonal distances of a measured cloud from a reference plane.
pub fn depth_deviation(measured: &PointCloud, reference: &Plane) -> Result<DepthDeviation, CalibError> {
    if measured.is_empty() {
        return Err(CalibError::EmptyInput);
    }
    let norm = reference.normal.norm();
    let n = measured.len() as f64;
    let mut sum = 0.0;
    let mut ss = 0.0;
    let mut max: f64 = 0.0;
    for p in measured.points() {
        let d = reference.signed_distance(p) / norm;
        sum += d;
        ss += d * d;
        max = max.max(d.abs());
    }
    Ok(DepthDeviation { mean: sum / n, rms: (ss / n).sqrt(), max })
}

/// Inner-corner layout of a chessboard.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoardSpec {
    pub cols: usize,
    pub rows: usize,
    pub square_size_m: f64,
}

impl BoardSpec {
    /// Corners row by row, x along columns, starting at the origin.
    pub fn object_points(&self) -> Vec<Vec3> {
        let mut pts = Vec::with_capacity(self.cols * self.rows);
        for j in 0..self.rows {
            for i in 0..self.cols {
                pts.push(Vec3::new(i as f64 * self.square_size_m, j as f64 * self.square_size_m, 0.0));
            }
        }
        pts
    }
}

/// One view as stored in a correspondence file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewRecord {
    /// May be omitted when the file carries a board spec.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<Vec<[f64; 3]>>,
    pub image: Vec<[f64; 2]>,
}

impl ViewRecord {
    pub fn from_view(view: &PlanarView) -> Self {
        Self {
            object: Some(view.object_points.iter().map(|p| [p.x, p.y, p.z]).collect()),
            image: view.image_points.iter().map(|p| [p.x, p.y]).collect(),
        }
    }
}

/// Correspondence file: either a bare list of views or a board spec with
/// views whose object points are implied by the board.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CorrespondenceFile {
    Views(Vec<ViewRecord>),
    Board { board: BoardSpec, views: Vec<ViewRecord> },
}

impl CorrespondenceFile {
    pub fn into_views(self) -> Result<Vec<PlanarView>, CalibError> {
        let (board, records) = match self {
            CorrespondenceFile::Views(v) => (None, v),
            CorrespondenceFile::Board { board, views } => (Some(board), views),
        };
        records
            .into_iter()
            .enumerate()
            .map(|(i, rec)| {
                let object = match (rec.object, board) {
                    (Some(o), _) => o.into_iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect(),
                    (None, Some(b)) => b.object_points(),
                    (None, None) => {
                        return Err(CalibError::InvalidView(format!("view {i} has no object points and no board spec is given")))
                    }
                };
                let image = rec.image.into_iter().map(|p| Pixel::new(p[0], p[1])).collect();
                PlanarView::new(object, image).map_err(|e| match e {
                    CalibError::InvalidView(m) => CalibError::InvalidView(format!("view {i}: {m}")),
                    other => other,
                })
            })
            .collect()
    }
}

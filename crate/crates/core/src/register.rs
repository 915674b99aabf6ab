//! Rigid registration of a taught cloud onto a freshly scanned one.
//!
//! [`align_object`] is the entry point: PCA gives up to four coarse
//! hypotheses, ICP refines each, and the best-scoring result wins.

use nalgebra::{Matrix3, Matrix6, UnitQuaternion, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{covariance, sorted_eigen, KdTree, PointCloud};
use crate::geom3::{rodrigues_exp, Pose, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegisterError {
    #[error("point sets are degenerate (collinear or coincident)")]
    DegenerateGeometry,
    #[error("source has {src} points but destination has {dst}")]
    LengthMismatch { src: usize, dst: usize },
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("no source point lies within the correspondence gate of the target")]
    NoCorrespondences,
    #[error("point-to-plane ICP needs target normals")]
    MissingNormals,
    #[error("invalid ICP parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IcpVariant {
    #[default]
    PointToPoint,
    PointToPlane,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcpParams {
    pub max_iterations: usize,
    /// Correspondence gate in meters.
    pub max_correspondence_dist: f64,
    /// Stop once the inlier RMSE improves by less than this (meters).
    pub convergence_delta_rmse: f64,
    pub variant: IcpVariant,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self { max_iterations: 60, max_correspondence_dist: 0.02, convergence_delta_rmse: 1e-6, variant: IcpVariant::PointToPoint }
    }
}

impl IcpParams {
    pub fn validate(&self) -> Result<(), RegisterError> {
        if self.max_iterations < 1 {
            return Err(RegisterError::InvalidParams("max_iterations must be at least 1".into()));
        }
        if !(self.max_correspondence_dist > 0.0) || !self.max_correspondence_dist.is_finite() {
            return Err(RegisterError::InvalidParams("max_correspondence_dist must be positive".into()));
        }
        if !(self.convergence_delta_rmse > 0.0) || !self.convergence_delta_rmse.is_finite() {
            return Err(RegisterError::InvalidParams("convergence_delta_rmse must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    /// Maps the source (registered) cloud onto the target (scanned) cloud.
    pub transform: Pose,
    pub fitness: f64,
    pub inlier_rmse: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Inlier RMSE at the initial pose and after every accepted update.
    pub rmse_history: Vec<f64>,
}

/// Least-squares rigid transform taking `src[i]` onto `dst[i]` (no scale).
pub fn umeyama_fit(src: &[Vec3], dst: &[Vec3]) -> Result<Pose, RegisterError> {
    if src.len() != dst.len() {
        return Err(RegisterError::LengthMismatch { src: src.len(), dst: dst.len() });
    }
    if src.len() < 3 {
        return Err(RegisterError::TooFewPoints { needed: 3, got: src.len() });
    }
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vec3>() / n;
    let mu_d = dst.iter().sum::<Vec3>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (d - mu_d) * (s - mu_s).transpose();
    }
    let svd = h.svd(true, true);
    let mut sv = svd.singular_values;
    sv.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    if !(sv[0] > 0.0) || sv[1] <= 1e-12 * sv[0] {
        return Err(RegisterError::DegenerateGeometry);
    }
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        // The smallest singular value takes the sign flip.
        let imin = svd.singular_values.imin();
        d[(imin, imin)] = -1.0;
    }
    let r = u * d * v_t;
    let t = mu_d - r * mu_s;
    Ok(Pose::from_matrix(&r, t))
}

/// Fraction of transformed source points whose nearest target point lies
/// within `gate`, and the RMSE over those inliers (0 when there are none).
pub fn compute_fitness(source: &PointCloud, target: &PointCloud, t: &Pose, gate: f64) -> (f64, f64) {
    if source.is_empty() || target.is_empty() {
        return (0.0, 0.0);
    }
    let tree = KdTree::build(target.points());
    let c = correspond(source.points(), &tree, t, gate);
    (c.fitness(source.len()), c.rmse())
}

struct Correspondences {
    src: Vec<usize>,
    dst: Vec<usize>,
    sum_sq: f64,
}

impl Correspondences {
    fn len(&self) -> usize {
        self.src.len()
    }

    fn rmse(&self) -> f64 {
        if self.src.is_empty() {
            0.0
        } else {
            (self.sum_sq / self.src.len() as f64).sqrt()
        }
    }

    fn fitness(&self, n_source: usize) -> f64 {
        if n_source == 0 {
            0.0
        } else {
            self.src.len() as f64 / n_source as f64
        }
    }
}

fn correspond(source: &[Vec3], tree: &KdTree, t: &Pose, gate: f64) -> Correspondences {
    let mut c = Correspondences { src: Vec::new(), dst: Vec::new(), sum_sq: 0.0 };
    for (i, s) in source.iter().enumerate() {
        let p = t.transform_point(s);
        let (j, d) = tree.nearest(&p).expect("nonempty target");
        if d <= gate {
            c.src.push(i);
            c.dst.push(j);
            c.sum_sq += d * d;
        }
    }
    c
}

fn point_to_plane_step(source: &[Vec3], target: &[Vec3], normals: &[Vec3], t: &Pose, c: &Correspondences) -> Option<Pose> {
    let mut jtj = Matrix6::zeros();
    let mut jtr = Vector6::zeros();
    for (&i, &j) in c.src.iter().zip(&c.dst) {
        let p = t.transform_point(&source[i]);
        let n = normals[j];
        let r = n.dot(&(p - target[j]));
        let pn = p.cross(&n);
        let row = Vector6::new(pn.x, pn.y, pn.z, n.x, n.y, n.z);
        jtj += row * row.transpose();
        jtr += row * r;
    }
    let x = jtj.cholesky()?.solve(&(-jtr));
    if !x.iter().all(|v| v.is_finite()) {
        return None;
    }
    let delta = Pose::new(rodrigues_exp(&Vec3::new(x[0], x[1], x[2])), Vec3::new(x[3], x[4], x[5]));
    Some(delta.compose(t))
}

/// Iterative closest point from `init`.
///
/// For point-to-point an update that would raise the inlier RMSE is not
/// taken; the iteration stops at the previous pose, which keeps
/// `rmse_history` non-increasing.
pub fn icp(source: &PointCloud, target: &PointCloud, init: &Pose, params: &IcpParams) -> Result<AlignmentResult, RegisterError> {
    check_inputs(source, target, params)?;
    let tree = KdTree::build(target.points());
    icp_with_tree(source, target, &tree, init, params)
}

fn check_inputs(source: &PointCloud, target: &PointCloud, params: &IcpParams) -> Result<(), RegisterError> {
    params.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(RegisterError::TooFewPoints { needed: 1, got: 0 });
    }
    if params.variant == IcpVariant::PointToPlane && target.normals().is_none() {
        return Err(RegisterError::MissingNormals);
    }
    Ok(())
}

fn icp_with_tree(
    source: &PointCloud,
    target: &PointCloud,
    tree: &KdTree,
    init: &Pose,
    params: &IcpParams,
) -> Result<AlignmentResult, RegisterError> {
    let src = source.points();
    let tgt = target.points();
    let gate = params.max_correspondence_dist;

    let mut pose = *init;
    let mut cur = correspond(src, tree, &pose, gate);
    if cur.len() == 0 {
        return Err(RegisterError::NoCorrespondences);
    }
    let mut history = vec![cur.rmse()];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < params.max_iterations {
        let candidate = match params.variant {
            IcpVariant::PointToPoint => {
                let a: Vec<Vec3> = cur.src.iter().map(|&i| src[i]).collect();
                let b: Vec<Vec3> = cur.dst.iter().map(|&j| tgt[j]).collect();
                umeyama_fit(&a, &b).ok()
            }
            IcpVariant::PointToPlane => {
                let normals = target.normals().expect("checked");
                point_to_plane_step(src, tgt, normals, &pose, &cur)
            }
        };
        let Some(candidate) = candidate else { break };
        iterations += 1;
        let next = correspond(src, tree, &candidate, gate);
        if next.len() == 0 {
            break;
        }
        let improvement = cur.rmse() - next.rmse();
        if params.variant == IcpVariant::PointToPoint && improvement < 0.0 {
            converged = -improvement < params.convergence_delta_rmse;
            break;
        }
        pose = candidate;
        cur = next;
        history.push(cur.rmse());
        if improvement.abs() < params.convergence_delta_rmse {
            converged = true;
            break;
        }
    }

    Ok(AlignmentResult {
        transform: pose,
        fitness: cur.fitness(src.len()),
        inlier_rmse: cur.rmse(),
        iterations,
        converged,
        rmse_history: history,
    })
}

fn principal_frame(cloud: &PointCloud) -> Result<(Vec3, Matrix3<f64>), RegisterError> {
    if cloud.len() < 3 {
        return Err(RegisterError::TooFewPoints { needed: 3, got: cloud.len() });
    }
    let c = cloud.centroid().expect("nonempty");
    let (vals, vecs) = sorted_eigen(covariance(cloud.points(), &c));
    if vals[1].max(0.0).sqrt() <= 1e-9 {
        return Err(RegisterError::DegenerateGeometry);
    }
    // Descending spread; third axis completes a right-handed frame.
    let e1 = vecs[2].normalize();
    let e2 = vecs[1].normalize();
    let e3 = e1.cross(&e2);
    Ok((c, Matrix3::from_columns(&[e1, e2, e3])))
}

/// Centroid-and-principal-axes alignment of `source` onto `target`.
///
/// Returns four proper-rotation hypotheses, one per sign choice of the
/// principal axes that keeps the frame right-handed.
pub fn coarse_align_pca(source: &PointCloud, target: &PointCloud) -> Result<Vec<Pose>, RegisterError> {
    let (cs, rs) = principal_frame(source)?;
    let (ct, rt) = principal_frame(target)?;
    let flips = [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]];
    Ok(flips
        .iter()
        .map(|f| {
            let d = Matrix3::from_diagonal(&Vec3::new(f[0], f[1], f[2]));
            let r = rt * d * rs.transpose();
            let q = UnitQuaternion::from_matrix(&r);
            let pose = Pose::new(q, Vec3::zeros());
            Pose::new(q, ct - pose.transform_point(&cs))
        })
        .collect())
}

fn better(a: &AlignmentResult, b: &AlignmentResult) -> bool {
    a.fitness > b.fitness || (a.fitness == b.fitness && a.inlier_rmse < b.inlier_rmse)
}

/// Runs ICP from every hypothesis and keeps the best: highest fitness, then
/// lowest RMSE, then lowest hypothesis index.
pub fn align_from_hypotheses(
    registered: &PointCloud,
    scanned: &PointCloud,
    hypotheses: &[Pose],
    params: &IcpParams,
) -> Result<AlignmentResult, RegisterError> {
    check_inputs(registered, scanned, params)?;
    let tree = KdTree::build(scanned.points());
    let mut best: Option<AlignmentResult> = None;
    let mut first_err = None;
    for h in hypotheses {
        match icp_with_tree(registered, scanned, &tree, h, params) {
            Ok(r) => {
                if best.as_ref().is_none_or(|b| better(&r, b)) {
                    best = Some(r);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    best.ok_or_else(|| first_err.unwrap_or(RegisterError::NoCorrespondences))
}

/// Estimates the transform taking `registered` onto `scanned`.
pub fn align_object(registered: &PointCloud, scanned: &PointCloud, params: &IcpParams) -> Result<AlignmentResult, RegisterError> {
    let hyps = coarse_align_pca(registered, scanned)?;
    align_from_hypotheses(registered, scanned, &hyps, params)
}

/// `steps` evenly spaced rotations of `registered` about the z axis with
/// the two centroids superimposed. Suits objects resting on a horizontal
/// surface, where the unknown motion is mostly a yaw.
pub fn yaw_hypotheses(registered: &PointCloud, scanned: &PointCloud, steps: usize) -> Result<Vec<Pose>, RegisterError> {
    let (Some(cs), Some(ct)) = (registered.centroid(), scanned.centroid()) else {
        return Err(RegisterError::TooFewPoints { needed: 1, got: 0 });
    };
    Ok((0..steps)
        .map(|k| {
            let yaw = std::f64::consts::TAU * k as f64 / steps as f64;
            let q = rodrigues_exp(&Vec3::new(0.0, 0.0, yaw));
            Pose::new(q, ct - q * cs)
        })
        .collect())
}

/// ICP from each initial pose, sharing one k-d tree over `target`. The
/// outer error covers invalid inputs; the inner ones are per start.
pub fn icp_from_each(
    source: &PointCloud,
    target: &PointCloud,
    inits: &[Pose],
    params: &IcpParams,
) -> Result<Vec<Result<AlignmentResult, RegisterError>>, RegisterError> {
    check_inputs(source, target, params)?;
    let tree = KdTree::build(target.points());
    Ok(inits.iter().map(|init| icp_with_tree(source, target, &tree, init, params)).collect())
}

/// [`align_object`] with an extra caller-supplied hypothesis tried first.
pub fn align_object_from(
    registered: &PointCloud,
    scanned: &PointCloud,
    init: &Pose,
    params: &IcpParams,
) -> Result<AlignmentResult, RegisterError> {
    let mut hyps = vec![*init];
    hyps.extend(coarse_align_pca(registered, scanned)?);
    align_from_hypotheses(registered, scanned, &hyps, params)
}

//! Levenberg-Marquardt refinement of reprojection error.
//!
//! Poses are updated on the left, `R <- exp(dw)·R`, `t <- t + dt`, so the
//! state never leaves SE(3). The joint problem is solved through the Schur
//! complement on the six intrinsic parameters.

use nalgebra::{Matrix2x6, Matrix6, SMatrix, Vector2, Vector6};
use serde::{Deserialize, Serialize};

use super::{project, CalibError, CameraIntrinsics, Pixel, PlanarView};
use crate::geom3::{rodrigues_exp, skew, Pose, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmParams {
    pub max_iterations: usize,
    /// Stop when an accepted step lowers the cost by less than this fraction.
    pub relative_tolerance: f64,
    /// Consecutive rejected steps tolerated before giving up.
    pub max_escalations: usize,
    pub initial_lambda: f64,
    /// Below this per-component RMS (pixels) the fit counts as exact.
    pub rms_floor_px: f64,
}

impl Default for LmParams {
    fn default() -> Self {
        Self { max_iterations: 200, relative_tolerance: 1e-10, max_escalations: 10, initial_lambda: 1e-3, rms_floor_px: 1e-10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineResult {
    pub intrinsics: CameraIntrinsics,
    pub poses: Vec<Pose>,
    /// Per-component reprojection RMS, pixels.
    pub rms: f64,
    pub initial_rms: f64,
    pub iterations: usize,
    pub converged: bool,
}

struct LmOutcome<S> {
    state: S,
    initial_cost: f64,
    cost: f64,
    iterations: usize,
    converged: bool,
}

/// Generic damped Gauss-Newton loop. `linearize` builds whatever the solver
/// needs at a state; `solve` returns the candidate for a damping value.
fn lm_loop<S, L>(
    state: S,
    residual_count: usize,
    params: &LmParams,
    cost: impl Fn(&S) -> Result<f64, CalibError>,
    linearize: impl Fn(&S) -> L,
    solve: impl Fn(&S, &L, f64) -> Option<S>,
) -> Result<LmOutcome<S>, CalibError> {
    let mut state = state;
    let mut current = cost(&state)?;
    let initial_cost = current;
    let floor = residual_count as f64 * params.rms_floor_px * params.rms_floor_px;
    let mut lambda = params.initial_lambda;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < params.max_iterations {
        if current <= floor {
            converged = true;
            break;
        }
        let lin = linearize(&state);
        iterations += 1;
        let mut escalations = 0;
        loop {
            let candidate = solve(&state, &lin, lambda).and_then(|c| cost(&c).ok().map(|cc| (c, cc)));
            match candidate {
                Some((c, cc)) if cc < current => {
                    let gain = current - cc;
                    state = c;
                    current = cc;
                    lambda = (lambda / 10.0).max(1e-15);
                    converged = gain < params.relative_tolerance * (current + gain) || current <= floor;
                    break;
                }
                Some((_, cc)) if cc - current <= params.relative_tolerance * current + floor => {
                    // No measurable progress is possible from here.
                    converged = true;
                    break;
                }
                _ => {
                    lambda *= 10.0;
                    escalations += 1;
                    if escalations >= params.max_escalations {
                        return Err(CalibError::DivergedRefinement(escalations));
                    }
                }
            }
        }
        if converged {
            break;
        }
    }
    Ok(LmOutcome { state, initial_cost, cost: current, iterations, converged })
}

type PointTerms = (Vector2<f64>, Matrix2x6<f64>, Matrix2x6<f64>);

/// Residual and Jacobians of one observation. The intrinsic block is over
/// (fx, fy, cx, cy, k1, k2); the pose block over (dw, dt).
fn point_terms(k: &CameraIntrinsics, pose: &Pose, x: &Vec3, obs: &Pixel) -> Result<PointTerms, CalibError> {
    let rx = pose.rotation() * x;
    let pc = rx + pose.translation();
    let px = project(k, &pc)?;
    let r = px - obs;

    let iz = 1.0 / pc.z;
    let (xn, yn) = (pc.x * iz, pc.y * iz);
    let r2 = xn * xn + yn * yn;
    let f = 1.0 + k.k1 * r2 + k.k2 * r2 * r2;
    let g = 2.0 * (k.k1 + 2.0 * k.k2 * r2);
    let (xd, yd) = (f * xn, f * yn);

    let mut jk = Matrix2x6::zeros();
    jk[(0, 0)] = xd;
    jk[(0, 2)] = 1.0;
    jk[(0, 4)] = (k.fx * xn + k.skew * yn) * r2;
    jk[(0, 5)] = (k.fx * xn + k.skew * yn) * r2 * r2;
    jk[(1, 1)] = yd;
    jk[(1, 3)] = 1.0;
    jk[(1, 4)] = k.fy * yn * r2;
    jk[(1, 5)] = k.fy * yn * r2 * r2;

    let d_pix_d_dist = nalgebra::Matrix2::new(k.fx, k.skew, 0.0, k.fy);
    let d_dist_d_norm = nalgebra::Matrix2::new(f + g * xn * xn, g * xn * yn, g * xn * yn, f + g * yn * yn);
    let d_norm_d_pc = SMatrix::<f64, 2, 3>::new(iz, 0.0, -xn * iz, 0.0, iz, -yn * iz);
    let d_pix_d_pc = d_pix_d_dist * d_dist_d_norm * d_norm_d_pc;
    let mut jp = Matrix2x6::zeros();
    jp.fixed_view_mut::<2, 3>(0, 0).copy_from(&(d_pix_d_pc * -skew(&rx)));
    jp.fixed_view_mut::<2, 3>(0, 3).copy_from(&d_pix_d_pc);
    Ok((r, jk, jp))
}

fn apply_pose_step(pose: &Pose, d: &Vector6<f64>) -> Pose {
    let dw = Vec3::new(d[0], d[1], d[2]);
    let dt = Vec3::new(d[3], d[4], d[5]);
    Pose::new(rodrigues_exp(&dw) * pose.rotation(), pose.translation() + dt)
}

fn apply_intrinsics_step(k: &CameraIntrinsics, d: &Vector6<f64>) -> Option<CameraIntrinsics> {
    let out = CameraIntrinsics {
        fx: k.fx + d[0],
        fy: k.fy + d[1],
        cx: k.cx + d[2],
        cy: k.cy + d[3],
        skew: k.skew,
        k1: k.k1 + d[4],
        k2: k.k2 + d[5],
    };
    out.validate().ok().map(|_| out)
}

fn damp(m: &Matrix6<f64>, lambda: f64) -> Matrix6<f64> {
    let mut out = *m;
    for i in 0..6 {
        out[(i, i)] += lambda * (m[(i, i)] + 1e-12);
    }
    out
}

type State = (CameraIntrinsics, Vec<Pose>);

struct Normal {
    u: Matrix6<f64>,
    gc: Vector6<f64>,
    v: Vec<Matrix6<f64>>,
    w: Vec<Matrix6<f64>>,
    gp: Vec<Vector6<f64>>,
}

fn total_cost(views: &[PlanarView], k: &CameraIntrinsics, poses: &[Pose]) -> Result<f64, CalibError> {
    let mut c = 0.0;
    for (view, pose) in views.iter().zip(poses) {
        for (x, obs) in view.object_points().iter().zip(view.image_points()) {
            c += (project(k, &pose.transform_point(x))? - obs).norm_squared();
        }
    }
    Ok(c)
}

fn linearize(views: &[PlanarView], state: &State) -> Normal {
    let (k, poses) = state;
    let mut n = Normal {
        u: Matrix6::zeros(),
        gc: Vector6::zeros(),
        v: vec![Matrix6::zeros(); views.len()],
        w: vec![Matrix6::zeros(); views.len()],
        gp: vec![Vector6::zeros(); views.len()],
    };
    for (i, (view, pose)) in views.iter().zip(poses).enumerate() {
        for (x, obs) in view.object_points().iter().zip(view.image_points()) {
            // The state was accepted by the cost function, so projection succeeds.
            let Ok((r, jk, jp)) = point_terms(k, pose, x, obs) else { continue };
            n.u += jk.transpose() * jk;
            n.gc += jk.transpose() * r;
            n.v[i] += jp.transpose() * jp;
            n.w[i] += jk.transpose() * jp;
            n.gp[i] += jp.transpose() * r;
        }
    }
    n
}

fn solve_schur(state: &State, n: &Normal, lambda: f64) -> Option<State> {
    let (k, poses) = state;
    let mut s = damp(&n.u, lambda);
    let mut b = -n.gc;
    let mut vinv = Vec::with_capacity(poses.len());
    for i in 0..poses.len() {
        let vi = damp(&n.v[i], lambda).cholesky()?.inverse();
        let wv = n.w[i] * vi;
        s -= wv * n.w[i].transpose();
        b += wv * n.gp[i];
        vinv.push(vi);
    }
    let dc = s.cholesky()?.solve(&b);
    if !dc.iter().all(|v| v.is_finite()) {
        return None;
    }
    let k_new = apply_intrinsics_step(k, &dc)?;
    let poses_new = poses
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let dp = vinv[i] * (-n.gp[i] - n.w[i].transpose() * dc);
            apply_pose_step(p, &dp)
        })
        .collect();
    Some((k_new, poses_new))
}

/// Joint refinement of fx, fy, cx, cy, k1, k2 and every board pose.
///
/// Skew is held at its initial value. Fails with `DivergedRefinement` when
/// the cost rises through `max_escalations` consecutive damping increases.
pub fn refine_reprojection(
    views: &[PlanarView],
    k0: &CameraIntrinsics,
    poses0: &[Pose],
    params: &LmParams,
) -> Result<RefineResult, CalibError> {
    if views.is_empty() {
        return Err(CalibError::EmptyInput);
    }
    if views.len() != poses0.len() {
        return Err(CalibError::InvalidView(format!("{} views but {} initial poses", views.len(), poses0.len())));
    }
    k0.validate()?;
    let m: usize = views.iter().map(|v| 2 * v.len()).sum();
    let out = lm_loop((*k0, poses0.to_vec()), m, params, |(k, p)| total_cost(views, k, p), |s| linearize(views, s), solve_schur)?;
    let rms = |c: f64| (c / m as f64).sqrt();
    let (intrinsics, poses) = out.state;
    Ok(RefineResult {
        intrinsics,
        poses,
        rms: rms(out.cost),
        initial_rms: rms(out.initial_cost),
        iterations: out.iterations,
        converged: out.converged,
    })
}

/// Refines a single pose with the intrinsics held fixed. Returns the pose
/// and its per-component reprojection RMS.
pub fn refine_pose(
    k: &CameraIntrinsics,
    object_points: &[Vec3],
    image_points: &[Pixel],
    pose0: &Pose,
    params: &LmParams,
) -> Result<(Pose, f64), CalibError> {
    if object_points.is_empty() || object_points.len() != image_points.len() {
        return Err(CalibError::EmptyInput);
    }
    let m = 2 * object_points.len();
    let cost = |p: &Pose| -> Result<f64, CalibError> {
        let mut c = 0.0;
        for (x, obs) in object_points.iter().zip(image_points) {
            c += (project(k, &p.transform_point(x))? - obs).norm_squared();
        }
        Ok(c)
    };
    let lin = |p: &Pose| {
        let mut a = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for (x, obs) in object_points.iter().zip(image_points) {
            let Ok((r, _, jp)) = point_terms(k, p, x, obs) else { continue };
            a += jp.transpose() * jp;
            g += jp.transpose() * r;
        }
        (a, g)
    };
    let solve = |p: &Pose, (a, g): &(Matrix6<f64>, Vector6<f64>), lambda: f64| {
        let d = damp(a, lambda).cholesky()?.solve(&(-g));
        d.iter().all(|v| v.is_finite()).then(|| apply_pose_step(p, &d))
    };
    let out = lm_loop(*pose0, m, params, cost, lin, solve)?;
    Ok((out.state, (out.cost / m as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobian_matches_finite_differences() {
        let k = CameraIntrinsics { fx: 800.0, fy: 780.0, cx: 320.0, cy: 240.0, skew: 0.5, k1: -0.1, k2: 0.01 };
        let pose = Pose::new(rodrigues_exp(&Vec3::new(0.2, -0.3, 0.1)), Vec3::new(0.05, -0.02, 0.6));
        let x = Vec3::new(0.1, 0.07, 0.0);
        let obs = Pixel::new(300.0, 200.0);
        let (r0, jk, jp) = point_terms(&k, &pose, &x, &obs).unwrap();
        let h = 1e-6;
        for j in 0..6 {
            let mut d = Vector6::zeros();
            d[j] = h;
            let kp = apply_intrinsics_step(&k, &d).unwrap();
            let (rp, _, _) = point_terms(&kp, &pose, &x, &obs).unwrap();
            let num = (rp - r0) / h;
            assert!((num - jk.column(j)).norm() <= 1e-3 * (1.0 + jk.column(j).norm()), "intrinsic {j}");
            let (rq, _, _) = point_terms(&k, &apply_pose_step(&pose, &d), &x, &obs).unwrap();
            let num = (rq - r0) / h;
            assert!((num - jp.column(j)).norm() <= 1e-3 * (1.0 + jp.column(j).norm()), "pose {j}");
        }
    }
}

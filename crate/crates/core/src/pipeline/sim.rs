//! Synthetic scenes: surface-sampled shapes, simulated depth views and the
//! symmetry-aware pose comparison used to score them.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::{UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::cloud::PointCloud;
use crate::geom3::{pose_error, FrameId, Pose, Vec3};
use crate::sampling::{gaussian_vec3, seeded_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    /// dimensions: [size_x, size_y, size_z], centred on the origin.
    Box,
    /// dimensions: [radius, height], axis z, centred on the origin.
    Cylinder,
    /// dimensions: [leg_x, leg_y, thickness, depth]. The L profile lies in
    /// the xy plane with its outer corner at the origin, extruded over
    /// z in [-depth/2, depth/2].
    Lshape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// Meters; meaning depends on `kind`.
    pub dimensions: Vec<f64>,
    /// Points per square meter of surface.
    pub sample_density: f64,
}

impl ShapeSpec {
    pub fn cuboid(x: f64, y: f64, z: f64, density: f64) -> Self {
        Self { kind: ShapeKind::Box, dimensions: vec![x, y, z], sample_density: density }
    }

    pub fn cylinder(radius: f64, height: f64, density: f64) -> Self {
        Self { kind: ShapeKind::Cylinder, dimensions: vec![radius, height], sample_density: density }
    }

    pub fn lshape(leg_x: f64, leg_y: f64, thickness: f64, depth: f64, density: f64) -> Self {
        Self { kind: ShapeKind::Lshape, dimensions: vec![leg_x, leg_y, thickness, depth], sample_density: density }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let arity = match self.kind {
            ShapeKind::Box => 3,
            ShapeKind::Cylinder => 2,
            ShapeKind::Lshape => 4,
        };
        let bad = |m: String| Err(PipelineError::InvalidSpec(m));
        if self.dimensions.len() != arity {
            return bad(format!("{:?} needs {arity} dimensions, got {}", self.kind, self.dimensions.len()));
        }
        if self.dimensions.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return bad(format!("dimensions must be positive, got {:?}", self.dimensions));
        }
        if !(self.sample_density.is_finite() && self.sample_density > 0.0) {
            return bad(format!("sample_density must be positive, got {}", self.sample_density));
        }
        if self.kind == ShapeKind::Lshape {
            let d = &self.dimensions;
            if d[2] >= d[0].min(d[1]) {
                return bad(format!("lshape thickness {} must be below both legs", d[2]));
            }
        }
        Ok(())
    }

    /// Rotations of the object frame that leave the shape unchanged.
    pub fn symmetry(&self) -> Symmetry {
        match self.kind {
            ShapeKind::Box => {
                let d = &self.dimensions;
                if d[0] == d[1] || d[1] == d[2] || d[0] == d[2] {
                    log::warn!("box with equal sides has more symmetries than are modelled");
                }
                Symmetry::Discrete(vec![
                    UnitQuaternion::identity(),
                    UnitQuaternion::from_axis_angle(&Vector3::x_axis(), PI),
                    UnitQuaternion::from_axis_angle(&Vector3::y_axis(), PI),
                    UnitQuaternion::from_axis_angle(&Vector3::z_axis(), PI),
                ])
            }
            ShapeKind::Cylinder => Symmetry::AxialZ,
            ShapeKind::Lshape => {
                let d = &self.dimensions;
                if d[0] == d[1] {
                    // Equal legs: half-turn about the profile diagonal in the z = 0 plane.
                    let axis = nalgebra::Unit::new_normalize(Vec3::new(1.0, 1.0, 0.0));
                    Symmetry::Discrete(vec![UnitQuaternion::identity(), UnitQuaternion::from_axis_angle(&axis, PI)])
                } else {
                    Symmetry::Discrete(vec![UnitQuaternion::identity()])
                }
            }
        }
    }

    /// Three distinct resting orientations (object to table-aligned frame).
    pub fn rest_orientations(&self) -> [UnitQuaternion<f64>; 3] {
        let rx = |a: f64| UnitQuaternion::from_axis_angle(&Vector3::x_axis(), a);
        let ry = |a: f64| UnitQuaternion::from_axis_angle(&Vector3::y_axis(), a);
        match self.kind {
            ShapeKind::Box => [UnitQuaternion::identity(), rx(FRAC_PI_2), ry(FRAC_PI_2)],
            ShapeKind::Cylinder => [UnitQuaternion::identity(), rx(FRAC_PI_2), rx(PI)],
            ShapeKind::Lshape => [UnitQuaternion::identity(), rx(FRAC_PI_2), ry(-FRAC_PI_2)],
        }
    }
}

/// Symmetry group of a shape, for comparing poses of symmetric objects.
#[derive(Debug, Clone, PartialEq)]
pub enum Symmetry {
    Discrete(Vec<UnitQuaternion<f64>>),
    /// Any rotation about z, optionally combined with a half-turn about x.
    AxialZ,
}

/// Smallest `(rad, m)` error between `pose` and `reference ∘ s ∘ relative`
/// over the symmetries `s` of the object.
///
/// `reference` is the object pose and `relative` an object-frame pose such
/// as a grasp; the rotation error is minimized first.
pub fn symmetric_pose_error(pose: &Pose, reference: &Pose, relative: &Pose, symmetry: &Symmetry) -> (f64, f64) {
    let local = reference.inverse().compose(pose);
    let err = |s: &UnitQuaternion<f64>| {
        let candidate = Pose::from_rotation(*s).compose(relative);
        pose_error(&local, &candidate)
    };
    let better = |a: (f64, f64), b: (f64, f64)| if (a.0, a.1) < (b.0, b.1) { a } else { b };
    match symmetry {
        Symmetry::Discrete(group) => group.iter().map(err).fold((f64::INFINITY, f64::INFINITY), better),
        Symmetry::AxialZ => {
            let flip = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), PI);
            [UnitQuaternion::identity(), flip]
                .iter()
                .map(|f| {
                    // Best spin θ maximizes trace(Rz(θ)ᵀ M) with M = R_local (R_f R_rel)ᵀ.
                    let m = local.rotation_matrix() * (f * relative.rotation()).to_rotation_matrix().matrix().transpose();
                    let theta = (m[(1, 0)] - m[(0, 1)]).atan2(m[(0, 0)] + m[(1, 1)]);
                    err(&(UnitQuaternion::from_axis_angle(&Vector3::z_axis(), theta) * f))
                })
                .fold((f64::INFINITY, f64::INFINITY), better)
        }
    }
}

fn sample_count(area: f64, density: f64) -> usize {
    (area * density).round() as usize
}

/// Uniform samples of an axis-aligned rectangle. `u` and `v` index the
/// in-plane axes, `w` the fixed axis.
#[allow(clippy::too_many_arguments)]
fn rect(
    rng: &mut impl Rng,
    density: f64,
    (u, u0, u1): (usize, f64, f64),
    (v, v0, v1): (usize, f64, f64),
    (w, w0): (usize, f64),
    normal: Vec3,
    pts: &mut Vec<Vec3>,
    nrm: &mut Vec<Vec3>,
) {
    let n = sample_count((u1 - u0) * (v1 - v0), density);
    for _ in 0..n {
        let mut p = Vec3::zeros();
        p[u] = rng.random_range(u0..=u1);
        p[v] = rng.random_range(v0..=v1);
        p[w] = w0;
        pts.push(p);
        nrm.push(normal);
    }
}

/// Deterministic surface sampling in the object frame with outward normals.
pub fn synth_cloud(spec: &ShapeSpec, seed: u64) -> Result<PointCloud, PipelineError> {
    spec.validate()?;
    let mut rng = seeded_rng(seed);
    let rho = spec.sample_density;
    let d = &spec.dimensions;
    let mut pts = Vec::new();
    let mut nrm = Vec::new();
    let axis = |k: usize, s: f64| {
        let mut n = Vec3::zeros();
        n[k] = s;
        n
    };
    match spec.kind {
        ShapeKind::Box => {
            let h = [d[0] / 2.0, d[1] / 2.0, d[2] / 2.0];
            for w in 0..3 {
                let (u, v) = ((w + 1) % 3, (w + 2) % 3);
                for s in [-1.0, 1.0] {
                    rect(&mut rng, rho, (u, -h[u], h[u]), (v, -h[v], h[v]), (w, s * h[w]), axis(w, s), &mut pts, &mut nrm);
                }
            }
        }
        ShapeKind::Cylinder => {
            let (r, hh) = (d[0], d[1] / 2.0);
            for _ in 0..sample_count(TAU * r * d[1], rho) {
                let th = rng.random_range(0.0..TAU);
                let (s, c) = th.sin_cos();
                pts.push(Vec3::new(r * c, r * s, rng.random_range(-hh..=hh)));
                nrm.push(Vec3::new(c, s, 0.0));
            }
            for sign in [-1.0, 1.0] {
                for _ in 0..sample_count(PI * r * r, rho) {
                    let rr = r * rng.random_range(0.0..=1.0f64).sqrt();
                    let th = rng.random_range(0.0..TAU);
                    pts.push(Vec3::new(rr * th.cos(), rr * th.sin(), sign * hh));
                    nrm.push(Vec3::new(0.0, 0.0, sign));
                }
            }
        }
        ShapeKind::Lshape => {
            let (lx, ly, t, hz) = (d[0], d[1], d[2], d[3] / 2.0);
            // End caps: the profile split into two rectangles.
            for s in [-1.0, 1.0] {
                rect(&mut rng, rho, (0, 0.0, lx), (1, 0.0, t), (2, s * hz), axis(2, s), &mut pts, &mut nrm);
                rect(&mut rng, rho, (0, 0.0, t), (1, t, ly), (2, s * hz), axis(2, s), &mut pts, &mut nrm);
            }
            // Walls, walking the profile boundary.
            let z = (2, -hz, hz);
            rect(&mut rng, rho, (0, 0.0, lx), z, (1, 0.0), axis(1, -1.0), &mut pts, &mut nrm);
            rect(&mut rng, rho, (1, 0.0, t), z, (0, lx), axis(0, 1.0), &mut pts, &mut nrm);
            rect(&mut rng, rho, (0, t, lx), z, (1, t), axis(1, 1.0), &mut pts, &mut nrm);
            rect(&mut rng, rho, (1, t, ly), z, (0, t), axis(0, 1.0), &mut pts, &mut nrm);
            rect(&mut rng, rho, (0, 0.0, t), z, (1, ly), axis(1, 1.0), &mut pts, &mut nrm);
            rect(&mut rng, rho, (1, 0.0, ly), z, (0, 0.0), axis(0, -1.0), &mut pts, &mut nrm);
        }
    }
    if pts.is_empty() {
        return Err(PipelineError::InvalidSpec("sample_density too low: no points generated".into()));
    }
    Ok(PointCloud::with_normals(pts, nrm, FrameId::object()).expect("finite unit normals"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visibility {
    Full,
    /// Keep points whose normal faces the camera centre.
    #[default]
    CameraFacing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewSpec {
    /// `robot_base_to_object`.
    pub object_pose: Pose,
    /// `robot_base_to_camera`.
    pub camera_pose: Pose,
    /// Isotropic Gaussian noise per coordinate, meters.
    pub noise_sigma: f64,
    pub visibility: Visibility,
    pub seed: u64,
}

/// Places an object-frame cloud (with normals) in the scene, culls what the
/// camera cannot see and adds sensor noise. The result is in `robot_base`
/// and keeps the exact, noise-free normals.
pub fn simulate_view(cloud: &PointCloud, view: &ViewSpec) -> Result<PointCloud, PipelineError> {
    if !(view.noise_sigma.is_finite() && view.noise_sigma >= 0.0) {
        return Err(PipelineError::InvalidSpec(format!("noise_sigma must be >= 0, got {}", view.noise_sigma)));
    }
    let normals = cloud.normals().ok_or_else(|| PipelineError::InvalidSpec("simulate_view needs a cloud with normals".into()))?;
    let cam = view.camera_pose.translation();
    let mut rng = seeded_rng(view.seed);
    let mut pts = Vec::with_capacity(cloud.len());
    let mut nrm = Vec::with_capacity(cloud.len());
    for (p, n) in cloud.points().iter().zip(normals) {
        let p = view.object_pose.transform_point(p);
        let n = view.object_pose.transform_vector(n);
        if view.visibility == Visibility::CameraFacing && n.dot(&(cam - p)) <= 0.0 {
            continue;
        }
        pts.push(p);
        nrm.push(n);
    }
    if pts.is_empty() {
        return Err(PipelineError::EmptyAfterCulling);
    }
    if view.noise_sigma > 0.0 {
        for p in &mut pts {
            *p += gaussian_vec3(&mut rng, view.noise_sigma);
        }
    }
    Ok(PointCloud::with_normals(pts, nrm, FrameId::robot_base()).expect("rotated unit normals"))
}

/// Camera pose at `eye` looking at `target`; image y points as close to
/// `-up` as possible.
pub fn look_at(eye: &Vec3, target: &Vec3, up: &Vec3) -> Result<Pose, PipelineError> {
    let z = target - eye;
    if z.norm() < 1e-9 {
        return Err(PipelineError::InvalidSpec("camera eye and target coincide".into()));
    }
    let z = z.normalize();
    let x = z.cross(up);
    if x.norm() < 1e-9 {
        return Err(PipelineError::InvalidSpec("viewing direction is parallel to up".into()));
    }
    let x = x.normalize();
    let y = z.cross(&x);
    Ok(Pose::from_matrix(&nalgebra::Matrix3::from_columns(&[x, y, z]), *eye))
}

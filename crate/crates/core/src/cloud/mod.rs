//! Point clouds and the operations the alignment stage needs on them.

mod kdtree;
pub mod ply;

use std::cmp::Ordering;

use nalgebra::{Matrix3, SymmetricEigen};
use thiserror::Error;

use crate::geom3::{FrameId, Pose, Vec3};

pub use kdtree::KdTree;
pub use ply::{load_ply, save_ply, PlyError, PlyFormat};

/// Tolerance on the unit length of stored normals.
pub const NORMAL_UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CloudError {
    #[error("point {index} has a non-finite coordinate")]
    NonFinite { index: usize },
    #[error("{normals} normals given for {points} points")]
    NormalCountMismatch { points: usize, normals: usize },
    #[error("normal {index} is not unit length")]
    NonUnitNormal { index: usize },
    #[error("voxel size must be positive, got {0}")]
    NonPositiveVoxel(f64),
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("point set is degenerate (collinear or coincident)")]
    DegenerateGeometry,
    #[error("k-d tree is empty")]
    EmptyTree,
    #[error("box min {min:?} exceeds max {max:?}")]
    InvalidBox { min: [f64; 3], max: [f64; 3] },
}

/// Ordered points with optional unit normals, tagged with the frame they live in.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
    normals: Option<Vec<Vec3>>,
    frame: FrameId,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>, frame: FrameId) -> Result<Self, CloudError> {
        check_finite(&points)?;
        Ok(Self { points, normals: None, frame })
    }

    pub fn with_normals(points: Vec<Vec3>, normals: Vec<Vec3>, frame: FrameId) -> Result<Self, CloudError> {
        check_finite(&points)?;
        if normals.len() != points.len() {
            return Err(CloudError::NormalCountMismatch { points: points.len(), normals: normals.len() });
        }
        for (index, n) in normals.iter().enumerate() {
            if !n.iter().all(|v| v.is_finite()) || (n.norm() - 1.0).abs() > NORMAL_UNIT_TOL {
                return Err(CloudError::NonUnitNormal { index });
            }
        }
        Ok(Self { points, normals: Some(normals), frame })
    }

    pub fn empty(frame: FrameId) -> Self {
        Self { points: Vec::new(), normals: None, frame }
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[Vec3]> {
        self.normals.as_deref()
    }

    pub fn frame(&self) -> &FrameId {
        &self.frame
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_parts(self) -> (Vec<Vec3>, Option<Vec<Vec3>>, FrameId) {
        (self.points, self.normals, self.frame)
    }

    pub fn without_normals(mut self) -> Self {
        self.normals = None;
        self
    }

    /// Relabels the frame without touching coordinates.
    pub fn with_frame(mut self, frame: FrameId) -> Self {
        self.frame = frame;
        self
    }

    /// Applies `pose` to every point (and normal) and relabels the result.
    pub fn transformed(&self, pose: &Pose, frame: FrameId) -> PointCloud {
        let points = self.points.iter().map(|p| pose.transform_point(p)).collect();
        let normals = self.normals.as_ref().map(|ns| ns.iter().map(|n| pose.transform_vector(n).normalize()).collect());
        PointCloud { points, normals, frame }
    }

    pub fn centroid(&self) -> Option<Vec3> {
        if self.points.is_empty() {
            return None;
        }
        Some(self.points.iter().sum::<Vec3>() / self.points.len() as f64)
    }

    /// Keeps the points whose index satisfies `keep`, normals in lockstep.
    pub fn filter_indices(&self, mut keep: impl FnMut(usize) -> bool) -> PointCloud {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        PointCloud {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            normals: self.normals.as_ref().map(|ns| idx.iter().map(|&i| ns[i]).collect()),
            frame: self.frame.clone(),
        }
    }

    /// Concatenates two clouds in the same frame; normals survive only if
    /// both sides carry them.
    pub fn concat(&self, other: &PointCloud) -> PointCloud {
        let mut points = self.points.clone();
        points.extend_from_slice(&other.points);
        let normals = match (&self.normals, &other.normals) {
            (Some(a), Some(b)) => Some(a.iter().chain(b.iter()).copied().collect()),
            _ => None,
        };
        PointCloud { points, normals, frame: self.frame.clone() }
    }
}

fn check_finite(points: &[Vec3]) -> Result<(), CloudError> {
    match points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
        Some(index) => Err(CloudError::NonFinite { index }),
        None => Ok(()),
    }
}

/// Closed axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "AabbRepr", into = "AabbRepr")]
pub struct Aabb {
    min: Vec3,
    max: Vec3,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct AabbRepr {
    min: [f64; 3],
    max: [f64; 3],
}

impl TryFrom<AabbRepr> for Aabb {
    type Error = CloudError;
    fn try_from(r: AabbRepr) -> Result<Self, CloudError> {
        Aabb::new(Vec3::from(r.min), Vec3::from(r.max))
    }
}

impl From<Aabb> for AabbRepr {
    fn from(b: Aabb) -> Self {
        AabbRepr { min: b.min.into(), max: b.max.into() }
    }
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self, CloudError> {
        if min.iter().zip(max.iter()).any(|(a, b)| !(a <= b)) {
            return Err(CloudError::InvalidBox { min: min.into(), max: max.into() });
        }
        Ok(Self { min, max })
    }

    pub fn infinite() -> Self {
        Self { min: Vec3::repeat(f64::NEG_INFINITY), max: Vec3::repeat(f64::INFINITY) }
    }

    pub fn min(&self) -> &Vec3 {
        &self.min
    }

    pub fn max(&self) -> &Vec3 {
        &self.max
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| self.min[k] <= p[k] && p[k] <= self.max[k])
    }
}

/// Points inside the closed box, original order kept.
pub fn crop_aabb(cloud: &PointCloud, aabb: &Aabb) -> PointCloud {
    cloud.filter_indices(|i| aabb.contains(&cloud.points[i]))
}

fn cmp_vec(a: &Vec3, b: &Vec3) -> Ordering {
    a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)).then(a.z.total_cmp(&b.z))
}

/// One centroid per occupied voxel of edge `voxel`, ordered by voxel index.
///
/// Members of a voxel are summed in coordinate order, so the output does
/// not depend on the input order. Normals are dropped.
pub fn voxel_downsample(cloud: &PointCloud, voxel: f64) -> Result<PointCloud, CloudError> {
    if !(voxel > 0.0) || !voxel.is_finite() {
        return Err(CloudError::NonPositiveVoxel(voxel));
    }
    let key = |p: &Vec3| -> [i64; 3] { [(p.x / voxel).floor() as i64, (p.y / voxel).floor() as i64, (p.z / voxel).floor() as i64] };
    let mut keyed: Vec<([i64; 3], Vec3)> = cloud.points.iter().map(|p| (key(p), *p)).collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| cmp_vec(&a.1, &b.1)));

    let mut out = Vec::new();
    let mut i = 0;
    while i < keyed.len() {
        let k = keyed[i].0;
        let mut j = i;
        let mut sum = Vec3::zeros();
        while j < keyed.len() && keyed[j].0 == k {
            sum += keyed[j].1;
            j += 1;
        }
        out.push(sum / (j - i) as f64);
        i = j;
    }
    Ok(PointCloud { points: out, normals: None, frame: cloud.frame.clone() })
}

/// Eigen-decomposition of a 3×3 covariance sorted by ascending eigenvalue.
pub(crate) fn sorted_eigen(cov: Matrix3<f64>) -> ([f64; 3], [Vec3; 3]) {
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = order.map(|i| eig.eigenvalues[i]);
    let vecs = order.map(|i| eig.eigenvectors.column(i).into_owned());
    (vals, vecs)
}

pub(crate) fn covariance(points: &[Vec3], centroid: &Vec3) -> Matrix3<f64> {
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov / points.len() as f64
}

/// Per-point normals from the `k` nearest neighbours (the point included),
/// oriented so that `(viewpoint - p)·n >= 0`.
pub fn estimate_normals(cloud: &PointCloud, k: usize, viewpoint: &Vec3) -> Result<PointCloud, CloudError> {
    let needed = k.max(3);
    if k < 3 || cloud.len() < k {
        return Err(CloudError::TooFewPoints { needed, got: cloud.len() });
    }
    let tree = KdTree::build(&cloud.points);
    let mut normals = Vec::with_capacity(cloud.len());
    let mut neigh = Vec::with_capacity(k);
    for p in &cloud.points {
        neigh.clear();
        neigh.extend(tree.k_nearest(p, k).into_iter().map(|(i, _)| cloud.points[i]));
        let c = neigh.iter().sum::<Vec3>() / k as f64;
        let (_, vecs) = sorted_eigen(covariance(&neigh, &c));
        let mut n = vecs[0].normalize();
        if (viewpoint - p).dot(&n) < 0.0 {
            n = -n;
        }
        normals.push(n);
    }
    Ok(PointCloud { points: cloud.points.clone(), normals: Some(normals), frame: cloud.frame.clone() })
}

/// Plane `normal·p = d` with unit normal.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Plane {
    pub normal: Vec3,
    pub d: f64,
}

impl Plane {
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(p) - self.d
    }
}

/// Total-least-squares plane and the RMS orthogonal residual.
///
/// The normal is signed so that `d >= 0`; for planes through the origin its
/// largest-magnitude component is made positive.
pub fn fit_plane(cloud: &PointCloud) -> Result<(Plane, f64), CloudError> {
    if cloud.len() < 3 {
        return Err(CloudError::TooFewPoints { needed: 3, got: cloud.len() });
    }
    let c = cloud.centroid().expect("nonempty");
    let (vals, vecs) = sorted_eigen(covariance(&cloud.points, &c));
    // Collinear (or coincident) input leaves only one direction with spread.
    if vals[1].max(0.0).sqrt() <= 1e-9 {
        return Err(CloudError::DegenerateGeometry);
    }
    let mut n = vecs[0].normalize();
    let mut d = n.dot(&c);
    let flip = if d.abs() > 1e-12 {
        d < 0.0
    } else {
        let imax = n.iamax();
        n[imax] < 0.0
    };
    if flip {
        n = -n;
        d = -d;
    }
    let plane = Plane { normal: n, d };
    let ss: f64 = cloud.points.iter().map(|p| plane.signed_distance(p).powi(2)).sum();
    Ok((plane, (ss / cloud.len() as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{seeded_rng, unit_vector};
    use rand::Rng;

    fn cloud(points: Vec<Vec3>) -> PointCloud {
        PointCloud::new(points, FrameId::robot_base()).unwrap()
    }

    fn unit_grid(n: usize) -> PointCloud {
        let step = 1.0 / (n - 1) as f64;
        let mut pts = Vec::new();
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    pts.push(Vec3::new(i as f64 * step, j as f64 * step, k as f64 * step));
                }
            }
        }
        cloud(pts)
    }

    #[test]
    fn invariants_rejected() {
        assert!(matches!(PointCloud::new(vec![Vec3::new(f64::NAN, 0.0, 0.0)], FrameId::camera()), Err(CloudError::NonFinite { index: 0 })));
        assert!(matches!(
            PointCloud::with_normals(vec![Vec3::zeros()], vec![], FrameId::camera()),
            Err(CloudError::NormalCountMismatch { .. })
        ));
        assert!(matches!(
            PointCloud::with_normals(vec![Vec3::zeros()], vec![Vec3::new(0.0, 0.0, 2.0)], FrameId::camera()),
            Err(CloudError::NonUnitNormal { index: 0 })
        ));
        assert!(Aabb::new(Vec3::repeat(1.0), Vec3::zeros()).is_err());
    }

    #[test]
    fn crop_examples() {
        let g = unit_grid(10);
        assert_eq!(crop_aabb(&g, &Aabb::infinite()), g);
        let far = Aabb::new(Vec3::repeat(2.0), Vec3::repeat(3.0)).unwrap();
        assert!(crop_aabb(&g, &far).is_empty());
        let b = Aabb::new(Vec3::repeat(0.25), Vec3::repeat(0.75)).unwrap();
        let c = crop_aabb(&g, &b);
        // Oracle: count grid coordinates i/9 inside [0.25, 0.75] per axis.
        let per_axis = (0..10).filter(|i| (0.25..=0.75).contains(&(*i as f64 / 9.0))).count();
        assert_eq!(per_axis, 4);
        assert_eq!(c.len(), per_axis.pow(3));
        assert_eq!(crop_aabb(&c, &b), c);
    }

    #[test]
    fn crop_interior_of_integer_grid() {
        let h = |i: i32| (2 * i + 1) as f64 / 20.0;
        // Grid at (2i+1)/20 (i < 10): the box [0.25, 0.75] holds i = 2..=7.
        let mut pts = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                for k in 0..10 {
                    pts.push(Vec3::new(h(i), h(j), h(k)));
                }
            }
        }
        let normals = vec![Vec3::z(); pts.len()];
        let c = PointCloud::with_normals(pts.clone(), normals, FrameId::robot_base()).unwrap();
        let b = Aabb::new(Vec3::repeat(0.25), Vec3::repeat(0.75)).unwrap();
        let out = crop_aabb(&c, &b);
        let expected: Vec<Vec3> = pts.into_iter().filter(|p| b.contains(p)).collect();
        assert_eq!(out.len(), 216);
        assert_eq!(out.points(), &expected[..]);
        assert_eq!(out.normals().unwrap().len(), 216);
        assert_eq!(out.frame(), &FrameId::robot_base());
    }

    #[test]
    fn voxel_examples() {
        let one = cloud(vec![Vec3::new(0.3, 0.2, 0.1)]);
        assert_eq!(voxel_downsample(&one, 0.05).unwrap().points(), one.points());
        assert_eq!(voxel_downsample(&one, 0.0), Err(CloudError::NonPositiveVoxel(0.0)));

        let two = cloud(vec![Vec3::new(0.002, 0.002, 0.002), Vec3::new(0.003, 0.002, 0.002)]);
        let d = voxel_downsample(&two, 0.01).unwrap();
        assert_eq!(d.len(), 1);
        assert!((d.points()[0] - Vec3::new(0.0025, 0.002, 0.002)).norm() < 1e-15);
    }

    #[test]
    fn voxel_grid_matches_binning_oracle() {
        let g = unit_grid(10);
        let d = voxel_downsample(&g, 0.5).unwrap();
        assert!(d.len() <= 27);
        // Brute-force oracle: for each output point, recompute its cell members.
        let mut total = 0;
        for c in d.points() {
            let cell = [(c.x / 0.5).floor(), (c.y / 0.5).floor(), (c.z / 0.5).floor()];
            let members: Vec<&Vec3> =
                g.points().iter().filter(|p| [(p.x / 0.5).floor(), (p.y / 0.5).floor(), (p.z / 0.5).floor()] == cell).collect();
            let mean = members.iter().copied().sum::<Vec3>() / members.len() as f64;
            assert!((mean - c).norm() < 1e-12);
            total += members.len();
        }
        assert_eq!(total, 1000);
    }

    #[test]
    fn voxel_is_order_independent() {
        let mut rng = seeded_rng(9);
        let pts: Vec<Vec3> = (0..500).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
        let mut shuffled = pts.clone();
        shuffled.reverse();
        shuffled.swap(3, 400);
        let a = voxel_downsample(&cloud(pts), 0.13).unwrap();
        let b = voxel_downsample(&cloud(shuffled), 0.13).unwrap();
        assert_eq!(a, b);
    }

    fn plane_grid(z: f64) -> Vec<Vec3> {
        let mut pts = Vec::new();
        for i in 0..15 {
            for j in 0..15 {
                pts.push(Vec3::new(i as f64 * 0.01, j as f64 * 0.01, z));
            }
        }
        pts
    }

    #[test]
    fn normals_on_plane_follow_viewpoint() {
        let c = cloud(plane_grid(0.0));
        let up = estimate_normals(&c, 8, &Vec3::new(0.0, 0.0, 1.0)).unwrap();
        for n in up.normals().unwrap() {
            assert!((n - Vec3::z()).norm() < 1e-6);
        }
        let down = estimate_normals(&c, 8, &Vec3::new(0.0, 0.0, -1.0)).unwrap();
        for n in down.normals().unwrap() {
            assert!((n + Vec3::z()).norm() < 1e-6);
        }
        assert!(matches!(estimate_normals(&c, 2, &Vec3::zeros()), Err(CloudError::TooFewPoints { .. })));
        let tiny = cloud(plane_grid(0.0)[..4].to_vec());
        assert!(matches!(estimate_normals(&tiny, 5, &Vec3::zeros()), Err(CloudError::TooFewPoints { .. })));
    }

    #[test]
    fn normals_on_sphere_are_radial() {
        let mut rng = seeded_rng(11);
        let center = Vec3::new(0.1, -0.2, 0.5);
        let pts: Vec<Vec3> = (0..3000).map(|_| center + unit_vector(&mut rng) * 0.1).collect();
        let c = cloud(pts);
        let vp = center + Vec3::new(0.0, 0.0, 5.0);
        let with = estimate_normals(&c, 12, &vp).unwrap();
        for (p, n) in with.points().iter().zip(with.normals().unwrap()) {
            let radial = (p - center).normalize();
            // Orientation follows the viewpoint; away from the silhouette the
            // outward normal is the one facing it.
            if (vp - p).normalize().dot(&radial) > 0.2 {
                let ang = n.dot(&radial).clamp(-1.0, 1.0).acos();
                assert!(ang < 5f64.to_radians(), "angle {}", ang.to_degrees());
            } else {
                assert!((vp - p).dot(n) >= 0.0);
            }
        }
    }

    #[test]
    fn plane_fit_examples() {
        let (pl, rms) = fit_plane(&cloud(plane_grid(0.5))).unwrap();
        assert!((pl.normal - Vec3::z()).norm() < 1e-12);
        assert!((pl.d - 0.5).abs() < 1e-12);
        assert!(rms <= 1e-12);

        let mut rng = seeded_rng(12);
        let noisy: Vec<Vec3> = plane_grid(0.5).into_iter().map(|p| p + Vec3::new(0.0, 0.0, rng.random_range(-0.001..=0.001))).collect();
        let (pl, rms) = fit_plane(&cloud(noisy)).unwrap();
        assert!(rms <= 0.001);
        assert!((pl.d - 0.5).abs() < 1e-4);

        let line = cloud(vec![Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0), Vec3::new(2.0, 2.0, 2.0)]);
        assert_eq!(fit_plane(&line), Err(CloudError::DegenerateGeometry));
    }

    #[test]
    fn plane_fit_exact_on_tilted_planes() {
        let mut rng = seeded_rng(13);
        for _ in 0..20 {
            let n = unit_vector(&mut rng);
            let a = n.cross(&Vec3::x()).normalize();
            let b = n.cross(&a);
            let d: f64 = rng.random_range(-1.0..1.0);
            let pts: Vec<Vec3> = (0..50).map(|_| n * d + a * rng.random_range(-0.2..0.2) + b * rng.random_range(-0.2..0.2)).collect();
            let (_, rms) = fit_plane(&cloud(pts)).unwrap();
            assert!(rms <= 1e-12, "rms {rms}");
        }
    }

    #[test]
    fn transformed_moves_normals() {
        let c = PointCloud::with_normals(vec![Vec3::x()], vec![Vec3::x()], FrameId::object()).unwrap();
        let p =
            Pose::new(nalgebra::UnitQuaternion::from_axis_angle(&Vec3::z_axis(), std::f64::consts::FRAC_PI_2), Vec3::new(0.0, 0.0, 1.0));
        let t = c.transformed(&p, FrameId::robot_base());
        assert!((t.points()[0] - Vec3::new(0.0, 1.0, 1.0)).norm() < 1e-15);
        assert!((t.normals().unwrap()[0] - Vec3::y()).norm() < 1e-15);
        assert_eq!(t.frame(), &FrameId::robot_base());
    }
}

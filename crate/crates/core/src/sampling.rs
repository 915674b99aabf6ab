//! Seeded, portable random sampling used by the simulator and the tests.

use nalgebra::{Quaternion, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::geom3::{canonicalize, rodrigues_exp, Pose, Vec3};

/// The generator used everywhere randomness is involved.
pub type SimRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn gaussian(rng: &mut impl Rng, sigma: f64) -> f64 {
    let n: f64 = StandardNormal.sample(rng);
    n * sigma
}

pub fn gaussian_vec3(rng: &mut impl Rng, sigma: f64) -> Vec3 {
    Vec3::new(gaussian(rng, sigma), gaussian(rng, sigma), gaussian(rng, sigma))
}

/// Uniformly distributed direction on the unit sphere.
pub fn unit_vector(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = gaussian_vec3(rng, 1.0);
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Haar-uniform random rotation.
pub fn uniform_rotation(rng: &mut impl Rng) -> UnitQuaternion<f64> {
    loop {
        let q = Quaternion::new(gaussian(rng, 1.0), gaussian(rng, 1.0), gaussian(rng, 1.0), gaussian(rng, 1.0));
        if q.norm() > 1e-9 {
            return canonicalize(UnitQuaternion::new_normalize(q));
        }
    }
}

/// Rotation about a uniformly random axis by an angle drawn uniformly from
/// `[min_angle, max_angle]`.
pub fn rotation_with_angle(rng: &mut impl Rng, min_angle: f64, max_angle: f64) -> UnitQuaternion<f64> {
    let angle = if max_angle > min_angle { rng.random_range(min_angle..=max_angle) } else { min_angle };
    rodrigues_exp(&(unit_vector(rng) * angle))
}

/// Uniform rotation and translation with components in `[-extent, extent]`.
pub fn random_pose(rng: &mut impl Rng, extent: f64) -> Pose {
    let rot = uniform_rotation(rng);
    let t = if extent > 0.0 {
        Vec3::new(rng.random_range(-extent..=extent), rng.random_range(-extent..=extent), rng.random_range(-extent..=extent))
    } else {
        Vec3::zeros()
    };
    Pose::new(rot, t)
}

/// A pose whose rotation angle is at most `max_angle` and whose translation
/// norm is at most `max_translation`.
pub fn bounded_perturbation(rng: &mut impl Rng, max_angle: f64, max_translation: f64) -> Pose {
    let rot = rotation_with_angle(rng, 0.0, max_angle);
    let dist = if max_translation > 0.0 { rng.random_range(0.0..=max_translation) } else { 0.0 };
    Pose::new(rot, unit_vector(rng) * dist)
}

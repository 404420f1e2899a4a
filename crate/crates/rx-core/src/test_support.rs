//! Shared helpers for unit tests: independent residual evaluation and random
//! rigid motions. Kept deliberately free of the registration code paths they
//! are used to check.

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::{Point3, RigidTransform};

pub fn random_points(rng: &mut ChaCha8Rng, n: usize, half_extent: f64) -> Vec<Point3> {
    (0..n)
        .map(|_| {
            Point3::new(
                rng.gen_range(-half_extent..half_extent),
                rng.gen_range(-half_extent..half_extent),
                rng.gen_range(-half_extent..half_extent),
            )
        })
        .collect()
}

pub fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform {
    let axis = loop {
        let a = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0f64),
        );
        if a.norm() > 1e-3 {
            break a;
        }
    };
    let angle = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let t = Vector3::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0f64),
    );
    RigidTransform::from_axis_angle(axis, angle, t)
}

/// Root-mean-square alignment residual, computed directly from the matrix
/// action rather than through any registration helper.
pub fn rms_residual(t: &RigidTransform, source: &[Point3], target: &[Point3]) -> f64 {
    assert_eq!(source.len(), target.len());
    let r = t.rotation();
    let tr = t.translation();
    let sum: f64 = source
        .iter()
        .zip(target.iter())
        .map(|(s, q)| {
            let mapped = r * s.to_vector() + tr;
            (mapped - q.to_vector()).norm_squared()
        })
        .sum();
    (sum / source.len() as f64).sqrt()
}

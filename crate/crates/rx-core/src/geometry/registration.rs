//! Rigid point-set registration: exact least-squares alignment via SVD and a
//! seeded RANSAC wrapper for correspondence sets with outliers.

use nalgebra::{Matrix3, Matrix3xX, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GeometryError, Point3, RigidTransform};

/// Settings for [`robust_rigid_transform`]. Residuals strictly below
/// `inlier_threshold` (meters) count as inliers.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RobustParams {
    pub inlier_threshold: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for RobustParams {
    fn default() -> Self {
        Self {
            inlier_threshold: 0.01,
            max_iterations: 500,
            seed: 0,
        }
    }
}

pub(crate) fn centroid(points: &[Point3]) -> Vector3<f64> {
    let mut sum = Vector3::zeros();
    for p in points {
        sum += p.to_vector();
    }
    sum / points.len() as f64
}

/// Rank of the centered point set, judged against the largest singular value.
pub(crate) fn centered_rank(points: &[Point3], center: &Vector3<f64>) -> usize {
    let m = Matrix3xX::from_columns(
        &points
            .iter()
            .map(|p| p.to_vector() - center)
            .collect::<Vec<_>>(),
    );
    let sv = m.singular_values();
    let max = sv.max();
    if max <= 0.0 {
        return 0;
    }
    sv.iter().filter(|s| **s > max * 1e-9).count()
}

/// Least-squares rigid alignment (Kabsch): finds the proper rotation R and
/// translation t minimizing sum |R s_i + t - t_i|^2.
///
/// Requires at least 3 correspondences whose source points span a plane;
/// collinear or coincident sources leave the rotation underdetermined and are
/// rejected as degenerate.
pub fn estimate_rigid_transform(
    source: &[Point3],
    target: &[Point3],
) -> Result<RigidTransform, GeometryError> {
    if source.len() != target.len() {
        return Err(GeometryError::LengthMismatch {
            source_len: source.len(),
            target_len: target.len(),
        });
    }
    if source.len() < 3 {
        return Err(GeometryError::TooFewPoints {
            needed: 3,
            got: source.len(),
        });
    }
    if !source.iter().chain(target.iter()).all(Point3::is_finite) {
        return Err(GeometryError::NonFinite);
    }

    let sc = centroid(source);
    let tc = centroid(target);
    let rank = centered_rank(source, &sc);
    if rank < 2 {
        return Err(GeometryError::DegenerateConfiguration { rank });
    }

    // Cross-covariance H = sum s_i' t_i'^T over centered correspondences.
    let mut h = Matrix3::zeros();
    for (s, t) in source.iter().zip(target.iter()) {
        h += (s.to_vector() - sc) * (t.to_vector() - tc).transpose();
    }

    let svd = h.svd(true, true);
    let u = svd.u.expect("svd with u requested");
    let v = svd.v_t.expect("svd with v_t requested").transpose();
    // Projection onto SO(3): flip the smallest singular direction when the
    // unconstrained optimum is a reflection.
    let d = (v * u.transpose()).determinant();
    let sign = if d < 0.0 { -1.0 } else { 1.0 };
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign));
    let rotation = v * fix * u.transpose();
    let translation = tc - rotation * sc;

    Ok(RigidTransform::from_parts(rotation, translation))
}

fn residual(transform: &RigidTransform, s: &Point3, t: &Point3) -> f64 {
    transform.apply(*s).distance(t)
}

fn inlier_mask(
    transform: &RigidTransform,
    source: &[Point3],
    target: &[Point3],
    threshold: f64,
) -> Vec<bool> {
    source
        .iter()
        .zip(target.iter())
        .map(|(s, t)| residual(transform, s, t) < threshold)
        .collect()
}

/// Draws three distinct indices from [0, n). Deterministic for a fixed RNG
/// state, so the whole estimator is reproducible for a fixed seed.
fn sample_triplet(rng: &mut ChaCha8Rng, n: usize) -> [usize; 3] {
    let a = rng.gen_range(0..n);
    let mut b = rng.gen_range(0..n);
    while b == a {
        b = rng.gen_range(0..n);
    }
    let mut c = rng.gen_range(0..n);
    while c == a || c == b {
        c = rng.gen_range(0..n);
    }
    [a, b, c]
}

/// RANSAC rigid registration: samples minimal 3-point subsets, keeps the
/// model with the most inliers, then refits on the full inlier set.
///
/// Returns the refit transform and a per-correspondence inlier mask. Fails
/// with [`GeometryError::NoConsensus`] when no sampled model explains at
/// least 3 correspondences.
pub fn robust_rigid_transform(
    source: &[Point3],
    target: &[Point3],
    params: &RobustParams,
) -> Result<(RigidTransform, Vec<bool>), GeometryError> {
    if source.len() != target.len() {
        return Err(GeometryError::LengthMismatch {
            source_len: source.len(),
            target_len: target.len(),
        });
    }
    let n = source.len();
    if n < 3 {
        return Err(GeometryError::TooFewPoints { needed: 3, got: n });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(usize, RigidTransform)> = None;

    for _ in 0..params.max_iterations {
        let idx = sample_triplet(&mut rng, n);
        let s3 = [source[idx[0]], source[idx[1]], source[idx[2]]];
        let t3 = [target[idx[0]], target[idx[1]], target[idx[2]]];
        let candidate = match estimate_rigid_transform(&s3, &t3) {
            Ok(c) => c,
            Err(_) => continue, // degenerate minimal sample
        };
        let count = source
            .iter()
            .zip(target.iter())
            .filter(|(s, t)| residual(&candidate, s, t) < params.inlier_threshold)
            .count();
        if best.as_ref().map_or(true, |(bc, _)| count > *bc) {
            best = Some((count, candidate));
            if count == n {
                break;
            }
        }
    }

    let (best_count, best_model) = best.ok_or(GeometryError::NoConsensus { best_inliers: 0 })?;
    if best_count < 3 {
        return Err(GeometryError::NoConsensus {
            best_inliers: best_count,
        });
    }

    // Refit on the consensus set; fall back to the minimal-sample model when
    // the inliers happen to be degenerate (e.g. collinear).
    let mask = inlier_mask(&best_model, source, target, params.inlier_threshold);
    let mut s_in = Vec::with_capacity(best_count);
    let mut t_in = Vec::with_capacity(best_count);
    for (i, keep) in mask.iter().enumerate() {
        if *keep {
            s_in.push(source[i]);
            t_in.push(target[i]);
        }
    }
    let refit = estimate_rigid_transform(&s_in, &t_in).unwrap_or(best_model);
    let final_mask = inlier_mask(&refit, source, target, params.inlier_threshold);
    if final_mask.iter().filter(|m| **m).count() >= 3 {
        Ok((refit, final_mask))
    } else {
        Ok((best_model, mask))
    }
}

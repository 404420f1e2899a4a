//! Core 3D types shared by the whole pipeline: points, rigid transforms,
//! the pinhole camera model, and rigid registration (exact and robust).
//!
//! Conventions: right handed coordinates, meters, camera looks down +z.
//! A [`RigidTransform`] named `T_a_from_b` maps coordinates expressed in
//! frame `b` into frame `a`.

mod camera;
mod registration;

pub use camera::{project, unproject, CameraIntrinsics, DepthIoError, DepthMap};
pub use registration::{estimate_rigid_transform, robust_rigid_transform, RobustParams};
pub(crate) use registration::{centered_rank, centroid};

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Orthonormality and determinant tolerance for rotation validation.
pub const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("depth must be positive and finite, got {0}")]
    InvalidDepth(f64),
    #[error("pixel ({u}, {v}) lies outside the {width}x{height} image")]
    PixelOutOfBounds {
        u: f64,
        v: f64,
        width: u32,
        height: u32,
    },
    #[error("point depth must be positive to project, got z = {0}")]
    NonPositiveDepth(f64),
    #[error("point sets differ in length: {source_len} vs {target_len}")]
    LengthMismatch {
        source_len: usize,
        target_len: usize,
    },
    #[error("need at least {needed} correspondences, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("degenerate point configuration: rank {rank} after centering")]
    DegenerateConfiguration { rank: usize },
    #[error("no consensus: best sample had {best_inliers} inliers, need at least 3")]
    NoConsensus { best_inliers: usize },
    #[error("matrix is not a rotation (orthonormal, det +1) within {ROTATION_TOL:e}")]
    NotARotation,
    #[error("coordinate is not finite")]
    NonFinite,
    #[error("camera intrinsics are invalid: {0}")]
    BadIntrinsics(String),
}

/// A point in 3D space, meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 3]", try_from = "[f64; 3]")]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn origin() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    pub fn distance(&self, other: &Point3) -> f64 {
        (self.to_vector() - other.to_vector()).norm()
    }

    pub fn midpoint(&self, other: &Point3) -> Point3 {
        Point3::new(
            0.5 * (self.x + other.x),
            0.5 * (self.y + other.y),
            0.5 * (self.z + other.z),
        )
    }
}

impl From<Point3> for [f64; 3] {
    fn from(p: Point3) -> Self {
        [p.x, p.y, p.z]
    }
}

impl TryFrom<[f64; 3]> for Point3 {
    type Error = String;

    fn try_from(a: [f64; 3]) -> Result<Self, Self::Error> {
        let p = Point3::new(a[0], a[1], a[2]);
        if p.is_finite() {
            Ok(p)
        } else {
            Err("point coordinates must be finite".to_string())
        }
    }
}

/// A proper rigid motion: rotation (orthonormal, det +1) plus translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidTransform {
    /// Validates orthonormality and determinant within [`ROTATION_TOL`].
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if !rotation.iter().all(|v| v.is_finite()) || !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let gram = rotation.transpose() * rotation;
        let delta = gram - Matrix3::identity();
        if delta.norm() > ROTATION_TOL * 10.0 || (rotation.determinant() - 1.0).abs() > ROTATION_TOL * 10.0
        {
            return Err(GeometryError::NotARotation);
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Internal constructor for values already known to be valid rotations
    /// (products and SVD outputs drift only at machine precision).
    pub(crate) fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rotation = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
        Self {
            rotation: rotation.into_inner(),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        Point3::from_vector(self.rotation * p.to_vector() + self.translation)
    }

    pub fn apply_vector(&self, v: Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// `a.compose(&b)` applies `b` first: `(a ∘ b)(p) = a(b(p))`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rot_inv = self.rotation.transpose();
        RigidTransform {
            rotation: rot_inv,
            translation: -(rot_inv * self.translation),
        }
    }

    /// Rotation angle distance to another transform, radians. Accurate near
    /// zero, where the usual trace formula loses precision.
    pub fn rotation_distance(&self, other: &RigidTransform) -> f64 {
        let d = self.rotation.transpose() * other.rotation;
        // For d = I + [w]x + O(w^2) the skew part has Frobenius norm sqrt(2)|w|.
        let skew = 0.5 * (d - d.transpose());
        let small = skew.norm() / std::f64::consts::SQRT_2;
        if small < 1e-4 {
            small
        } else {
            let c = ((d.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
            c.acos()
        }
    }

    pub fn translation_distance(&self, other: &RigidTransform) -> f64 {
        (self.translation - other.translation).norm()
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

/// Serialized as row-major 3x3 rotation plus translation, validated on read.
impl Serialize for RigidTransform {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Repr {
            rotation: [[f64; 3]; 3],
            translation: [f64; 3],
        }
        let r = &self.rotation;
        let repr = Repr {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [self.translation.x, self.translation.y, self.translation.z],
        };
        repr.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Repr {
            rotation: [[f64; 3]; 3],
            translation: [f64; 3],
        }
        let repr = Repr::deserialize(deserializer)?;
        let m = Matrix3::from_fn(|i, j| repr.rotation[i][j]);
        let t = Vector3::new(repr.translation[0], repr.translation[1], repr.translation[2]);
        RigidTransform::new(m, t).map_err(serde::de::Error::custom)
    }
}

/// Applies a rigid transform to every point, preserving order.
pub fn transform_points(transform: &RigidTransform, points: &[Point3]) -> Vec<Point3> {
    points.iter().map(|p| transform.apply(*p)).collect()
}

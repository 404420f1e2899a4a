//! Hand-to-gripper retargeting.
//!
//! Human hand joints cannot drive a two-finger gripper directly, so each
//! supported interaction style (grasp, press, push) defines a small set of
//! correspondences between gripper-local landmark points and hand joints.
//! The landmark set is least-squares aligned to the joints per frame, giving
//! one gripper pose per trajectory step, plus an opening fraction derived
//! from the index-thumb separation for grasps.
//!
//! Press and push align four *collinear* contact-line samples, so a plain
//! point-set fit would leave the twist about the line tied to SVD
//! conventions. [`contact_line_fit`] resolves the twist from the joints'
//! second moment instead, which keeps the fit covariant: rigidly moving the
//! hand rigidly moves the pose.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    centered_rank, centroid, estimate_rigid_transform, GeometryError, Point3, RigidTransform,
};
use crate::hands::{HandJointFrame, HandTrajectory, JOINT_COUNT};

/// Separation below which index and thumb tips count as coincident.
const TIP_COINCIDENCE_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GripperError {
    #[error("failed to read gripper model: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse gripper model: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid gripper model: {0}")]
    BadModel(String),
    #[error("degenerate hand configuration: {0}")]
    DegenerateHand(String),
    #[error("frame has {got} joints; expected 21 or the {expected} serialized for this heuristic")]
    WrongArity { expected: usize, got: usize },
    #[error("frame {frame}: {source}")]
    AtFrame {
        frame: usize,
        #[source]
        source: Box<GripperError>,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn at_frame(frame: usize, e: GripperError) -> GripperError {
    GripperError::AtFrame {
        frame,
        source: Box::new(e),
    }
}

/// Which retargeting rule a pose was produced by.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeuristicKind {
    Grasp,
    Press,
    Push,
}

impl fmt::Display for HeuristicKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeuristicKind::Grasp => "grasp",
            HeuristicKind::Press => "press",
            HeuristicKind::Push => "push",
        })
    }
}

impl FromStr for HeuristicKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "grasp" => Ok(HeuristicKind::Grasp),
            "press" => Ok(HeuristicKind::Press),
            "push" => Ok(HeuristicKind::Push),
            other => Err(format!("unknown heuristic {other:?}")),
        }
    }
}

/// Parallel-gripper geometry: maximum stroke plus landmark points in
/// gripper-local coordinates. `left_tip`/`right_tip`/`palm_base` drive the
/// grasp fit; `contact_tip`/`contact_mid`/`contact_base` lie on the contact
/// line of the closed fingers and drive press/push.
#[derive(Clone, Debug, PartialEq)]
pub struct GripperModel {
    stroke: f64,
    left_tip: Point3,
    right_tip: Point3,
    palm_base: Point3,
    contact_tip: Point3,
    contact_mid: Point3,
    contact_base: Point3,
}

#[derive(Serialize, Deserialize)]
struct GripperModelDto {
    stroke: f64,
    landmarks: BTreeMap<String, [f64; 3]>,
}

impl GripperModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        stroke: f64,
        left_tip: Point3,
        right_tip: Point3,
        palm_base: Point3,
        contact_tip: Point3,
        contact_mid: Point3,
        contact_base: Point3,
    ) -> Result<Self, GripperError> {
        if !(stroke.is_finite() && stroke > 0.0) {
            return Err(GripperError::BadModel(format!(
                "stroke must be positive and finite, got {stroke}"
            )));
        }
        let landmarks = [
            left_tip,
            right_tip,
            palm_base,
            contact_tip,
            contact_mid,
            contact_base,
        ];
        if landmarks.iter().any(|p| !p.is_finite()) {
            return Err(GripperError::BadModel("landmarks must be finite".into()));
        }
        let contact = [contact_tip, contact_mid, contact_base];
        if contact_tip.distance(&contact_base) < 1e-9 {
            return Err(GripperError::BadModel(
                "contact_tip and contact_base must be distinct".into(),
            ));
        }
        if centered_rank(&contact, &centroid(&contact)) > 1 {
            return Err(GripperError::BadModel(
                "contact points must be collinear".into(),
            ));
        }
        let grasp = [left_tip, right_tip, palm_base];
        if centered_rank(&grasp, &centroid(&grasp)) < 2 {
            return Err(GripperError::BadModel(
                "left_tip, right_tip and palm_base must not be collinear".into(),
            ));
        }
        Ok(Self {
            stroke,
            left_tip,
            right_tip,
            palm_base,
            contact_tip,
            contact_mid,
            contact_base,
        })
    }

    /// Reference configuration for a Robotiq 2F-85: 85 mm stroke, fingertips
    /// 162 mm above the base frame, palm line at 90 mm.
    pub fn default_2f85() -> Self {
        Self::new(
            0.085,
            Point3::new(-0.0425, 0.0, 0.162),
            Point3::new(0.0425, 0.0, 0.162),
            Point3::new(0.0, 0.0, 0.09),
            Point3::new(0.0, 0.0, 0.162),
            Point3::new(0.0, 0.0, 0.126),
            Point3::new(0.0, 0.0, 0.09),
        )
        .expect("reference model is valid")
    }

    pub fn stroke(&self) -> f64 {
        self.stroke
    }

    pub fn from_json(text: &str) -> Result<Self, GripperError> {
        let dto: GripperModelDto = serde_json::from_str(text)?;
        let get = |name: &str| -> Result<Point3, GripperError> {
            let xyz = dto
                .landmarks
                .get(name)
                .ok_or_else(|| GripperError::BadModel(format!("missing landmark {name:?}")))?;
            Ok(Point3::new(xyz[0], xyz[1], xyz[2]))
        };
        Self::new(
            dto.stroke,
            get("left_tip")?,
            get("right_tip")?,
            get("palm_base")?,
            get("contact_tip")?,
            get("contact_mid")?,
            get("contact_base")?,
        )
    }

    pub fn load(path: &Path) -> Result<Self, GripperError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        let mut landmarks = BTreeMap::new();
        for (name, p) in [
            ("left_tip", self.left_tip),
            ("right_tip", self.right_tip),
            ("palm_base", self.palm_base),
            ("contact_tip", self.contact_tip),
            ("contact_mid", self.contact_mid),
            ("contact_base", self.contact_base),
        ] {
            landmarks.insert(name.to_string(), [p.x, p.y, p.z]);
        }
        serde_json::to_string_pretty(&GripperModelDto {
            stroke: self.stroke,
            landmarks,
        })
        .expect("model DTOs always serialize")
    }

    pub fn save(&self, path: &Path) -> Result<(), GripperError> {
        Ok(std::fs::write(path, self.to_json())?)
    }

    /// Four evenly spaced samples along the closed-finger contact line, tip
    /// to base, matched against four hand joints by press/push.
    fn contact_samples(&self) -> [Point3; 4] {
        let tip = self.contact_tip.to_vector();
        let span = self.contact_base.to_vector() - tip;
        std::array::from_fn(|i| Point3::from_vector(tip + span * (i as f64 / 3.0)))
    }

    /// Deterministic unit vector perpendicular to the contact line, used as
    /// the twist reference for straight-target fits.
    fn contact_perpendicular(&self, axis: &Vector3<f64>) -> Vector3<f64> {
        let seed = if axis.x.abs() <= axis.y.abs() && axis.x.abs() <= axis.z.abs() {
            Vector3::x()
        } else if axis.y.abs() <= axis.z.abs() {
            Vector3::y()
        } else {
            Vector3::z()
        };
        (seed - axis * seed.dot(&axis)).normalize()
    }
}

impl Default for GripperModel {
    fn default() -> Self {
        Self::default_2f85()
    }
}

/// One retargeted step: gripper-local → frame-1 pose, aperture as a fraction
/// of the stroke, and the rule that produced it. Press and push always close
/// the gripper, so their fraction is 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GripperPose {
    pub pose: RigidTransform,
    pub opening_fraction: f64,
    pub heuristic: HeuristicKind,
}

/// A retargeted trajectory: one pose per step plus the per-step alignment
/// residual (RMS over the heuristic's correspondences, meters).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GripperTrajectory {
    poses: Vec<GripperPose>,
    residuals: Vec<f64>,
}

impl GripperTrajectory {
    pub fn poses(&self) -> &[GripperPose] {
        &self.poses
    }

    pub fn residuals(&self) -> &[f64] {
        &self.residuals
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Binary close command per step: emitted once the opening fraction has
    /// stayed below one half for two consecutive steps.
    pub fn close_commands(&self) -> Vec<bool> {
        let f: Vec<f64> = self.poses.iter().map(|p| p.opening_fraction).collect();
        (0..f.len())
            .map(|i| i > 0 && f[i] < 0.5 && f[i - 1] < 0.5)
            .collect()
    }
}

fn rms(residuals: impl Iterator<Item = f64>, n: usize) -> f64 {
    let sum: f64 = residuals.map(|r| r * r).sum();
    (sum / n as f64).sqrt()
}

fn fit_rms(pose: &RigidTransform, sources: &[Point3], targets: &[Point3]) -> f64 {
    rms(
        sources
            .iter()
            .zip(targets)
            .map(|(s, t)| pose.apply(*s).distance(t)),
        sources.len(),
    )
}

fn grasp_from_points(
    index_tip: Point3,
    thumb_tip: Point3,
    index_mcp: Point3,
    thumb_dip: Point3,
    model: &GripperModel,
) -> Result<(GripperPose, f64), GripperError> {
    let separation = index_tip.distance(&thumb_tip);
    if separation < TIP_COINCIDENCE_TOL {
        return Err(GripperError::DegenerateHand(
            "index and thumb tips coincide".into(),
        ));
    }
    let targets = [index_tip, thumb_tip, index_mcp.midpoint(&thumb_dip)];
    if centered_rank(&targets, &centroid(&targets)) < 2 {
        return Err(GripperError::DegenerateHand(
            "grasp target points are collinear".into(),
        ));
    }
    let sources = [model.left_tip, model.right_tip, model.palm_base];
    let pose = estimate_rigid_transform(&sources, &targets)?;
    let residual = fit_rms(&pose, &sources, &targets);
    Ok((
        GripperPose {
            pose,
            opening_fraction: (separation / model.stroke).clamp(0.0, 1.0),
            heuristic: HeuristicKind::Grasp,
        },
        residual,
    ))
}

/// Least-squares alignment of the four collinear contact samples to four
/// hand joints.
///
/// With collinear sources the optimal rotation is only constrained to send
/// the contact direction `a` onto `b = m / |m|`, where
/// `m = Σ dᵢ (tᵢ - t̄)` and `dᵢ` is the signed source offset along `a`
/// (any rotation about `b` leaves the point residual unchanged). The twist
/// is resolved from the targets' second moment `w = Σ dᵢ² rᵢ`, with `rᵢ`
/// the components of the centered targets perpendicular to `b`; the first
/// moment `Σ dᵢ rᵢ` vanishes identically, so `dᵢ²` is the lowest-order
/// weighting with a usable signal. Both `b` and `w` rotate with the targets,
/// so the fit is exactly equivariant whenever the joints are not themselves
/// collinear. For perfectly straight joints every perpendicular reference
/// vanishes — the input is rotationally symmetric about the line, no
/// equivariant twist exists — and the fit falls back to the smallest
/// rotation taking `a` to `b`.
fn contact_line_fit(
    targets: &[Point3; 4],
    model: &GripperModel,
) -> Result<(RigidTransform, f64), GripperError> {
    let sources = model.contact_samples();
    let s_bar = centroid(&sources);
    let t_bar = centroid(targets);
    let axis_vec = sources[3].to_vector() - sources[0].to_vector();
    let a = axis_vec.normalize();
    let d: Vec<f64> = sources
        .iter()
        .map(|s| (s.to_vector() - s_bar).dot(&a))
        .collect();

    let mut m = Vector3::zeros();
    for (i, t) in targets.iter().enumerate() {
        m += (t.to_vector() - t_bar) * d[i];
    }
    if m.norm() < 1e-12 {
        return Err(GripperError::DegenerateHand(
            "hand joints do not define a contact direction".into(),
        ));
    }
    let b = m.normalize();

    let mut w = Vector3::zeros();
    for (i, t) in targets.iter().enumerate() {
        let centered = t.to_vector() - t_bar;
        let perp = centered - b * centered.dot(&b);
        w += perp * (d[i] * d[i]);
    }

    let rotation = if w.norm() > 1e-12 {
        let wn = w.normalize();
        let c0 = model.contact_perpendicular(&a);
        let target_frame = Matrix3::from_columns(&[b, wn, b.cross(&wn)]);
        let source_frame = Matrix3::from_columns(&[a, c0, a.cross(&c0)]);
        RigidTransform::new(target_frame * source_frame.transpose(), Vector3::zeros())?
            .rotation()
            .to_owned()
    } else {
        let cross = a.cross(&b);
        if cross.norm() > 1e-12 {
            let angle = a.dot(&b).clamp(-1.0, 1.0).acos();
            *RigidTransform::from_axis_angle(cross, angle, Vector3::zeros()).rotation()
        } else if a.dot(&b) > 0.0 {
            Matrix3::identity()
        } else {
            let c0 = model.contact_perpendicular(&a);
            *RigidTransform::from_axis_angle(c0, std::f64::consts::PI, Vector3::zeros()).rotation()
        }
    };

    let pose = RigidTransform::new(rotation, t_bar - rotation * s_bar)?;
    let residual = fit_rms(&pose, &sources, targets);
    Ok((pose, residual))
}

fn press_from_points(
    targets: [Point3; 4],
    model: &GripperModel,
) -> Result<(GripperPose, f64), GripperError> {
    let (pose, residual) = contact_line_fit(&targets, model)?;
    Ok((
        GripperPose {
            pose,
            opening_fraction: 0.0,
            heuristic: HeuristicKind::Press,
        },
        residual,
    ))
}

fn push_from_points(
    targets: [Point3; 4],
    model: &GripperModel,
) -> Result<(GripperPose, f64), GripperError> {
    let (pose, residual) = contact_line_fit(&targets, model)?;
    Ok((
        GripperPose {
            pose,
            opening_fraction: 0.0,
            heuristic: HeuristicKind::Push,
        },
        residual,
    ))
}

fn press_targets(frame: &HandJointFrame) -> [Point3; 4] {
    [
        frame.index_tip(),
        frame.index_dip(),
        frame.index_pip(),
        frame.index_mcp(),
    ]
}

fn push_targets(frame: &HandJointFrame) -> [Point3; 4] {
    [
        frame.index_tip().midpoint(&frame.middle_tip()),
        frame.index_dip().midpoint(&frame.middle_dip()),
        frame.index_pip().midpoint(&frame.middle_pip()),
        frame.index_mcp().midpoint(&frame.middle_mcp()),
    ]
}

/// Gripper pose for a grasp: aligns {left_tip, right_tip, palm_base} to
/// {index_tip, thumb_tip, midpoint(index_mcp, thumb_dip)}; the aperture is
/// the tip separation as a fraction of the stroke.
pub fn grasp_pose(
    frame: &HandJointFrame,
    model: &GripperModel,
) -> Result<GripperPose, GripperError> {
    grasp_from_points(
        frame.index_tip(),
        frame.thumb_tip(),
        frame.index_mcp(),
        frame.thumb_dip(),
        model,
    )
    .map(|(p, _)| p)
}

/// Gripper pose for a press: aligns the closed contact line to the index
/// finger (tip, dip, pip, mcp). The gripper is closed.
pub fn press_pose(
    frame: &HandJointFrame,
    model: &GripperModel,
) -> Result<GripperPose, GripperError> {
    press_from_points(press_targets(frame), model).map(|(p, _)| p)
}

/// Gripper pose for a push: like press, but against the midpoints of the
/// index and middle finger joints. The gripper is closed.
pub fn push_pose(
    frame: &HandJointFrame,
    model: &GripperModel,
) -> Result<GripperPose, GripperError> {
    push_from_points(push_targets(frame), model).map(|(p, _)| p)
}

fn pose_for_joints(
    frame_id: usize,
    joints: &[Point3],
    heuristic: HeuristicKind,
    model: &GripperModel,
) -> Result<(GripperPose, f64), GripperError> {
    if joints.len() == JOINT_COUNT {
        let full = HandJointFrame::new(
            frame_id,
            joints.try_into().expect("length checked above"),
        )
        .map_err(|_| GripperError::DegenerateHand("non-finite joints".into()))?;
        return match heuristic {
            HeuristicKind::Grasp => grasp_from_points(
                full.index_tip(),
                full.thumb_tip(),
                full.index_mcp(),
                full.thumb_dip(),
                model,
            ),
            HeuristicKind::Press => press_from_points(press_targets(&full), model),
            HeuristicKind::Push => push_from_points(push_targets(&full), model),
        };
    }
    // Generated trajectories carry only the serialized joint subset: grasp
    // [index_tip, thumb_tip, index_mcp, thumb_dip]; press [tip, dip, pip,
    // mcp]; push the four index/middle midpoints.
    if joints.len() == 4 {
        let j: [Point3; 4] = joints.try_into().expect("length checked above");
        return match heuristic {
            HeuristicKind::Grasp => grasp_from_points(j[0], j[1], j[2], j[3], model),
            HeuristicKind::Press => press_from_points(j, model),
            HeuristicKind::Push => push_from_points(j, model),
        };
    }
    Err(GripperError::WrongArity {
        expected: 4,
        got: joints.len(),
    })
}

/// Retargets a whole hand trajectory. Frames may carry the full 21-joint
/// skeleton or the heuristic's 4-joint serialized subset; anything else is
/// rejected. Errors name the offending frame index.
pub fn map_trajectory(
    traj: &HandTrajectory,
    heuristic: HeuristicKind,
    model: &GripperModel,
) -> Result<GripperTrajectory, GripperError> {
    let mut poses = Vec::with_capacity(traj.len());
    let mut residuals = Vec::with_capacity(traj.len());
    for (i, frame) in traj.frames().iter().enumerate() {
        let (pose, residual) = pose_for_joints(frame.frame_id, &frame.joints, heuristic, model)
            .map_err(|e| at_frame(i, e))?;
        poses.push(pose);
        residuals.push(residual);
    }
    Ok(GripperTrajectory { poses, residuals })
}

//! 21-joint hand trajectories and hand-presence segmentation.
//!
//! Hand pose estimators emit one 21-point skeleton per frame in camera
//! coordinates. This module assembles those per-frame skeletons into
//! per-clip trajectories expressed in the clip's first camera frame (via
//! [`crate::stabilization`]), segments long recordings by hand presence, and
//! resamples trajectories to uniform lengths.
//!
//! Joint order follows the MANO convention: wrist = 0, then four joints per
//! finger in thumb, index, middle, ring, little order. The thumb runs
//! cmc/mcp/ip/tip; the other fingers run mcp/pip/dip/tip. Downstream code
//! addresses joints through the named accessors on [`HandJointFrame`], never
//! through raw indices.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Point3;
use crate::stabilization::{reexpress_in_frame1, FramePoses, StabilizationError};

/// Number of joints in the hand skeleton.
pub const JOINT_COUNT: usize = 21;

#[derive(Debug, Error)]
pub enum HandError {
    #[error("failed to read hand file: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse hand file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid hand file: {0}")]
    BadFile(String),
    #[error("clip frame {frame} has no hand joints")]
    MissingJoints { frame: usize },
    #[error("clip frame {frame} has no camera pose")]
    MissingPose { frame: usize },
    #[error("trajectory must have at least one frame")]
    EmptyTrajectory,
    #[error("frame {frame} has {got} joints, expected {expected}")]
    ArityMismatch {
        frame: usize,
        expected: usize,
        got: usize,
    },
    #[error("frame ids must increase: {prev} then {next}")]
    NonMonotonicFrames { prev: usize, next: usize },
    #[error("joint coordinates must be finite (frame {frame})")]
    NonFiniteJoint { frame: usize },
    #[error("resample target length must be at least 2, got {got}")]
    BadResampleLength { got: usize },
}

/// One hand observation: 21 joints in MANO order, in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct HandJointFrame {
    frame_id: usize,
    joints: [Point3; JOINT_COUNT],
}

macro_rules! joint_accessors {
    ($(($name:ident, $idx:expr)),* $(,)?) => {
        $(pub fn $name(&self) -> Point3 { self.joints[$idx] })*
    };
}

impl HandJointFrame {
    pub fn new(frame_id: usize, joints: [Point3; JOINT_COUNT]) -> Result<Self, HandError> {
        if joints.iter().any(|j| !j.is_finite()) {
            return Err(HandError::NonFiniteJoint { frame: frame_id });
        }
        Ok(Self { frame_id, joints })
    }

    pub fn frame_id(&self) -> usize {
        self.frame_id
    }

    pub fn joints(&self) -> &[Point3; JOINT_COUNT] {
        &self.joints
    }

    joint_accessors![
        (wrist, 0),
        (thumb_cmc, 1),
        (thumb_mcp, 2),
        (thumb_ip, 3),
        (thumb_tip, 4),
        (index_mcp, 5),
        (index_pip, 6),
        (index_dip, 7),
        (index_tip, 8),
        (middle_mcp, 9),
        (middle_pip, 10),
        (middle_dip, 11),
        (middle_tip, 12),
        (ring_mcp, 13),
        (ring_pip, 14),
        (ring_dip, 15),
        (ring_tip, 16),
        (little_mcp, 17),
        (little_pip, 18),
        (little_dip, 19),
        (little_tip, 20),
    ];

    /// The thumb has no anatomical DIP joint; retargeting texts that ask for
    /// a "thumb dip" mean the interphalangeal joint, returned here.
    pub fn thumb_dip(&self) -> Point3 {
        self.thumb_ip()
    }
}

/// One trajectory step: a set of 3D joints with no fixed arity. Full hand
/// observations carry 21 joints; generated trajectories may carry only the
/// heuristic-relevant subset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointFrame {
    #[serde(rename = "t")]
    pub frame_id: usize,
    pub joints: Vec<Point3>,
}

/// An ordered sequence of joint frames for one clip, all expressed in the
/// clip's frame-1 coordinates. Every frame has the same number of joints and
/// frame ids strictly increase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TrajectoryDto", into = "TrajectoryDto")]
pub struct HandTrajectory {
    clip_id: String,
    frames: Vec<JointFrame>,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryDto {
    clip_id: String,
    frames: Vec<JointFrame>,
}

impl From<HandTrajectory> for TrajectoryDto {
    fn from(t: HandTrajectory) -> Self {
        Self {
            clip_id: t.clip_id,
            frames: t.frames,
        }
    }
}

impl TryFrom<TrajectoryDto> for HandTrajectory {
    type Error = HandError;
    fn try_from(dto: TrajectoryDto) -> Result<Self, HandError> {
        HandTrajectory::new(dto.clip_id, dto.frames)
    }
}

impl HandTrajectory {
    pub fn new(clip_id: String, frames: Vec<JointFrame>) -> Result<Self, HandError> {
        let first = frames.first().ok_or(HandError::EmptyTrajectory)?;
        if first.joints.is_empty() {
            return Err(HandError::ArityMismatch {
                frame: first.frame_id,
                expected: 1,
                got: 0,
            });
        }
        let arity = first.joints.len();
        for w in frames.windows(2) {
            if w[1].frame_id <= w[0].frame_id {
                return Err(HandError::NonMonotonicFrames {
                    prev: w[0].frame_id,
                    next: w[1].frame_id,
                });
            }
        }
        for f in &frames {
            if f.joints.len() != arity {
                return Err(HandError::ArityMismatch {
                    frame: f.frame_id,
                    expected: arity,
                    got: f.joints.len(),
                });
            }
            if f.joints.iter().any(|j| !j.is_finite()) {
                return Err(HandError::NonFiniteJoint { frame: f.frame_id });
            }
        }
        Ok(Self { clip_id, frames })
    }

    pub fn from_mano(clip_id: String, frames: Vec<HandJointFrame>) -> Result<Self, HandError> {
        Self::new(
            clip_id,
            frames
                .into_iter()
                .map(|f| JointFrame {
                    frame_id: f.frame_id,
                    joints: f.joints.to_vec(),
                })
                .collect(),
        )
    }

    pub fn clip_id(&self) -> &str {
        &self.clip_id
    }

    pub fn frames(&self) -> &[JointFrame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the constructor rejects empty trajectories
    }

    /// Joints per frame; identical across frames by construction.
    pub fn arity(&self) -> usize {
        self.frames[0].joints.len()
    }
}

/// Per-frame hand-presence flags covering a whole recording.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresenceTimeline {
    flags: Vec<bool>,
}

impl PresenceTimeline {
    pub fn new(flags: Vec<bool>) -> Self {
        Self { flags }
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn is_present(&self, frame: usize) -> bool {
        self.flags.get(frame).copied().unwrap_or(false)
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }
}

/// Maximal runs of hand-present frames, as inclusive `(start, end)` frame
/// intervals. Runs separated by an absent gap shorter than `min_gap` frames
/// are merged into one interval, so brief detector dropouts do not split a
/// demonstration in two.
pub fn filter_hand_frames(timeline: &PresenceTimeline, min_gap: usize) -> Vec<(usize, usize)> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut start = None;
    for (i, &present) in timeline.flags().iter().enumerate() {
        match (present, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push((s, i - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, timeline.len() - 1));
    }

    let mut merged: Vec<(usize, usize)> = Vec::with_capacity(runs.len());
    for run in runs {
        match merged.last_mut() {
            Some(last) if run.0 - last.1 - 1 < min_gap => last.1 = run.1,
            _ => merged.push(run),
        }
    }
    merged
}

/// Re-expresses per-frame camera-coordinate joints in the clip's frame-1
/// coordinates. `raw_joints[t]` is local clip frame t; `None` marks a frame
/// the hand estimator produced nothing for.
pub fn build_hand_trajectory(
    clip_id: &str,
    raw_joints: &[Option<HandJointFrame>],
    poses: &FramePoses,
) -> Result<HandTrajectory, HandError> {
    let mut frames = Vec::with_capacity(raw_joints.len());
    for (t, entry) in raw_joints.iter().enumerate() {
        let hand = entry.as_ref().ok_or(HandError::MissingJoints { frame: t })?;
        let stabilized = reexpress_in_frame1(poses, t, hand.joints())
            .map_err(|e| match e {
                StabilizationError::UnknownFrame { frame } => HandError::MissingPose { frame },
                _ => HandError::MissingPose { frame: t },
            })?;
        frames.push(JointFrame {
            frame_id: t,
            joints: stabilized,
        });
    }
    HandTrajectory::new(clip_id.to_string(), frames)
}

/// Maps every joint of every frame through a rigid transform, preserving
/// frame ids and the clip id.
pub fn transform_trajectory(
    transform: &crate::geometry::RigidTransform,
    traj: &HandTrajectory,
) -> Result<HandTrajectory, HandError> {
    let frames = traj
        .frames
        .iter()
        .map(|f| JointFrame {
            frame_id: f.frame_id,
            joints: f.joints.iter().map(|p| transform.apply(*p)).collect(),
        })
        .collect();
    HandTrajectory::new(traj.clip_id.clone(), frames)
}

/// Piecewise-linear resampling to `target_length` frames at a uniform
/// parameter. Endpoints are preserved exactly; a target equal to the current
/// length returns the trajectory unchanged.
pub fn resample_trajectory(
    traj: &HandTrajectory,
    target_length: usize,
) -> Result<HandTrajectory, HandError> {
    let n = traj.len();
    if target_length == n {
        return Ok(traj.clone());
    }
    if target_length < 2 {
        return Err(HandError::BadResampleLength { got: target_length });
    }

    let arity = traj.arity();
    let frames = (0..target_length)
        .map(|j| {
            let s = j as f64 / (target_length - 1) as f64; // in [0, 1]
            let x = s * (n - 1) as f64;
            let i = (x.floor() as usize).min(n.saturating_sub(2));
            let w = x - i as f64;
            let joints = (0..arity)
                .map(|k| {
                    let a = traj.frames[i].joints[k];
                    if n == 1 || w == 0.0 {
                        return a;
                    }
                    let b = traj.frames[i + 1].joints[k];
                    Point3::new(
                        a.x * (1.0 - w) + b.x * w,
                        a.y * (1.0 - w) + b.y * w,
                        a.z * (1.0 - w) + b.z * w,
                    )
                })
                .collect();
            JointFrame {
                frame_id: j,
                joints,
            }
        })
        .collect();
    HandTrajectory::new(traj.clip_id.clone(), frames)
}

/// One entry of a recording's hand file.
#[derive(Clone, Debug, PartialEq)]
pub struct HandObservation {
    pub present: bool,
    pub joints: Option<[Point3; JOINT_COUNT]>,
    pub confidence: f64,
}

/// All hand observations for a recording, keyed by original frame index.
/// Frames without an entry count as hand-absent.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HandObservations {
    frames: std::collections::BTreeMap<usize, HandObservation>,
}

#[derive(Serialize, Deserialize)]
struct HandFrameDto {
    t: usize,
    present: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    joints: Option<Vec<[f64; 3]>>,
    confidence: f64,
}

#[derive(Serialize, Deserialize)]
struct HandFileDto {
    frames: Vec<HandFrameDto>,
}

impl HandObservations {
    pub fn from_json(text: &str) -> Result<Self, HandError> {
        let dto: HandFileDto = serde_json::from_str(text)?;
        let mut frames: std::collections::BTreeMap<usize, HandObservation> =
            std::collections::BTreeMap::new();
        for f in dto.frames {
            let joints = match f.joints {
                Some(raw) => {
                    if raw.len() != JOINT_COUNT {
                        return Err(HandError::BadFile(format!(
                            "frame {}: expected {} joints, got {}",
                            f.t,
                            JOINT_COUNT,
                            raw.len()
                        )));
                    }
                    let mut joints = [Point3::origin(); JOINT_COUNT];
                    for (j, xyz) in raw.iter().enumerate() {
                        if xyz.iter().any(|c| !c.is_finite()) {
                            return Err(HandError::BadFile(format!(
                                "frame {}: joint {} is not finite",
                                f.t, j
                            )));
                        }
                        joints[j] = Point3::new(xyz[0], xyz[1], xyz[2]);
                    }
                    Some(joints)
                }
                None => None,
            };
            if f.present && joints.is_none() {
                return Err(HandError::BadFile(format!(
                    "frame {}: marked present but carries no joints",
                    f.t
                )));
            }
            let obs = HandObservation {
                present: f.present,
                joints,
                confidence: f.confidence,
            };
            // Two detections for one frame: keep the more confident one.
            match frames.get(&f.t) {
                Some(existing) if existing.confidence >= obs.confidence => {}
                _ => {
                    frames.insert(f.t, obs);
                }
            }
        }
        Ok(Self { frames })
    }

    pub fn load(path: &Path) -> Result<Self, HandError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        let dto = HandFileDto {
            frames: self
                .frames
                .iter()
                .map(|(&t, obs)| HandFrameDto {
                    t,
                    present: obs.present,
                    joints: obs
                        .joints
                        .map(|js| js.iter().map(|p| [p.x, p.y, p.z]).collect()),
                    confidence: obs.confidence,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&dto).expect("hand DTOs always serialize")
    }

    pub fn save(&self, path: &Path) -> Result<(), HandError> {
        Ok(std::fs::write(path, self.to_json())?)
    }

    pub fn insert(&mut self, t: usize, obs: HandObservation) {
        self.frames.insert(t, obs);
    }

    pub fn get(&self, t: usize) -> Option<&HandObservation> {
        self.frames.get(&t)
    }

    /// Presence flags over `frame_count` frames; unlisted frames are absent.
    pub fn presence_timeline(&self, frame_count: usize) -> PresenceTimeline {
        PresenceTimeline::new(
            (0..frame_count)
                .map(|t| self.frames.get(&t).map_or(false, |o| o.present))
                .collect(),
        )
    }

    /// Joints for the given original frames, in order, as inputs for
    /// [`build_hand_trajectory`] (index = local clip frame).
    pub fn joints_for_frames(&self, frames: &[usize]) -> Vec<Option<HandJointFrame>> {
        frames
            .iter()
            .enumerate()
            .map(|(local, &orig)| {
                self.frames.get(&orig).and_then(|o| {
                    o.joints
                        .map(|joints| HandJointFrame { frame_id: local, joints })
                })
            })
            .collect()
    }
}

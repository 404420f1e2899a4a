//! Camera-motion removal for egocentric clips.
//!
//! A head-mounted camera moves constantly, so raw per-frame 3D measurements
//! live in different frames. Tracking points on the static scene (floor,
//! walls, table) and registering their lifted positions against the clip's
//! first frame yields one rigid transform `T_1_from_t` per frame; applying it
//! re-expresses anything observed at frame t in frame-1 coordinates.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    robust_rigid_transform, unproject, CameraIntrinsics, DepthMap, GeometryError, Point3,
    RigidTransform, RobustParams,
};

#[derive(Debug, Error)]
pub enum StabilizationError {
    #[error("failed to read mask image: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to decode mask image: {0}")]
    Decode(#[from] image::ImageError),
    #[error("mask must be an 8-bit grayscale PNG")]
    BadMaskFormat,
    #[error("failed to parse track file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid track file: {0}")]
    BadTrackFile(String),
    #[error("static area too small: placed {placed} of {requested} points")]
    InsufficientStaticArea { requested: usize, placed: usize },
    #[error("clip cannot be stabilized: frame 1 has {valid} tracked points with valid depth, need 3")]
    UnstabilizableClip { valid: usize },
    #[error("frame {frame} has no estimated pose")]
    UnknownFrame { frame: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Binary map of pixels belonging to the static scene (true = static).
#[derive(Clone, Debug, PartialEq)]
pub struct StaticMask {
    frame_id: usize,
    width: u32,
    height: u32,
    data: Vec<bool>,
}

impl StaticMask {
    pub fn new(frame_id: usize, width: u32, height: u32, data: Vec<bool>) -> Result<Self, StabilizationError> {
        if data.len() != width as usize * height as usize {
            return Err(StabilizationError::BadTrackFile(format!(
                "mask data length {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            frame_id,
            width,
            height,
            data,
        })
    }

    pub fn frame_id(&self) -> usize {
        self.frame_id
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn is_static(&self, u: u32, v: u32) -> bool {
        self.data[v as usize * self.width as usize + u as usize]
    }

    pub fn static_pixel_count(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }

    /// Reads an 8-bit grayscale PNG; any nonzero pixel is static.
    pub fn from_png(path: &Path, frame_id: usize) -> Result<Self, StabilizationError> {
        match image::open(path)? {
            image::DynamicImage::ImageLuma8(buf) => {
                let (width, height) = buf.dimensions();
                let data = buf.pixels().map(|p| p.0[0] != 0).collect();
                StaticMask::new(frame_id, width, height, data)
            }
            _ => Err(StabilizationError::BadMaskFormat),
        }
    }

    pub fn to_png(&self, path: &Path) -> Result<(), StabilizationError> {
        let mut buf = image::GrayImage::new(self.width, self.height);
        for (u, v, px) in buf.enumerate_pixels_mut() {
            *px = image::Luma([if self.is_static(u, v) { 255 } else { 0 }]);
        }
        buf.save(path)?;
        Ok(())
    }
}

/// One tracked 2D point over time. `points` maps a frame index to the pixel
/// position and visibility reported by the tracker.
#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub id: u64,
    pub points: BTreeMap<usize, (f64, f64, bool)>,
}

impl Track {
    /// Pixel position at a frame if the tracker saw the point there.
    pub fn visible_at(&self, frame: usize) -> Option<(f64, f64)> {
        self.points
            .get(&frame)
            .and_then(|&(u, v, vis)| vis.then_some((u, v)))
    }
}

/// All tracks for a clip or recording.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrackSet {
    pub tracks: Vec<Track>,
}

#[derive(Serialize, Deserialize)]
struct TrackDto {
    id: u64,
    points: Vec<[f64; 4]>,
}

#[derive(Serialize, Deserialize)]
struct TrackSetDto {
    tracks: Vec<TrackDto>,
}

impl TrackSet {
    pub fn from_json(text: &str) -> Result<Self, StabilizationError> {
        let dto: TrackSetDto = serde_json::from_str(text)?;
        let mut tracks = Vec::with_capacity(dto.tracks.len());
        for t in dto.tracks {
            let mut points = BTreeMap::new();
            for p in t.points {
                let [frame, u, v, vis] = p;
                if frame < 0.0 || frame.fract() != 0.0 {
                    return Err(StabilizationError::BadTrackFile(format!(
                        "track {}: frame index {} is not a non-negative integer",
                        t.id, frame
                    )));
                }
                if !(u.is_finite() && v.is_finite()) {
                    return Err(StabilizationError::BadTrackFile(format!(
                        "track {}: non-finite pixel at frame {}",
                        t.id, frame
                    )));
                }
                if vis != 0.0 && vis != 1.0 {
                    return Err(StabilizationError::BadTrackFile(format!(
                        "track {}: visibility must be 0 or 1, got {}",
                        t.id, vis
                    )));
                }
                if points.insert(frame as usize, (u, v, vis == 1.0)).is_some() {
                    return Err(StabilizationError::BadTrackFile(format!(
                        "track {}: duplicate frame {}",
                        t.id, frame
                    )));
                }
            }
            tracks.push(Track { id: t.id, points });
        }
        Ok(Self { tracks })
    }

    pub fn load(path: &Path) -> Result<Self, StabilizationError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        let dto = TrackSetDto {
            tracks: self
                .tracks
                .iter()
                .map(|t| TrackDto {
                    id: t.id,
                    points: t
                        .points
                        .iter()
                        .map(|(&f, &(u, v, vis))| [f as f64, u, v, if vis { 1.0 } else { 0.0 }])
                        .collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&dto).expect("track DTOs always serialize")
    }

    pub fn save(&self, path: &Path) -> Result<(), StabilizationError> {
        Ok(std::fs::write(path, self.to_json())?)
    }

    /// Restricts tracks to the given original frames, renumbering them to
    /// local indices 0..frames.len() in the given order.
    pub fn select_frames(&self, frames: &[usize]) -> TrackSet {
        let tracks = self
            .tracks
            .iter()
            .map(|t| Track {
                id: t.id,
                points: frames
                    .iter()
                    .enumerate()
                    .filter_map(|(local, orig)| t.points.get(orig).map(|p| (local, *p)))
                    .collect(),
            })
            .collect();
        TrackSet { tracks }
    }
}

/// Per-frame rigid transforms into the clip's first frame. `flagged` marks
/// frames whose own registration failed and which inherit the previous pose.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FramePoses {
    frame_count: usize,
    poses: Vec<RigidTransform>,
    flagged: Vec<bool>,
}

impl FramePoses {
    /// Builds a pose set directly, e.g. from synthetic data or a saved file.
    /// [`estimate_frame_poses`] additionally guarantees that the first pose
    /// is the exact identity; this constructor only checks shape.
    pub fn from_poses(
        poses: Vec<RigidTransform>,
        flagged: Vec<bool>,
    ) -> Result<Self, StabilizationError> {
        if poses.is_empty() {
            return Err(StabilizationError::UnstabilizableClip { valid: 0 });
        }
        if poses.len() != flagged.len() {
            return Err(StabilizationError::BadTrackFile(format!(
                "pose count {} does not match flag count {}",
                poses.len(),
                flagged.len()
            )));
        }
        Ok(Self {
            frame_count: poses.len(),
            poses,
            flagged,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    /// `T_1_from_t` for local frame index t.
    pub fn pose(&self, frame: usize) -> Result<&RigidTransform, StabilizationError> {
        self.poses
            .get(frame)
            .ok_or(StabilizationError::UnknownFrame { frame })
    }

    pub fn is_flagged(&self, frame: usize) -> bool {
        self.flagged.get(frame).copied().unwrap_or(false)
    }

    pub fn flagged_frames(&self) -> Vec<usize> {
        self.flagged
            .iter()
            .enumerate()
            .filter_map(|(i, f)| f.then_some(i))
            .collect()
    }
}

/// Draws pixel positions from the static region of a mask, keeping every
/// accepted pair at least `min_separation` pixels apart (Euclidean).
/// Deterministic for a fixed seed.
pub fn sample_static_points(
    mask: &StaticMask,
    count: usize,
    seed: u64,
    min_separation: f64,
) -> Result<Vec<(u32, u32)>, StabilizationError> {
    let mut candidates: Vec<(u32, u32)> = Vec::with_capacity(mask.static_pixel_count());
    for v in 0..mask.height() {
        for u in 0..mask.width() {
            if mask.is_static(u, v) {
                candidates.push((u, v));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut accepted: Vec<(u32, u32)> = Vec::with_capacity(count);
    let sep2 = min_separation * min_separation;
    // Partial Fisher-Yates: visit candidates in random order without a full
    // shuffle, accepting greedily under the separation constraint.
    for i in 0..candidates.len() {
        if accepted.len() == count {
            break;
        }
        let j = rng.gen_range(i..candidates.len());
        candidates.swap(i, j);
        let (u, v) = candidates[i];
        let far_enough = accepted.iter().all(|&(au, av)| {
            let du = u as f64 - au as f64;
            let dv = v as f64 - av as f64;
            du * du + dv * dv >= sep2
        });
        if far_enough {
            accepted.push((u, v));
        }
    }

    if accepted.len() < count {
        return Err(StabilizationError::InsufficientStaticArea {
            requested: count,
            placed: accepted.len(),
        });
    }
    Ok(accepted)
}

/// Lifts a tracked pixel at one frame, reading depth at the nearest integer
/// pixel. Returns None when the point is invisible, out of bounds, or has no
/// valid depth.
fn lift_track_point(
    track: &Track,
    frame: usize,
    depth: &DepthMap,
    intrinsics: &CameraIntrinsics,
) -> Option<Point3> {
    let (u, v) = track.visible_at(frame)?;
    if !intrinsics.contains(u, v) {
        return None;
    }
    let d = depth.valid_at(u.round() as i64, v.round() as i64)?;
    unproject((u, v), d, intrinsics).ok()
}

/// Estimates `T_1_from_t` for every frame of a clip from its static-scene
/// tracks and depth maps. `depths[t]` is local frame t; track frame indices
/// use the same local numbering (see [`TrackSet::select_frames`]).
///
/// Frame 0 is the reference and gets the exact identity. Frames with fewer
/// than 3 usable correspondences, or where RANSAC finds no consensus, are
/// flagged and inherit the previous frame's pose.
pub fn estimate_frame_poses(
    tracks: &TrackSet,
    depths: &[DepthMap],
    intrinsics: &CameraIntrinsics,
    params: &RobustParams,
) -> Result<FramePoses, StabilizationError> {
    let n = depths.len();
    if n == 0 {
        return Err(StabilizationError::UnstabilizableClip { valid: 0 });
    }

    // Anchor points in frame 0; tracks without a valid frame-0 lift are
    // useless for registration against frame 1 of the clip.
    let anchors: Vec<(usize, Point3)> = tracks
        .tracks
        .iter()
        .enumerate()
        .filter_map(|(i, t)| lift_track_point(t, 0, &depths[0], intrinsics).map(|p| (i, p)))
        .collect();
    if anchors.len() < 3 {
        return Err(StabilizationError::UnstabilizableClip {
            valid: anchors.len(),
        });
    }

    let mut poses = vec![RigidTransform::identity()];
    let mut flagged = vec![false];

    for t in 1..n {
        let mut source = Vec::new(); // points in frame t
        let mut target = Vec::new(); // matching points in frame 0
        for &(track_idx, anchor) in &anchors {
            if let Some(p) =
                lift_track_point(&tracks.tracks[track_idx], t, &depths[t], intrinsics)
            {
                source.push(p);
                target.push(anchor);
            }
        }

        let frame_params = RobustParams {
            seed: params.seed ^ (t as u64),
            ..*params
        };
        let estimated = if source.len() < 3 {
            None
        } else {
            match robust_rigid_transform(&source, &target, &frame_params) {
                Ok((pose, _mask)) => Some(pose),
                Err(GeometryError::NoConsensus { .. }) => None,
                Err(e) => return Err(e.into()),
            }
        };

        match estimated {
            Some(pose) => {
                poses.push(pose);
                flagged.push(false);
            }
            None => {
                let prev = *poses.last().expect("frame 0 always present");
                poses.push(prev);
                flagged.push(true);
            }
        }
    }

    Ok(FramePoses {
        frame_count: n,
        poses,
        flagged,
    })
}

/// Maps camera-space points observed at `frame` into frame-1 coordinates.
pub fn reexpress_in_frame1(
    poses: &FramePoses,
    frame: usize,
    points: &[Point3],
) -> Result<Vec<Point3>, StabilizationError> {
    let pose = poses.pose(frame)?;
    Ok(points.iter().map(|p| pose.apply(*p)).collect())
}

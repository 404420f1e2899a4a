//! Deterministic synthetic recordings with closed-form geometry.
//!
//! [`generate_scene`] writes a complete on-disk recording (manifest, depth
//! and mask PNGs, descriptor grids, hand and track files, a scripted
//! retrieval file, and ground-truth annotations) plus a single-frame live
//! manifest, and returns the analytic ground truth alongside the paths. The
//! scene is a fronto-parallel textured plane half a meter from a camera
//! that translates parallel to it, so every unprojection, frame pose, and
//! stabilized joint has an exact expected value. End-to-end tests compare
//! pipeline output against these values instead of against the pipeline
//! itself.
//!
//! Scene layout:
//!
//! * 160x120 frames, 16 px patches (7x10 grid), fx = fy = 200, plane at
//!   z = 0.5 m. Depth is stored at scale 10000, so every pixel holds the
//!   raw value 5000 and decodes to exactly 0.5.
//! * 40 frames at 10 fps. The hand is present on frames 2..=13 (clip A)
//!   and 20..=31 (clip B); the 6-frame gap between them survives any
//!   `min_gap` below 7.
//! * Keypoint k lives on a plane patch; clip B views the same world points
//!   from a camera 0.08 m to the left, shifting them two patch columns
//!   right. The live frame views the scene through a 180 degree rotation
//!   about the optical axis plus a translation, both known in closed form.
//! * Descriptors are one-hot: keypoint patches share a dimension across
//!   clip A, clip B, and the live grid (cosine exactly 1), while every
//!   background patch gets a private dimension (cosine exactly 0), so the
//!   commonality vote has an unambiguous answer.
//! * The hand performs the same world-space 12-step grasp in both clips:
//!   fingertips close from 70 mm to 26 mm while descending toward the
//!   plane, so gripper close commands flip partway through the motion.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde_json::json;
use thiserror::Error;

use crate::descriptors::{write_descriptor_grid, DescriptorError, DescriptorGrid, KeypointSet};
use crate::geometry::{
    unproject, CameraIntrinsics, DepthIoError, DepthMap, GeometryError, Point3, RigidTransform,
};
use crate::gripper::HeuristicKind;
use crate::hands::{
    HandError, HandObservation, HandObservations, HandTrajectory, JointFrame, JOINT_COUNT,
};
use crate::stabilization::{StaticMask, Track, TrackSet};

const WIDTH: u32 = 160;
const HEIGHT: u32 = 120;
const PATCH: u32 = 16;
const ROWS: u32 = HEIGHT / PATCH; // 7
const COLS: u32 = WIDTH / PATCH; // 10
const FX: f64 = 200.0;
const FY: f64 = 200.0;
const CX: f64 = 80.0;
const CY: f64 = 60.0;
const PLANE_Z: f64 = 0.5;
const DEPTH_SCALE: f64 = 10_000.0;
const FPS: f64 = 10.0;
const FRAME_COUNT: usize = 40;
const CLIP_A: (usize, usize) = (2, 13);
const CLIP_B: (usize, usize) = (20, 31);
const CLIP_LEN: usize = 12;

/// Keypoint patches are confined to this sub-grid so that both the clip B
/// column shift and the live reflection keep them on the board.
const SUB_ROWS: u32 = 5;
const SUB_COLS: u32 = 8;
/// Columns clip B's camera shift adds to every keypoint patch.
const B_COL_SHIFT: u32 = 2;
/// Patch shift applied on top of the 180 degree rotation for the live view.
const LIVE_SHIFT: (i64, i64) = (-2, -2);

pub const MAX_KEYPOINTS: usize = (SUB_ROWS * SUB_COLS) as usize;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("keypoint count {got} outside supported range 3..={max}")]
    BadKeypointCount { got: usize, max: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("depth: {0}")]
    Depth(#[from] DepthIoError),
    #[error("descriptors: {0}")]
    Descriptor(#[from] DescriptorError),
    #[error("stabilization: {0}")]
    Stabilization(#[from] crate::stabilization::StabilizationError),
    #[error("hands: {0}")]
    Hand(#[from] HandError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Ground truth returned by [`generate_scene`]: file locations plus the
/// analytic quantities tests compare against.
#[derive(Clone, Debug)]
pub struct SynthScene {
    pub dir: PathBuf,
    pub manifest_path: PathBuf,
    pub live_manifest_path: PathBuf,
    pub script_path: PathBuf,
    pub annotations_path: PathBuf,
    pub command: String,
    pub heuristic: HeuristicKind,
    pub fps: f64,
    pub keypoint_count: usize,
    pub min_gap: usize,
    /// Inclusive original frame ranges where the hand is present.
    pub clip_a_frames: (usize, usize),
    pub clip_b_frames: (usize, usize),
    /// Keypoints in clip A's first-frame camera coordinates, ordered as the
    /// commonality vote returns them (ascending source patch index).
    pub demo_keypoints: KeypointSet,
    /// The same keypoints seen from the live camera, order-aligned with
    /// `demo_keypoints`.
    pub live_keypoints: KeypointSet,
    /// Rigid map from demo coordinates to live coordinates:
    /// `live_keypoints[i] = demo_to_live * demo_keypoints[i]`.
    pub demo_to_live: RigidTransform,
    /// Hand motion in clip A's first-frame coordinates (local frame ids
    /// 0..CLIP_LEN), identical in world space for both clips.
    pub demo_trajectory: HandTrajectory,
}

fn intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(FX, FY, CX, CY, WIDTH, HEIGHT).expect("constants are valid intrinsics")
}

/// Demo keypoint k's patch in clip A's grid. The multiplier 17 is coprime
/// to the 40-patch sub-grid, so patches are distinct; the +7 offset keeps
/// the first three keypoints non-collinear.
fn demo_patch(k: usize) -> (u32, u32) {
    let p = (k * 17 + 7) % MAX_KEYPOINTS;
    ((p / SUB_COLS as usize) as u32, (p % SUB_COLS as usize) as u32)
}

/// The same keypoint's patch in the live grid: a 180 degree image rotation
/// maps (r, c) to (ROWS-1-r, COLS-1-c); the live camera offset shifts by
/// `LIVE_SHIFT` on top.
fn live_patch(r: u32, c: u32) -> (u32, u32) {
    let lr = (ROWS as i64 - 1 - r as i64) + LIVE_SHIFT.0;
    let lc = (COLS as i64 - 1 - c as i64) + LIVE_SHIFT.1;
    debug_assert!(lr >= 0 && lc >= 0);
    (lr as u32, lc as u32)
}

fn patch_index(r: u32, c: u32) -> usize {
    (r * COLS + c) as usize
}

/// Camera origin in world coordinates (rotation is identity throughout).
/// Piecewise: frozen before clip A, linear drift inside each clip, a linear
/// blend across the gap, frozen after clip B.
fn camera_position(frame: usize) -> Vector3<f64> {
    let a = |i: f64| Vector3::new(0.003 * i, -0.002 * i, 0.0);
    let b = |i: f64| Vector3::new(-0.08 + 0.0025 * i, 0.0015 * i, 0.0);
    if frame <= CLIP_A.0 {
        a(0.0)
    } else if frame <= CLIP_A.1 {
        a((frame - CLIP_A.0) as f64)
    } else if frame < CLIP_B.0 {
        let s = (frame - CLIP_A.1) as f64 / (CLIP_B.0 - CLIP_A.1) as f64;
        let from = a((CLIP_A.1 - CLIP_A.0) as f64);
        from + s * (b(0.0) - from)
    } else if frame <= CLIP_B.1 {
        b((frame - CLIP_B.0) as f64)
    } else {
        b((CLIP_B.1 - CLIP_B.0) as f64)
    }
}

/// World-space hand joints at step `i` of the 12-step grasp. The four
/// grasp-relevant joints (index tip and mcp, thumb tip and ip) are placed
/// exactly; the rest are filled in with distinct finite positions so the
/// frame passes 21-joint validation.
fn hand_world(i: usize) -> [Point3; JOINT_COUNT] {
    let s = i as f64;
    let sep = 0.07 - 0.004 * s;
    let center = Vector3::new(-0.02 + 0.004 * s, 0.01 - 0.002 * s, 0.42 - 0.006 * s);

    let at = |v: Vector3<f64>| Point3::new(v.x, v.y, v.z);
    let index_tip = center + Vector3::new(0.0, sep / 2.0, 0.0);
    let thumb_tip = center + Vector3::new(0.0, -sep / 2.0, 0.0);
    let index_mcp = center + Vector3::new(-0.07, 0.035, 0.015);
    let thumb_ip = center + Vector3::new(-0.07, -0.035, 0.015);
    let wrist = center + Vector3::new(-0.12, 0.0, 0.04);

    let lerp = |a: Vector3<f64>, b: Vector3<f64>, t: f64| a + t * (b - a);
    let mut joints = [Point3::origin(); JOINT_COUNT];
    joints[0] = at(wrist);
    // Thumb chain: cmc, mcp, ip, tip.
    joints[1] = at(lerp(wrist, thumb_ip, 0.3));
    joints[2] = at(lerp(wrist, thumb_ip, 0.65));
    joints[3] = at(thumb_ip);
    joints[4] = at(thumb_tip);
    // Index chain: mcp, pip, dip, tip.
    joints[5] = at(index_mcp);
    joints[6] = at(lerp(index_mcp, index_tip, 0.4));
    joints[7] = at(lerp(index_mcp, index_tip, 0.75));
    joints[8] = at(index_tip);
    // Middle, ring, and little fingers fan out with fixed offsets.
    for (f, &(dy, dz)) in [(0.02, 0.004), (0.045, 0.012), (0.07, 0.024)].iter().enumerate() {
        let base = 9 + 4 * f;
        let mcp = index_mcp + Vector3::new(-0.004 * (f as f64 + 1.0), dy, dz);
        let tip = index_tip + Vector3::new(-0.006 * (f as f64 + 1.0), dy, dz);
        joints[base] = at(mcp);
        joints[base + 1] = at(lerp(mcp, tip, 0.4));
        joints[base + 2] = at(lerp(mcp, tip, 0.75));
        joints[base + 3] = at(tip);
    }
    joints
}

/// Builds a one-hot descriptor grid. `planted` maps patch index -> keypoint
/// dimension; every other patch gets the private dimension
/// `keypoint_count + noise_block * patch_count + patch`.
fn one_hot_grid(
    frame_id: usize,
    keypoint_count: usize,
    planted: &std::collections::BTreeMap<usize, usize>,
    noise_block: usize,
) -> Result<DescriptorGrid, DescriptorError> {
    let patches = (ROWS * COLS) as usize;
    let dim = keypoint_count + 3 * patches;
    let mut data = DMatrix::<f64>::zeros(patches, dim);
    for p in 0..patches {
        match planted.get(&p) {
            Some(&k) => data[(p, k)] = 1.0,
            None => data[(p, keypoint_count + noise_block * patches + p)] = 1.0,
        }
    }
    DescriptorGrid::new(frame_id, ROWS, COLS, PATCH, (0, 0), data)
}

fn grid_center_point(grid: &DescriptorGrid, patch: usize) -> Result<Point3, GeometryError> {
    unproject(grid.patch_center(patch), PLANE_Z, &intrinsics())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), SynthError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Writes a complete synthetic recording under `dir` and returns its ground
/// truth. `keypoint_count` selects how many plane patches carry shared
/// descriptors (3..=[`MAX_KEYPOINTS`]).
pub fn generate_scene(dir: &Path, keypoint_count: usize) -> Result<SynthScene, SynthError> {
    if !(3..=MAX_KEYPOINTS).contains(&keypoint_count) {
        return Err(SynthError::BadKeypointCount {
            got: keypoint_count,
            max: MAX_KEYPOINTS,
        });
    }
    std::fs::create_dir_all(dir)?;
    let intr = intrinsics();

    // Shared pixel assets: a flat RGB frame, a constant-depth plane, and an
    // all-static mask. Every frame references the same three files.
    let rgb_path = dir.join("rgb.png");
    image::RgbImage::from_pixel(WIDTH, HEIGHT, image::Rgb([96, 96, 104])).save(&rgb_path)?;
    let depth_path = dir.join("depth.png");
    DepthMap::constant(WIDTH, HEIGHT, PLANE_Z).to_png(&depth_path, DEPTH_SCALE)?;
    let mask_path = dir.join("mask.png");
    StaticMask::new(0, WIDTH, HEIGHT, vec![true; (WIDTH * HEIGHT) as usize])?
        .to_png(&mask_path)?;

    // Keypoint patches, ordered as the commonality vote will order them:
    // every planted descriptor gets one vote and similarity 1.0, so the tie
    // break sorts by ascending patch index in clip A's grid.
    let mut order: Vec<(usize, u32, u32)> = (0..keypoint_count)
        .map(|k| {
            let (r, c) = demo_patch(k);
            (patch_index(r, c), r, c)
        })
        .collect();
    order.sort_unstable();

    let mut planted_a = std::collections::BTreeMap::new();
    let mut planted_b = std::collections::BTreeMap::new();
    let mut planted_live = std::collections::BTreeMap::new();
    for (dim, &(pa, r, c)) in order.iter().enumerate() {
        let (lr, lc) = live_patch(r, c);
        planted_a.insert(pa, dim);
        planted_b.insert(patch_index(r, c + B_COL_SHIFT), dim);
        planted_live.insert(patch_index(lr, lc), dim);
    }

    let grid_a = one_hot_grid(CLIP_A.0, keypoint_count, &planted_a, 0)?;
    let grid_b = one_hot_grid(CLIP_B.0, keypoint_count, &planted_b, 1)?;
    let grid_live = one_hot_grid(0, keypoint_count, &planted_live, 2)?;
    let grid_bg = one_hot_grid(0, keypoint_count, &std::collections::BTreeMap::new(), 0)?;
    let grid_a_path = dir.join("grid_clip_a.rxdg");
    let grid_b_path = dir.join("grid_clip_b.rxdg");
    let grid_live_path = dir.join("grid_live.rxdg");
    let grid_bg_path = dir.join("grid_background.rxdg");
    write_descriptor_grid(&grid_a_path, &grid_a)?;
    write_descriptor_grid(&grid_b_path, &grid_b)?;
    write_descriptor_grid(&grid_live_path, &grid_live)?;
    write_descriptor_grid(&grid_bg_path, &grid_bg)?;

    // Ground-truth keypoints: clip A's camera sits at the world origin, so
    // demo coordinates equal world coordinates. The live set is the same
    // points through the live camera, order-aligned by shared descriptor.
    let mut demo_points = Vec::with_capacity(keypoint_count);
    let mut live_points = Vec::with_capacity(keypoint_count);
    for &(pa, r, c) in &order {
        let (lr, lc) = live_patch(r, c);
        demo_points.push(grid_center_point(&grid_a, pa)?);
        live_points.push(grid_center_point(&grid_live, patch_index(lr, lc))?);
    }
    let demo_keypoints = KeypointSet {
        frame_id: CLIP_A.0,
        points: demo_points,
    };
    let live_keypoints = KeypointSet {
        frame_id: 0,
        points: live_points,
    };

    // The demo-to-live map: 180 degree rotation about the optical axis with
    // the translation pinned by the first keypoint correspondence. All
    // other correspondences agree to rounding error by construction.
    let rotation = Matrix3::new(-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0);
    let d0 = demo_keypoints.points[0].to_vector();
    let l0 = live_keypoints.points[0].to_vector();
    let demo_to_live = RigidTransform::new(rotation, l0 - rotation * d0)?;

    // Hand observations: the identical world-space grasp plays out in both
    // clips, stored in each frame's own camera coordinates.
    let mut observations = HandObservations::default();
    for clip in [CLIP_A, CLIP_B] {
        for i in 0..CLIP_LEN {
            let t = clip.0 + i;
            let cam = camera_position(t);
            let world = hand_world(i);
            let joints: [Point3; JOINT_COUNT] =
                std::array::from_fn(|j| Point3::new(
                    world[j].x - cam.x,
                    world[j].y - cam.y,
                    world[j].z - cam.z,
                ));
            observations.insert(
                t,
                HandObservation {
                    present: true,
                    joints: Some(joints),
                    confidence: 1.0,
                },
            );
        }
    }
    let hands_path = dir.join("hands.json");
    observations.save(&hands_path)?;

    // Demo trajectory ground truth in clip A's first-frame coordinates.
    // That camera sits at the world origin, so the joints are hand_world
    // verbatim, keyed by local frame ids as the stabilizer emits them.
    let demo_trajectory = HandTrajectory::new(
        "demo".to_string(),
        (0..CLIP_LEN)
            .map(|i| JointFrame {
                frame_id: i,
                joints: hand_world(i).to_vec(),
            })
            .collect(),
    )?;

    // Static plane tracks: 12 world points projected through each frame's
    // camera, visible everywhere. The grid spans only positions that stay
    // inside the image for every camera position on the path.
    let mut tracks = Vec::new();
    let xs = [-0.15, -0.07, 0.01, 0.09];
    let ys = [-0.1, 0.0, 0.1];
    for (ti, (xi, yi)) in xs
        .iter()
        .flat_map(|x| ys.iter().map(move |y| (*x, *y)))
        .enumerate()
    {
        let mut points = std::collections::BTreeMap::new();
        for t in 0..FRAME_COUNT {
            let cam = camera_position(t);
            let u = FX * (xi - cam.x) / PLANE_Z + CX;
            let v = FY * (yi - cam.y) / PLANE_Z + CY;
            debug_assert!(u >= 0.0 && u < WIDTH as f64 && v >= 0.0 && v < HEIGHT as f64);
            points.insert(t, (u, v, true));
        }
        tracks.push(Track {
            id: ti as u64,
            points,
        });
    }
    let tracks_path = dir.join("tracks.json");
    TrackSet { tracks }.save(&tracks_path)?;

    // Empty live-frame hand and track files: the live frame carries no
    // demonstration, only pixels and descriptors.
    let live_hands_path = dir.join("live_hands.json");
    HandObservations::default().save(&live_hands_path)?;
    let live_tracks_path = dir.join("live_tracks.json");
    TrackSet { tracks: Vec::new() }.save(&live_tracks_path)?;

    // Recording manifest: clip frames reference their clip's grid, the
    // rest the background grid; pixel assets are shared.
    let frame_grid = |t: usize| -> &str {
        if (CLIP_A.0..=CLIP_A.1).contains(&t) {
            "grid_clip_a.rxdg"
        } else if (CLIP_B.0..=CLIP_B.1).contains(&t) {
            "grid_clip_b.rxdg"
        } else {
            "grid_background.rxdg"
        }
    };
    let frames: Vec<serde_json::Value> = (0..FRAME_COUNT)
        .map(|t| {
            json!({
                "t": t,
                "rgb": "rgb.png",
                "depth": "depth.png",
                "descriptors": frame_grid(t),
                "hands": "hands.json",
                "mask": "mask.png",
                "tracks": "tracks.json",
            })
        })
        .collect();
    let manifest_path = dir.join("manifest.json");
    write_json(
        &manifest_path,
        &json!({
            "recording_id": "synthetic-plane",
            "fps": FPS,
            "depth_scale": DEPTH_SCALE,
            "intrinsics": intr,
            "frames": frames,
        }),
    )?;

    let live_manifest_path = dir.join("live_manifest.json");
    write_json(
        &live_manifest_path,
        &json!({
            "recording_id": "synthetic-plane-live",
            "fps": FPS,
            "depth_scale": DEPTH_SCALE,
            "intrinsics": intr,
            "frames": [{
                "t": 0,
                "rgb": "rgb.png",
                "depth": "depth.png",
                "descriptors": "grid_live.rxdg",
                "hands": "live_hands.json",
                "mask": "mask.png",
                "tracks": "live_tracks.json",
            }],
        }),
    )?;

    // Retrieval script (spans on the presence-filtered timeline) and
    // ground-truth annotations (spans in original recording seconds).
    let command = "grasp the marker".to_string();
    let min_gap = 3;
    let filtered_pos = |t: usize| -> usize {
        (0..t)
            .filter(|&f| {
                (CLIP_A.0..=CLIP_A.1).contains(&f) || (CLIP_B.0..=CLIP_B.1).contains(&f)
            })
            .count()
    };
    let filtered_span = |clip: (usize, usize)| -> [f64; 2] {
        [
            filtered_pos(clip.0) as f64 / FPS,
            filtered_pos(clip.1) as f64 / FPS,
        ]
    };
    let script_path = dir.join("vlm_script.json");
    write_json(
        &script_path,
        &json!({
            &command: {
                "spans": [filtered_span(CLIP_A), filtered_span(CLIP_B)],
                "heuristic": "grasp",
            }
        }),
    )?;

    let original_span =
        |clip: (usize, usize)| -> [f64; 2] { [clip.0 as f64 / FPS, clip.1 as f64 / FPS] };
    let annotations_path = dir.join("annotations.json");
    write_json(
        &annotations_path,
        &json!({ &command: [original_span(CLIP_A), original_span(CLIP_B)] }),
    )?;

    Ok(SynthScene {
        dir: dir.to_path_buf(),
        manifest_path,
        live_manifest_path,
        script_path,
        annotations_path,
        command,
        heuristic: HeuristicKind::Grasp,
        fps: FPS,
        keypoint_count,
        min_gap,
        clip_a_frames: CLIP_A,
        clip_b_frames: CLIP_B,
        demo_keypoints,
        live_keypoints,
        demo_to_live,
        demo_trajectory,
    })
}

//! Dense patch descriptors and the sparse keypoints distilled from them.
//!
//! Each frame of a recording carries a grid of patch descriptors produced
//! offline by a vision backbone (one row per image patch). The operations
//! here pick the descriptors most consistently re-identified across the
//! first frames of the retrieved clips, locate them in new frames, and lift
//! the resulting pixels into 3D with the frame's depth map.

mod file;

pub use file::{read_descriptor_grid, write_descriptor_grid, RXDG_MAGIC, RXDG_VERSION};
pub(crate) use file::has_rxdg_magic;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{unproject, CameraIntrinsics, DepthMap, GeometryError, Point3};

/// Default number of common descriptors kept per task.
pub const DEFAULT_KEYPOINT_COUNT: usize = 10;

/// Rows of a [`DescriptorSet`] must be unit length within this tolerance.
pub const NORMALIZATION_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DescriptorError {
    #[error("need at least 2 clip frames to vote on common descriptors, got {got}")]
    InsufficientFrames { got: usize },
    #[error("k = {k} exceeds the {available} patches available in the first frame")]
    KTooLarge { k: usize, available: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("descriptor dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("patch {patch} has zero-norm descriptor and cannot be normalized")]
    ZeroNormDescriptor { patch: usize },
    #[error("keypoint {index} at pixel ({u}, {v}) is outside the image")]
    PixelOutOfBounds { index: usize, u: f64, v: f64 },
    #[error("no valid depth within a 5x5 window for keypoints {indices:?}")]
    UnrepairableDepth { indices: Vec<usize> },
    #[error("invalid descriptor grid: {0}")]
    InvalidGrid(String),
    #[error("failed to read descriptor file: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad descriptor file magic: expected \"RXDG\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported descriptor file version {found}, expected {RXDG_VERSION}")]
    UnsupportedVersion { found: u32 },
    #[error("descriptor file truncated: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Dense patch descriptors for one frame: one row per patch, row-major over
/// the patch grid. The patch layout maps every row index back to the pixel
/// at that patch's center.
#[derive(Clone, Debug)]
pub struct DescriptorGrid {
    frame_id: usize,
    patch_rows: u32,
    patch_cols: u32,
    patch_size_px: u32,
    origin: (i32, i32),
    data: DMatrix<f64>,
}

impl DescriptorGrid {
    pub fn new(
        frame_id: usize,
        patch_rows: u32,
        patch_cols: u32,
        patch_size_px: u32,
        origin: (i32, i32),
        data: DMatrix<f64>,
    ) -> Result<Self, DescriptorError> {
        if patch_rows == 0 || patch_cols == 0 {
            return Err(DescriptorError::InvalidGrid("empty patch grid".into()));
        }
        if patch_size_px == 0 {
            return Err(DescriptorError::InvalidGrid("patch size must be positive".into()));
        }
        let expected = patch_rows as usize * patch_cols as usize;
        if data.nrows() != expected {
            return Err(DescriptorError::InvalidGrid(format!(
                "expected {} descriptor rows for a {}x{} grid, got {}",
                expected,
                patch_rows,
                patch_cols,
                data.nrows()
            )));
        }
        if data.ncols() == 0 {
            return Err(DescriptorError::InvalidGrid("descriptor dimension is zero".into()));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(DescriptorError::InvalidGrid("non-finite descriptor value".into()));
        }
        Ok(Self {
            frame_id,
            patch_rows,
            patch_cols,
            patch_size_px,
            origin,
            data,
        })
    }

    pub fn frame_id(&self) -> usize {
        self.frame_id
    }

    pub fn patch_rows(&self) -> u32 {
        self.patch_rows
    }

    pub fn patch_cols(&self) -> u32 {
        self.patch_cols
    }

    pub fn patch_size_px(&self) -> u32 {
        self.patch_size_px
    }

    pub fn origin(&self) -> (i32, i32) {
        self.origin
    }

    pub fn patch_count(&self) -> usize {
        self.data.nrows()
    }

    pub fn descriptor_dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    /// Pixel center of a patch: origin + (index in grid + half) * patch size.
    pub fn patch_center(&self, patch: usize) -> (f64, f64) {
        let r = patch / self.patch_cols as usize;
        let c = patch % self.patch_cols as usize;
        let size = self.patch_size_px as f64;
        (
            self.origin.0 as f64 + (c as f64 + 0.5) * size,
            self.origin.1 as f64 + (r as f64 + 0.5) * size,
        )
    }
}

/// Descriptors selected as common across clips, rows L2-normalized. Keeps
/// the provenance needed to audit a selection: the source frame and the
/// patch index each row came from, in rank order.
#[derive(Clone, Debug)]
pub struct DescriptorSet {
    data: DMatrix<f64>,
    source_frame_id: usize,
    source_patches: Vec<usize>,
}

impl DescriptorSet {
    pub fn new(
        data: DMatrix<f64>,
        source_frame_id: usize,
        source_patches: Vec<usize>,
    ) -> Result<Self, DescriptorError> {
        if data.nrows() != source_patches.len() || data.nrows() == 0 {
            return Err(DescriptorError::InvalidGrid(
                "descriptor set rows must match provenance entries and be non-empty".into(),
            ));
        }
        for (i, row) in data.row_iter().enumerate() {
            if (row.norm() - 1.0).abs() > NORMALIZATION_TOL {
                return Err(DescriptorError::ZeroNormDescriptor {
                    patch: source_patches[i],
                });
            }
        }
        Ok(Self {
            data,
            source_frame_id,
            source_patches,
        })
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn descriptor_dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn source_frame_id(&self) -> usize {
        self.source_frame_id
    }

    pub fn source_patches(&self) -> &[usize] {
        &self.source_patches
    }
}

/// K ordered 3D keypoints in one frame's camera coordinates. Order matches
/// the [`DescriptorSet`] the keypoints were located with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub frame_id: usize,
    pub points: Vec<Point3>,
}

impl KeypointSet {
    pub fn centroid(&self) -> nalgebra::Vector3<f64> {
        let mut sum = nalgebra::Vector3::zeros();
        for p in &self.points {
            sum += p.to_vector();
        }
        sum / self.points.len().max(1) as f64
    }
}

/// L2-normalizes each row; rows with (near-)zero norm are left at zero and
/// reported as false in the companion mask so they never match anything.
fn normalized_rows(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<bool>) {
    let mut out = m.clone();
    let mut ok = vec![false; m.nrows()];
    for i in 0..m.nrows() {
        let norm = m.row(i).norm();
        if norm > 1e-12 {
            for j in 0..m.ncols() {
                out[(i, j)] /= norm;
            }
            ok[i] = true;
        } else {
            for j in 0..m.ncols() {
                out[(i, j)] = 0.0;
            }
        }
    }
    (out, ok)
}

/// Index of the strict maximum in a slice, lowest index on ties.
fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best_i = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best_v = v;
            best_i = i;
        }
    }
    best_i
}

/// Votes for the `k` descriptors from the first clip's first frame that are
/// most consistently re-identified, by mutual nearest neighbor in cosine
/// similarity, in the first frames of the remaining clips.
///
/// Candidates are ranked by the number of frames in which they participate
/// in a mutual nearest-neighbor pair, with ties broken by mean similarity to
/// their per-frame nearest neighbors and then by lowest patch index. The
/// highest-ranked `k` are returned; the ranking ignores the order in which
/// frames 2..Z are given.
pub fn select_common_descriptors(
    first_frames: &[DescriptorGrid],
    k: usize,
) -> Result<DescriptorSet, DescriptorError> {
    if first_frames.len() < 2 {
        return Err(DescriptorError::InsufficientFrames {
            got: first_frames.len(),
        });
    }
    if k == 0 {
        return Err(DescriptorError::ZeroK);
    }
    let base = &first_frames[0];
    if k > base.patch_count() {
        return Err(DescriptorError::KTooLarge {
            k,
            available: base.patch_count(),
        });
    }
    for g in &first_frames[1..] {
        if g.descriptor_dim() != base.descriptor_dim() {
            return Err(DescriptorError::DimensionMismatch {
                expected: base.descriptor_dim(),
                got: g.descriptor_dim(),
            });
        }
    }

    let n = base.patch_count();
    let (base_norm, base_ok) = normalized_rows(base.data());
    let mut score = vec![0usize; n];
    let mut sim_sum = vec![0.0f64; n];

    for g in &first_frames[1..] {
        let (other_norm, other_ok) = normalized_rows(g.data());
        let sims = &base_norm * other_norm.transpose();

        // Per-column argmax over base rows, for the mutuality check.
        let mut col_best = vec![0usize; sims.ncols()];
        for c in 0..sims.ncols() {
            col_best[c] = argmax((0..sims.nrows()).map(|r| sims[(r, c)]));
        }

        for i in 0..n {
            let nn = argmax(sims.row(i).iter().copied());
            sim_sum[i] += sims[(i, nn)];
            if base_ok[i] && other_ok[nn] && col_best[nn] == i {
                score[i] += 1;
            }
        }
    }

    let frames_polled = (first_frames.len() - 1) as f64;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        score[b]
            .cmp(&score[a])
            .then_with(|| {
                (sim_sum[b] / frames_polled)
                    .partial_cmp(&(sim_sum[a] / frames_polled))
                    .expect("similarities are finite")
            })
            .then_with(|| a.cmp(&b))
    });

    let chosen = &order[..k];
    let mut data = DMatrix::zeros(k, base.descriptor_dim());
    for (row, &patch) in chosen.iter().enumerate() {
        if !base_ok[patch] {
            return Err(DescriptorError::ZeroNormDescriptor { patch });
        }
        data.set_row(row, &base_norm.row(patch));
    }
    DescriptorSet::new(data, base.frame_id(), chosen.to_vec())
}

/// Finds each set descriptor's best cosine match in the grid and returns the
/// matched patch centers, in set order. Ties resolve to the lowest patch
/// index, and scaling any grid row by a positive factor changes nothing.
pub fn locate_keypoints(
    set: &DescriptorSet,
    grid: &DescriptorGrid,
) -> Result<Vec<(f64, f64)>, DescriptorError> {
    if set.descriptor_dim() != grid.descriptor_dim() {
        return Err(DescriptorError::DimensionMismatch {
            expected: set.descriptor_dim(),
            got: grid.descriptor_dim(),
        });
    }
    let (grid_norm, _) = normalized_rows(grid.data());
    let sims = set.data() * grid_norm.transpose();
    Ok((0..set.len())
        .map(|i| grid.patch_center(argmax(sims.row(i).iter().copied())))
        .collect())
}

/// Search offsets for depth repair: a 5x5 window ordered by distance to the
/// center, ties scanned row-major. The center comes first.
fn repair_offsets() -> Vec<(i64, i64)> {
    let mut offsets: Vec<(i64, i64)> = (-2..=2)
        .flat_map(|dv| (-2..=2).map(move |du| (du, dv)))
        .collect();
    offsets.sort_by_key(|&(du, dv)| (du * du + dv * dv, dv, du));
    offsets
}

/// Lifts located pixels into 3D camera coordinates using the frame's depth.
///
/// Depth is sampled at the nearest integer pixel; a zero (invalid) reading
/// falls back to the nearest valid depth within a 5x5 window. Pixels whose
/// whole window is invalid are collected and reported together.
pub fn lift_keypoints(
    pixels: &[(f64, f64)],
    depth: &DepthMap,
    intrinsics: &CameraIntrinsics,
    frame_id: usize,
) -> Result<KeypointSet, DescriptorError> {
    let offsets = repair_offsets();
    let mut points = Vec::with_capacity(pixels.len());
    let mut failed = Vec::new();

    for (index, &(u, v)) in pixels.iter().enumerate() {
        if !intrinsics.contains(u, v) {
            return Err(DescriptorError::PixelOutOfBounds { index, u, v });
        }
        let (pu, pv) = (u.round() as i64, v.round() as i64);
        let d = offsets
            .iter()
            .find_map(|&(du, dv)| depth.valid_at(pu + du, pv + dv));
        match d {
            Some(d) => points.push(unproject((u, v), d, intrinsics)?),
            None => failed.push(index),
        }
    }

    if !failed.is_empty() {
        return Err(DescriptorError::UnrepairableDepth { indices: failed });
    }
    Ok(KeypointSet {
        frame_id,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_row(dim: usize, hot: usize) -> Vec<f64> {
        let mut row = vec![0.0; dim];
        row[hot % dim] = 1.0;
        row
    }

    fn grid_from_rows(frame_id: usize, rows: Vec<Vec<f64>>, cols: u32) -> DescriptorGrid {
        let dim = rows[0].len();
        let n = rows.len();
        let data = DMatrix::from_fn(n, dim, |r, c| rows[r][c]);
        let patch_rows = (n as u32) / cols;
        DescriptorGrid::new(frame_id, patch_rows, cols, 16, (0, 0), data).unwrap()
    }

    fn random_unit_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let mut row: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                row.iter_mut().for_each(|v| *v /= norm);
                row
            })
            .collect()
    }

    /// Brute-force mutual-NN commonality oracle: plain loops, no matrices.
    fn oracle_ranking(grids: &[&DescriptorGrid]) -> Vec<usize> {
        let dim = grids[0].descriptor_dim();
        let cos = |a: &DescriptorGrid, i: usize, b: &DescriptorGrid, j: usize| -> f64 {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for d in 0..dim {
                dot += a.data()[(i, d)] * b.data()[(j, d)];
                na += a.data()[(i, d)] * a.data()[(i, d)];
                nb += b.data()[(j, d)] * b.data()[(j, d)];
            }
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                dot / (na.sqrt() * nb.sqrt())
            }
        };
        let n0 = grids[0].patch_count();
        let mut score = vec![0usize; n0];
        let mut mean = vec![0.0f64; n0];
        for g in &grids[1..] {
            for i in 0..n0 {
                let mut best_j = 0;
                let mut best = f64::NEG_INFINITY;
                for j in 0..g.patch_count() {
                    let s = cos(grids[0], i, g, j);
                    if s > best {
                        best = s;
                        best_j = j;
                    }
                }
                mean[i] += best;
                let mut back = 0;
                let mut back_best = f64::NEG_INFINITY;
                for r in 0..n0 {
                    let s = cos(grids[0], r, g, best_j);
                    if s > back_best {
                        back_best = s;
                        back = r;
                    }
                }
                if back == i && best > 0.0 {
                    score[i] += 1;
                }
            }
        }
        let mut order: Vec<usize> = (0..n0).collect();
        order.sort_by(|&a, &b| {
            score[b]
                .cmp(&score[a])
                .then(mean[b].partial_cmp(&mean[a]).unwrap())
                .then(a.cmp(&b))
        });
        order
    }

    #[test]
    fn identical_grids_select_lowest_patch_indices() {
        let rows: Vec<Vec<f64>> = (0..8).map(|i| unit_row(8, i)).collect();
        let g1 = grid_from_rows(0, rows.clone(), 4);
        let g2 = grid_from_rows(5, rows, 4);
        let set = select_common_descriptors(&[g1, g2], 4).unwrap();
        assert_eq!(set.source_patches(), &[0, 1, 2, 3]);
        assert_eq!(set.source_frame_id(), 0);
    }

    #[test]
    fn planted_descriptors_beat_noise_and_match_the_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let dim = 24;
        let planted: Vec<Vec<f64>> = random_unit_rows(&mut rng, 3, dim);
        let mut grids = Vec::new();
        for z in 0..4 {
            let mut rows = random_unit_rows(&mut rng, 12, dim);
            // Plant the shared descriptors at different patches per frame.
            rows[2 + z] = planted[0].clone();
            rows[7] = planted[1].clone();
            rows[(5 + 2 * z) % 12] = planted[2].clone();
            grids.push(grid_from_rows(z * 10, rows, 4));
        }
        let set = select_common_descriptors(&grids, 3).unwrap();
        let mut got: Vec<usize> = set.source_patches().to_vec();
        let refs: Vec<&DescriptorGrid> = grids.iter().collect();
        let expect = &oracle_ranking(&refs)[..3];
        assert_eq!(got, expect);
        got.sort_unstable();
        assert_eq!(got, vec![2, 5, 7]); // planted positions in frame 0
    }

    #[test]
    fn ranking_matches_oracle_on_random_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        for _ in 0..5 {
            let grids: Vec<DescriptorGrid> = (0..3)
                .map(|z| grid_from_rows(z, random_unit_rows(&mut rng, 16, 12), 4))
                .collect();
            let set = select_common_descriptors(&grids, 16).unwrap();
            let refs: Vec<&DescriptorGrid> = grids.iter().collect();
            assert_eq!(set.source_patches(), &oracle_ranking(&refs)[..16]);
        }
    }

    #[test]
    fn selection_ignores_order_of_later_clips() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let grids: Vec<DescriptorGrid> = (0..4)
            .map(|z| grid_from_rows(z, random_unit_rows(&mut rng, 10, 16), 5))
            .collect();
        let a = select_common_descriptors(&grids, 5).unwrap();
        let permuted = vec![
            grids[0].clone(),
            grids[3].clone(),
            grids[1].clone(),
            grids[2].clone(),
        ];
        let b = select_common_descriptors(&permuted, 5).unwrap();
        assert_eq!(a.source_patches(), b.source_patches());
    }

    #[test]
    fn selection_input_validation() {
        let g = grid_from_rows(0, (0..4).map(|i| unit_row(4, i)).collect(), 2);
        assert!(matches!(
            select_common_descriptors(&[g.clone()], 2),
            Err(DescriptorError::InsufficientFrames { got: 1 })
        ));
        assert!(matches!(
            select_common_descriptors(&[g.clone(), g.clone()], 5),
            Err(DescriptorError::KTooLarge { k: 5, available: 4 })
        ));
        assert!(matches!(
            select_common_descriptors(&[g.clone(), g], 0),
            Err(DescriptorError::ZeroK)
        ));
    }

    #[test]
    fn locate_returns_patch_centers_with_lowest_index_ties() {
        // Grid rows 1 and 3 are identical; the set descriptor equals both, so
        // the match must land on patch 1.
        let rows = vec![
            unit_row(6, 0),
            unit_row(6, 2),
            unit_row(6, 4),
            unit_row(6, 2),
        ];
        let grid = grid_from_rows(3, rows, 2);
        let data = DMatrix::from_fn(1, 6, |_, c| if c == 2 { 1.0 } else { 0.0 });
        let set = DescriptorSet::new(data, 0, vec![9]).unwrap();
        let px = locate_keypoints(&set, &grid).unwrap();
        // Patch 1 of a 2-wide grid with 16 px patches: center (24, 8).
        assert_eq!(px, vec![(24.0, 8.0)]);
    }

    #[test]
    fn positive_scaling_never_changes_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let rows = random_unit_rows(&mut rng, 9, 10);
        let grid = grid_from_rows(0, rows.clone(), 3);
        let data = DMatrix::from_fn(2, 10, |r, c| rows[3 * r + 1][c]);
        let set = DescriptorSet::new(data, 0, vec![1, 4]).unwrap();
        let before = locate_keypoints(&set, &grid).unwrap();

        let scaled_rows: Vec<Vec<f64>> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| r.iter().map(|v| v * (1.0 + i as f64 * 7.5)).collect())
            .collect();
        let scaled = grid_from_rows(0, scaled_rows, 3);
        assert_eq!(locate_keypoints(&set, &scaled).unwrap(), before);
    }

    #[test]
    fn lift_uses_nearest_valid_depth_within_window() {
        let k = CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0, 640, 480).unwrap();
        let mut depth = DepthMap::constant(640, 480, 0.0);
        depth.set(101, 200, 0.5); // radius-1 neighbor of (100, 200)
        let set = lift_keypoints(&[(100.0, 200.0)], &depth, &k, 0).unwrap();
        let expect = unproject((100.0, 200.0), 0.5, &k).unwrap();
        assert_eq!(set.points[0], expect);
    }

    #[test]
    fn lift_prefers_closer_valid_depth() {
        let k = CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0, 640, 480).unwrap();
        let mut depth = DepthMap::constant(640, 480, 0.0);
        depth.set(102, 200, 0.9); // distance 2
        depth.set(100, 201, 0.5); // distance 1: wins
        let set = lift_keypoints(&[(100.0, 200.0)], &depth, &k, 0).unwrap();
        assert_eq!(set.points[0].z, 0.5);
    }

    #[test]
    fn lift_reports_every_unrepairable_pixel() {
        let k = CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0, 640, 480).unwrap();
        let mut depth = DepthMap::constant(640, 480, 0.0);
        depth.set(50, 50, 0.7);
        let err = lift_keypoints(&[(50.0, 50.0), (300.0, 300.0), (400.0, 10.0)], &depth, &k, 0)
            .unwrap_err();
        match err {
            DescriptorError::UnrepairableDepth { indices } => assert_eq!(indices, vec![1, 2]),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn lift_rejects_out_of_bounds_pixels() {
        let k = CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0, 640, 480).unwrap();
        let depth = DepthMap::constant(640, 480, 1.0);
        assert!(matches!(
            lift_keypoints(&[(640.0, 0.0)], &depth, &k, 0),
            Err(DescriptorError::PixelOutOfBounds { index: 0, .. })
        ));
    }

    #[test]
    fn lifted_points_round_trip_through_projection() {
        let k = CameraIntrinsics::new(580.0, 590.0, 310.0, 250.0, 640, 480).unwrap();
        let depth = DepthMap::constant(640, 480, 1.25);
        let pixels = vec![(8.0, 8.0), (317.5, 251.5), (600.0, 400.0)];
        let set = lift_keypoints(&pixels, &depth, &k, 2).unwrap();
        for (p, (u, v)) in set.points.iter().zip(pixels.iter()) {
            let (pu, pv) = crate::geometry::project(*p, &k).unwrap();
            assert!((pu - u).abs() < 1e-9 && (pv - v).abs() < 1e-9);
        }
    }
}

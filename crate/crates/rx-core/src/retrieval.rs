//! Clip retrieval from long recordings, and its evaluation.
//!
//! A recording is a long egocentric video with per-frame assets on disk
//! (RGB, depth, patch descriptors, hand detections, static masks, point
//! tracks), described by a JSON manifest. Given a language command, a
//! pluggable VLM client proposes clip spans showing that task; this module
//! validates and merges those spans, picks the retargeting heuristic for
//! the command, filters the recording down to hand-present segments, and
//! scores retrieval quality against ground-truth annotations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptors::has_rxdg_magic;
use crate::geometry::CameraIntrinsics;
use crate::gripper::HeuristicKind;
use crate::hands::{filter_hand_frames, PresenceTimeline};
use crate::transport::{post_json, HttpConfig, TransportError};

/// Depth PNGs store `depth_scale` integer units per meter unless the
/// manifest overrides it (1000 = millimeters).
pub const DEFAULT_DEPTH_SCALE: f64 = 1000.0;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("failed to read manifest: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid manifest: {0}")]
    BadManifest(String),
    #[error("referenced asset does not exist: {path}")]
    MissingAsset { path: PathBuf },
    #[error("descriptor file is corrupt (bad magic): {path}")]
    CorruptDescriptor { path: PathBuf },
    #[error("asset is not a PNG file: {path}")]
    NotAPng { path: PathBuf },
    #[error("invalid clip span [{start_s}, {end_s}]")]
    BadSpan { start_s: f64, end_s: f64 },
    #[error("command text must be nonempty")]
    EmptyCommand,
    #[error("retrieval produced no usable clip spans")]
    EmptyRetrieval,
    #[error("match tolerance must be finite and nonnegative, got {got}")]
    BadTolerance { got: f64 },
    #[error("presence timeline covers {got} frames, recording has {expected}")]
    TimelineMismatch { expected: usize, got: usize },
    #[error("unknown heuristic {0:?}")]
    UnknownHeuristic(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}

/// A retrieved sub-interval of a recording, in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 2]", try_from = "[f64; 2]")]
pub struct ClipSpan {
    start_s: f64,
    end_s: f64,
}

impl From<ClipSpan> for [f64; 2] {
    fn from(s: ClipSpan) -> Self {
        [s.start_s, s.end_s]
    }
}

impl TryFrom<[f64; 2]> for ClipSpan {
    type Error = RetrievalError;
    fn try_from(v: [f64; 2]) -> Result<Self, RetrievalError> {
        ClipSpan::new(v[0], v[1])
    }
}

impl ClipSpan {
    pub fn new(start_s: f64, end_s: f64) -> Result<Self, RetrievalError> {
        if !(start_s.is_finite() && end_s.is_finite() && start_s >= 0.0 && start_s < end_s) {
            return Err(RetrievalError::BadSpan { start_s, end_s });
        }
        Ok(Self { start_s, end_s })
    }

    pub fn start_s(&self) -> f64 {
        self.start_s
    }

    pub fn end_s(&self) -> f64 {
        self.end_s
    }

    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }

    /// Indices of the frames whose timestamps fall inside the span
    /// (inclusive), clamped to `frame_count`. Empty when the span covers no
    /// frame timestamp.
    pub fn frame_indices(&self, fps: f64, frame_count: usize) -> Vec<usize> {
        if frame_count == 0 {
            return Vec::new();
        }
        // The epsilon absorbs float fuzz so a span endpoint that equals a
        // frame timestamp includes that frame.
        let first = ((self.start_s * fps - 1e-9).ceil().max(0.0)) as usize;
        let last = (self.end_s * fps + 1e-9).floor() as usize;
        let last = last.min(frame_count - 1);
        (first..=last.max(first)).filter(|i| *i <= last).collect()
    }
}

/// A natural-language task request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Command {
    text: String,
}

impl Command {
    pub fn new(text: impl Into<String>) -> Result<Self, RetrievalError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(RetrievalError::EmptyCommand);
        }
        Ok(Self { text })
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

/// Per-frame asset paths, resolved to absolute paths at load.
#[derive(Clone, Debug)]
pub struct FrameAssets {
    pub t: usize,
    pub rgb: PathBuf,
    pub depth: PathBuf,
    pub descriptors: PathBuf,
    pub hands: PathBuf,
    pub mask: PathBuf,
    pub tracks: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct FrameAssetsDto {
    t: usize,
    rgb: String,
    depth: String,
    descriptors: String,
    hands: String,
    mask: String,
    tracks: String,
}

#[derive(Serialize, Deserialize)]
struct ManifestDto {
    recording_id: String,
    fps: f64,
    #[serde(default)]
    depth_scale: Option<f64>,
    intrinsics: CameraIntrinsics,
    frames: Vec<FrameAssetsDto>,
}

/// A fully indexed recording: intrinsics, frame rate, and validated
/// per-frame asset paths.
#[derive(Clone, Debug)]
pub struct Recording {
    recording_id: String,
    fps: f64,
    depth_scale: f64,
    intrinsics: CameraIntrinsics,
    frames: Vec<FrameAssets>,
}

const PNG_MAGIC: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A];

fn has_png_magic(path: &Path) -> Result<bool, std::io::Error> {
    use std::io::Read;
    let mut head = [0u8; 8];
    let mut file = std::fs::File::open(path)?;
    match file.read_exact(&mut head) {
        Ok(()) => Ok(head == PNG_MAGIC),
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Ok(false),
        Err(e) => Err(e),
    }
}

impl Recording {
    /// Loads and validates a manifest: the schema must parse, frame indices
    /// must be contiguous from 0, every referenced asset must exist, PNGs
    /// must carry the PNG signature and descriptor files the descriptor-grid
    /// magic. Relative asset paths resolve against the manifest's directory.
    pub fn load(manifest_path: &Path) -> Result<Self, RetrievalError> {
        let text = std::fs::read_to_string(manifest_path)?;
        let dto: ManifestDto = serde_json::from_str(&text)?;
        if !(dto.fps.is_finite() && dto.fps > 0.0) {
            return Err(RetrievalError::BadManifest(format!(
                "fps must be positive, got {}",
                dto.fps
            )));
        }
        let depth_scale = dto.depth_scale.unwrap_or(DEFAULT_DEPTH_SCALE);
        if !(depth_scale.is_finite() && depth_scale > 0.0) {
            return Err(RetrievalError::BadManifest(format!(
                "depth_scale must be positive, got {depth_scale}"
            )));
        }
        if dto.frames.is_empty() {
            return Err(RetrievalError::BadManifest("no frames".into()));
        }
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let mut frames = Vec::with_capacity(dto.frames.len());
        for (i, f) in dto.frames.iter().enumerate() {
            if f.t != i {
                return Err(RetrievalError::BadManifest(format!(
                    "frame indices must be contiguous from 0: entry {i} has t={}",
                    f.t
                )));
            }
            let resolve = |rel: &str| -> Result<PathBuf, RetrievalError> {
                let path = root.join(rel);
                if !path.is_file() {
                    return Err(RetrievalError::MissingAsset { path });
                }
                Ok(path)
            };
            let assets = FrameAssets {
                t: f.t,
                rgb: resolve(&f.rgb)?,
                depth: resolve(&f.depth)?,
                descriptors: resolve(&f.descriptors)?,
                hands: resolve(&f.hands)?,
                mask: resolve(&f.mask)?,
                tracks: resolve(&f.tracks)?,
            };
            for png in [&assets.rgb, &assets.depth, &assets.mask] {
                if !has_png_magic(png)? {
                    return Err(RetrievalError::NotAPng { path: png.clone() });
                }
            }
            if !has_rxdg_magic(&assets.descriptors)? {
                return Err(RetrievalError::CorruptDescriptor {
                    path: assets.descriptors.clone(),
                });
            }
            frames.push(assets);
        }
        Ok(Self {
            recording_id: dto.recording_id,
            fps: dto.fps,
            depth_scale,
            intrinsics: dto.intrinsics,
            frames,
        })
    }

    pub fn recording_id(&self) -> &str {
        &self.recording_id
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    /// Depth PNG units per meter.
    pub fn depth_scale(&self) -> f64 {
        self.depth_scale
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intrinsics
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn duration_s(&self) -> f64 {
        self.frames.len() as f64 / self.fps
    }

    pub fn frame(&self, t: usize) -> Option<&FrameAssets> {
        self.frames.get(t)
    }

    /// The recording-level hand file (every frame references the same one).
    pub fn hand_file(&self) -> &Path {
        &self.frames[0].hands
    }

    /// The recording-level track file.
    pub fn track_file(&self) -> &Path {
        &self.frames[0].tracks
    }

    pub fn summary(&self) -> RecordingSummary {
        RecordingSummary {
            recording_id: self.recording_id.clone(),
            fps: self.fps,
            duration_s: self.duration_s(),
        }
    }
}

/// What a VLM client gets to see about a recording: identity and timeline,
/// not pixels (media transfer is the live service's concern).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecordingSummary {
    pub recording_id: String,
    pub fps: f64,
    pub duration_s: f64,
}

/// A retrieval/classification service. Implementations state whether equal
/// inputs always produce equal outputs.
pub trait VlmClient {
    fn retrieve(
        &self,
        recording: &RecordingSummary,
        command: &Command,
    ) -> Result<Vec<ClipSpan>, RetrievalError>;
    fn classify_heuristic(&self, command: &Command) -> Result<HeuristicKind, RetrievalError>;
    fn is_deterministic(&self) -> bool;
    fn name(&self) -> &'static str;
}

/// Keyword fallback used when a script entry does not pin a heuristic.
fn heuristic_from_keywords(text: &str) -> HeuristicKind {
    let lower = text.to_lowercase();
    if lower.contains("press") || lower.contains("turn on") {
        HeuristicKind::Press
    } else if lower.contains("push") || lower.contains("close") {
        HeuristicKind::Push
    } else {
        HeuristicKind::Grasp
    }
}

#[derive(Deserialize)]
struct ScriptEntryDto {
    spans: Vec<[f64; 2]>,
    #[serde(default)]
    heuristic: Option<String>,
}

#[derive(Clone, Debug)]
struct ScriptEntry {
    spans: Vec<ClipSpan>,
    heuristic: Option<HeuristicKind>,
}

/// Deterministic mock client driven by a JSON file mapping command text to
/// spans (and optionally a heuristic). Commands missing from the script
/// retrieve nothing.
#[derive(Clone, Debug, Default)]
pub struct ScriptedVlm {
    entries: BTreeMap<String, ScriptEntry>,
}

impl ScriptedVlm {
    pub fn from_json(text: &str) -> Result<Self, RetrievalError> {
        let dto: BTreeMap<String, ScriptEntryDto> = serde_json::from_str(text)?;
        let mut entries = BTreeMap::new();
        for (command, entry) in dto {
            let spans = entry
                .spans
                .into_iter()
                .map(ClipSpan::try_from)
                .collect::<Result<Vec<_>, _>>()?;
            let heuristic = entry
                .heuristic
                .map(|h| {
                    h.parse::<HeuristicKind>()
                        .map_err(RetrievalError::UnknownHeuristic)
                })
                .transpose()?;
            entries.insert(command, ScriptEntry { spans, heuristic });
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl VlmClient for ScriptedVlm {
    fn retrieve(
        &self,
        _recording: &RecordingSummary,
        command: &Command,
    ) -> Result<Vec<ClipSpan>, RetrievalError> {
        Ok(self
            .entries
            .get(command.text())
            .map(|e| e.spans.clone())
            .unwrap_or_default())
    }

    fn classify_heuristic(&self, command: &Command) -> Result<HeuristicKind, RetrievalError> {
        Ok(self
            .entries
            .get(command.text())
            .and_then(|e| e.heuristic)
            .unwrap_or_else(|| heuristic_from_keywords(command.text())))
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn name(&self) -> &'static str {
        "scripted"
    }
}

#[derive(Serialize)]
struct RetrieveRequest<'a> {
    recording_id: &'a str,
    fps: f64,
    duration_s: f64,
    command: &'a str,
}

#[derive(Deserialize)]
struct RetrieveResponse {
    spans: Vec<[f64; 2]>,
}

#[derive(Serialize)]
struct ClassifyRequest<'a> {
    command: &'a str,
}

#[derive(Deserialize)]
struct ClassifyResponse {
    heuristic: String,
}

/// Client for a remote VLM service exposing `/retrieve` and `/classify`.
#[derive(Clone, Debug)]
pub struct LiveVlm {
    http: HttpConfig,
}

impl LiveVlm {
    pub fn new(http: HttpConfig) -> Self {
        Self { http }
    }
}

impl VlmClient for LiveVlm {
    fn retrieve(
        &self,
        recording: &RecordingSummary,
        command: &Command,
    ) -> Result<Vec<ClipSpan>, RetrievalError> {
        let request = RetrieveRequest {
            recording_id: &recording.recording_id,
            fps: recording.fps,
            duration_s: recording.duration_s,
            command: command.text(),
        };
        let response: RetrieveResponse = post_json(&self.http, "/retrieve", &request)?;
        response
            .spans
            .into_iter()
            .map(ClipSpan::try_from)
            .collect()
    }

    fn classify_heuristic(&self, command: &Command) -> Result<HeuristicKind, RetrievalError> {
        let request = ClassifyRequest {
            command: command.text(),
        };
        let response: ClassifyResponse = post_json(&self.http, "/classify", &request)?;
        response
            .heuristic
            .parse::<HeuristicKind>()
            .map_err(RetrievalError::UnknownHeuristic)
    }

    fn is_deterministic(&self) -> bool {
        false
    }

    fn name(&self) -> &'static str {
        "live"
    }
}

/// Clamps spans to the recording, drops empty ones, sorts by start, and
/// merges overlapping or touching spans.
fn sanitize_spans(spans: Vec<ClipSpan>, duration_s: f64) -> Vec<ClipSpan> {
    let mut clamped: Vec<ClipSpan> = spans
        .into_iter()
        .filter_map(|s| {
            let start = s.start_s.max(0.0);
            let end = s.end_s.min(duration_s);
            ClipSpan::new(start, end).ok()
        })
        .collect();
    clamped.sort_by(|a, b| {
        a.start_s
            .partial_cmp(&b.start_s)
            .expect("span endpoints are finite")
    });
    let mut merged: Vec<ClipSpan> = Vec::with_capacity(clamped.len());
    for span in clamped {
        match merged.last_mut() {
            Some(last) if span.start_s <= last.end_s => last.end_s = last.end_s.max(span.end_s),
            _ => merged.push(span),
        }
    }
    merged
}

/// Asks the client for clip spans and cleans them up; failing to produce at
/// least one usable span is an error.
pub fn retrieve_clips(
    client: &dyn VlmClient,
    recording: &RecordingSummary,
    command: &Command,
) -> Result<Vec<ClipSpan>, RetrievalError> {
    let raw = client.retrieve(recording, command)?;
    let spans = sanitize_spans(raw, recording.duration_s);
    if spans.is_empty() {
        return Err(RetrievalError::EmptyRetrieval);
    }
    Ok(spans)
}

/// Which retargeting heuristic the command calls for.
pub fn select_heuristic(
    client: &dyn VlmClient,
    command: &Command,
) -> Result<HeuristicKind, RetrievalError> {
    client.classify_heuristic(command)
}

/// Precision/recall of predicted spans against ground truth. A metric whose
/// denominator is zero is `None` rather than NaN.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScore {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub matches: usize,
}

/// One-to-one matching of predicted spans against ground truth: a pair is
/// compatible when both endpoints differ by at most `tolerance_s` (exactly
/// the tolerance still matches). The count is a maximum bipartite matching
/// (augmenting paths), so overlapping candidates never cost a match that a
/// better assignment would have found.
pub fn evaluate_retrieval(
    predicted: &[ClipSpan],
    ground_truth: &[ClipSpan],
    tolerance_s: f64,
) -> Result<RetrievalScore, RetrievalError> {
    if !(tolerance_s.is_finite() && tolerance_s >= 0.0) {
        return Err(RetrievalError::BadTolerance { got: tolerance_s });
    }
    let compatible: Vec<Vec<usize>> = predicted
        .iter()
        .map(|p| {
            ground_truth
                .iter()
                .enumerate()
                .filter(|(_, g)| {
                    (p.start_s - g.start_s).abs() <= tolerance_s
                        && (p.end_s - g.end_s).abs() <= tolerance_s
                })
                .map(|(i, _)| i)
                .collect()
        })
        .collect();

    fn augment(
        p: usize,
        compatible: &[Vec<usize>],
        visited: &mut [bool],
        owner: &mut [Option<usize>],
    ) -> bool {
        for &g in &compatible[p] {
            if !visited[g] {
                visited[g] = true;
                if owner[g].is_none() || augment(owner[g].unwrap(), compatible, visited, owner) {
                    owner[g] = Some(p);
                    return true;
                }
            }
        }
        false
    }

    let mut owner = vec![None; ground_truth.len()];
    let matches = (0..predicted.len())
        .filter(|&p| {
            let mut visited = vec![false; ground_truth.len()];
            augment(p, &compatible, &mut visited, &mut owner)
        })
        .count();

    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Ok(RetrievalScore {
        precision: ratio(matches, predicted.len()),
        recall: ratio(matches, ground_truth.len()),
        matches,
    })
}

/// Ground-truth annotations: task text to the spans demonstrating it.
pub fn load_annotations(path: &Path) -> Result<BTreeMap<String, Vec<ClipSpan>>, RetrievalError> {
    let text = std::fs::read_to_string(path)?;
    let dto: BTreeMap<String, Vec<[f64; 2]>> = serde_json::from_str(&text)?;
    dto.into_iter()
        .map(|(task, spans)| {
            let spans = spans
                .into_iter()
                .map(ClipSpan::try_from)
                .collect::<Result<Vec<_>, _>>()?;
            Ok((task, spans))
        })
        .collect()
}

/// A view of a recording restricted to hand-present intervals, with the
/// filtered frames renumbered contiguously. Retrieval runs on this shorter
/// timeline; the view converts times and frame indices back to the original
/// recording.
#[derive(Clone, Debug)]
pub struct FilteredRecording {
    recording_id: String,
    fps: f64,
    original_frame_count: usize,
    /// Original index of each filtered frame, ascending.
    frame_map: Vec<usize>,
    /// The hand-present intervals (original indices) the view was built from.
    intervals: Vec<(usize, usize)>,
}

impl FilteredRecording {
    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn frame_count(&self) -> usize {
        self.frame_map.len()
    }

    pub fn duration_s(&self) -> f64 {
        self.frame_map.len() as f64 / self.fps
    }

    pub fn intervals(&self) -> &[(usize, usize)] {
        &self.intervals
    }

    pub fn is_identity(&self) -> bool {
        self.frame_map.len() == self.original_frame_count
    }

    pub fn summary(&self) -> RecordingSummary {
        RecordingSummary {
            recording_id: self.recording_id.clone(),
            fps: self.fps,
            duration_s: self.duration_s(),
        }
    }

    /// Original frame index of filtered frame `i`.
    pub fn original_frame(&self, i: usize) -> Option<usize> {
        self.frame_map.get(i).copied()
    }

    /// Maps a time on the filtered timeline to the original timeline.
    /// Defined on [0, filtered duration]; `None` outside it or on an empty
    /// view. Within filtered frame i's interval the map is linear, so times
    /// keep their sub-frame phase.
    pub fn filtered_to_original_s(&self, t_filtered: f64) -> Option<f64> {
        let n = self.frame_map.len();
        if n == 0 || !t_filtered.is_finite() || t_filtered < 0.0 {
            return None;
        }
        let phi = t_filtered * self.fps;
        if phi > n as f64 + 1e-9 {
            return None;
        }
        let i = (phi.floor() as usize).min(n - 1);
        let frac = phi - i as f64;
        Some((self.frame_map[i] as f64 + frac) / self.fps)
    }

    /// Maps an original-timeline time into the filtered timeline; `None`
    /// when the time falls in a filtered-out gap.
    pub fn original_to_filtered_s(&self, t_original: f64) -> Option<f64> {
        if !t_original.is_finite() || t_original < 0.0 {
            return None;
        }
        let psi = t_original * self.fps;
        let j = (psi.floor() as usize).min(self.original_frame_count.saturating_sub(1));
        let i = self.frame_map.binary_search(&j).ok()?;
        Some((i as f64 + (psi - j as f64)) / self.fps)
    }

    /// Original frame indices covered by a span on the filtered timeline.
    pub fn original_frames_for_span(&self, span: &ClipSpan) -> Vec<usize> {
        span.frame_indices(self.fps, self.frame_map.len())
            .into_iter()
            .map(|i| self.frame_map[i])
            .collect()
    }

    /// Re-expresses a filtered-timeline span in original-recording seconds.
    pub fn original_span(&self, span: &ClipSpan) -> Option<ClipSpan> {
        let start = self.filtered_to_original_s(span.start_s)?;
        let end = self.filtered_to_original_s(span.end_s)?;
        ClipSpan::new(start, end).ok()
    }
}

/// Restricts a recording to its hand-present intervals (gaps shorter than
/// `min_gap` frames are bridged, matching [`filter_hand_frames`]).
pub fn segment_by_presence(
    recording: &Recording,
    timeline: &PresenceTimeline,
    min_gap: usize,
) -> Result<FilteredRecording, RetrievalError> {
    if timeline.len() != recording.frame_count() {
        return Err(RetrievalError::TimelineMismatch {
            expected: recording.frame_count(),
            got: timeline.len(),
        });
    }
    let intervals = filter_hand_frames(timeline, min_gap);
    let frame_map = intervals
        .iter()
        .flat_map(|&(s, e)| s..=e)
        .collect::<Vec<usize>>();
    Ok(FilteredRecording {
        recording_id: recording.recording_id().to_string(),
        fps: recording.fps(),
        original_frame_count: recording.frame_count(),
        frame_map,
        intervals,
    })
}

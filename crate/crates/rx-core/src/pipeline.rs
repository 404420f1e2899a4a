//! End-to-end orchestration: ingest a recording, retrieve clips for a
//! command, preprocess them into keypoint/hand context, generate a live
//! trajectory, and retarget it to gripper poses.
//!
//! [`execute_command`] runs the stages in a fixed order and stores every
//! intermediate in the [`ExecutionResult`]:
//!
//! 1. segmentation: hand-presence filtering of the recording timeline
//! 2. retrieval: clip spans from the vision-language client (spans are on
//!    the filtered timeline and are mapped back to original frames here)
//! 3. preprocessing, per clip in span order: descriptor commonality voting
//!    across clip first frames, keypoint localization and depth lifting,
//!    camera stabilization, hand-trajectory assembly
//! 4. heuristic: grasp/press/push classification of the command
//! 5. generation: in-context trajectory synthesis for the live frame
//! 6. retargeting: hand joints to gripper poses
//!
//! A failing stage aborts the run but keeps everything the earlier stages
//! produced: the error carries the partial result, and the same record is
//! embedded in its `failure` field so exported JSON shows what happened.
//! Clips are processed sequentially in span order, which makes the merge
//! order (and therefore the exported JSON) deterministic.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{
    augment, generate_trajectory, heuristic_joint_subset, ContextError, ContextExample,
    GeneratedTrajectory, GenerationConfig, LlmApiBackend, NearestContextBackend, SequenceBackend,
};
use crate::descriptors::{
    lift_keypoints, locate_keypoints, read_descriptor_grid, select_common_descriptors,
    DescriptorError, DescriptorGrid, KeypointSet,
};
use crate::geometry::{DepthIoError, DepthMap, GeometryError, RobustParams};
use crate::gripper::{map_trajectory, GripperError, GripperModel, GripperTrajectory, HeuristicKind};
use crate::hands::{build_hand_trajectory, HandError, HandObservations, HandTrajectory};
use crate::retrieval::{
    retrieve_clips, segment_by_presence, select_heuristic, ClipSpan, Command, LiveVlm, Recording,
    RetrievalError, ScriptedVlm, VlmClient,
};
use crate::stabilization::{estimate_frame_poses, StabilizationError, TrackSet};
use crate::transport::HttpConfig;

/// Environment variables honored by [`PipelineConfig::apply_env`]. They
/// take precedence over both config-file values and CLI flags.
pub const ENV_SEED: &str = "RX_SEED";
pub const ENV_KEYPOINTS: &str = "RX_K";
pub const ENV_QUANTUM: &str = "RX_QUANTUM";
pub const ENV_BACKEND: &str = "RX_BACKEND";
pub const ENV_VLM_ENDPOINT: &str = "RX_VLM_ENDPOINT";
pub const ENV_LLM_ENDPOINT: &str = "RX_LLM_ENDPOINT";
pub const ENV_TOLERANCE: &str = "RX_TOLERANCE_S";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config file: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse config file: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("environment variable {var} has invalid value {value:?}: {reason}")]
    BadEnv {
        var: &'static str,
        value: String,
        reason: String,
    },
}

/// Which sequence model answers generation prompts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendChoice {
    /// Nearest-context rigid warp, fully offline.
    Baseline,
    /// Remote completion service at `llm_endpoint`.
    Llm,
}

impl std::str::FromStr for BackendChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "llm" => Ok(Self::Llm),
            other => Err(format!("unknown backend {other:?} (expected baseline|llm)")),
        }
    }
}

/// All pipeline tuning knobs. Sources are merged in increasing precedence:
/// defaults, then a TOML config file, then CLI flags, then environment
/// variables (see the `ENV_*` constants).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Keypoints to select per scene (K).
    pub keypoint_count: usize,
    /// Serialization grid pitch in meters.
    pub quantum: f64,
    /// Seed for every stochastic component (RANSAC, augmentation).
    pub seed: u64,
    /// Hand-absent gaps shorter than this many frames are bridged.
    pub min_gap: usize,
    /// Generated trajectories are truncated to this many steps.
    pub max_steps: usize,
    /// Extra generation attempts after a failed completion or parse.
    pub retries: u32,
    /// Augmentation translation range in meters (0 disables).
    pub translation_range: f64,
    /// Augmentation rotation range in radians (0 disables).
    pub rotation_range: f64,
    /// Retrieval evaluation tolerance in seconds.
    pub tolerance_s: f64,
    /// RANSAC inlier threshold in meters.
    pub inlier_threshold: f64,
    /// RANSAC iteration budget.
    pub ransac_iterations: usize,
    /// Optional gripper landmark file; the stock 85 mm parallel-jaw model
    /// when absent.
    pub gripper_model: Option<PathBuf>,
    pub backend: BackendChoice,
    /// Completion endpoint for the llm backend.
    pub llm_endpoint: Option<String>,
    /// Retrieval service endpoint; mutually exclusive with `vlm_script`.
    pub vlm_endpoint: Option<String>,
    /// Scripted retrieval file for offline runs.
    pub vlm_script: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            keypoint_count: 10,
            quantum: 0.001,
            seed: 0,
            min_gap: 3,
            max_steps: 40,
            retries: 2,
            translation_range: 0.0,
            rotation_range: 0.0,
            tolerance_s: 3.0,
            inlier_threshold: 0.01,
            ransac_iterations: 500,
            gripper_model: None,
            backend: BackendChoice::Baseline,
            llm_endpoint: None,
            vlm_endpoint: None,
            vlm_script: None,
        }
    }
}

/// Config-file schema: every key optional, unknown keys rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    keypoint_count: Option<usize>,
    quantum: Option<f64>,
    seed: Option<u64>,
    min_gap: Option<usize>,
    max_steps: Option<usize>,
    retries: Option<u32>,
    translation_range: Option<f64>,
    rotation_range: Option<f64>,
    tolerance_s: Option<f64>,
    inlier_threshold: Option<f64>,
    ransac_iterations: Option<usize>,
    gripper_model: Option<PathBuf>,
    backend: Option<BackendChoice>,
    llm_endpoint: Option<String>,
    vlm_endpoint: Option<String>,
    vlm_script: Option<PathBuf>,
}

macro_rules! merge_fields {
    ($file:expr, $cfg:expr, $($field:ident),+ $(,)?) => {
        $(if let Some(v) = $file.$field { $cfg.$field = v.into(); })+
    };
}

impl PipelineConfig {
    /// Applies a TOML config file on top of the current values.
    pub fn merge_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let file: ConfigFile = toml::from_str(&std::fs::read_to_string(path)?)?;
        merge_fields!(
            file,
            self,
            keypoint_count,
            quantum,
            seed,
            min_gap,
            max_steps,
            retries,
            translation_range,
            rotation_range,
            tolerance_s,
            inlier_threshold,
            ransac_iterations,
            backend,
        );
        // Path and endpoint fields stay Option-valued in the config itself.
        if file.gripper_model.is_some() {
            self.gripper_model = file.gripper_model;
        }
        if file.llm_endpoint.is_some() {
            self.llm_endpoint = file.llm_endpoint;
        }
        if file.vlm_endpoint.is_some() {
            self.vlm_endpoint = file.vlm_endpoint;
        }
        if file.vlm_script.is_some() {
            self.vlm_script = file.vlm_script;
        }
        Ok(())
    }

    /// Applies `RX_*` environment variables, the highest-precedence source.
    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(
            var: &'static str,
            cell: &mut T,
        ) -> Result<(), ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            if let Ok(value) = std::env::var(var) {
                *cell = value.parse().map_err(|e: T::Err| ConfigError::BadEnv {
                    var,
                    value,
                    reason: e.to_string(),
                })?;
            }
            Ok(())
        }
        parse(ENV_SEED, &mut self.seed)?;
        parse(ENV_KEYPOINTS, &mut self.keypoint_count)?;
        parse(ENV_QUANTUM, &mut self.quantum)?;
        parse(ENV_TOLERANCE, &mut self.tolerance_s)?;
        parse(ENV_BACKEND, &mut self.backend)?;
        if let Ok(value) = std::env::var(ENV_VLM_ENDPOINT) {
            self.vlm_endpoint = Some(value);
        }
        if let Ok(value) = std::env::var(ENV_LLM_ENDPOINT) {
            self.llm_endpoint = Some(value);
        }
        Ok(())
    }

    /// Rejects out-of-range parameters before any stage runs.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        if self.keypoint_count < 3 {
            return bad(format!(
                "keypoint_count must be at least 3 (rigid alignment needs 3 points), got {}",
                self.keypoint_count
            ));
        }
        if !(self.quantum.is_finite() && self.quantum > 0.0) {
            return bad(format!("quantum must be positive, got {}", self.quantum));
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1".into());
        }
        if !(self.tolerance_s.is_finite() && self.tolerance_s >= 0.0) {
            return bad(format!(
                "tolerance_s must be nonnegative, got {}",
                self.tolerance_s
            ));
        }
        if !(self.inlier_threshold.is_finite() && self.inlier_threshold > 0.0) {
            return bad(format!(
                "inlier_threshold must be positive, got {}",
                self.inlier_threshold
            ));
        }
        if self.ransac_iterations == 0 {
            return bad("ransac_iterations must be at least 1".into());
        }
        for (name, range) in [
            ("translation_range", self.translation_range),
            ("rotation_range", self.rotation_range),
        ] {
            if !(range.is_finite() && range >= 0.0) {
                return bad(format!("{name} must be nonnegative, got {range}"));
            }
        }
        if self.backend == BackendChoice::Llm && self.llm_endpoint.is_none() {
            return bad("backend \"llm\" requires llm_endpoint".into());
        }
        if self.vlm_script.is_some() && self.vlm_endpoint.is_some() {
            return bad("vlm_script and vlm_endpoint are mutually exclusive".into());
        }
        Ok(())
    }

    /// The RANSAC parameters this configuration implies, for callers running
    /// stabilization outside the full pipeline.
    pub fn robust_params(&self) -> RobustParams {
        RobustParams {
            inlier_threshold: self.inlier_threshold,
            max_iterations: self.ransac_iterations,
            seed: self.seed,
        }
    }

    fn generation(&self) -> GenerationConfig {
        GenerationConfig {
            quantum: self.quantum,
            retries: self.retries,
            max_steps: self.max_steps,
        }
    }

    /// Builds the retrieval client this config selects.
    pub fn vlm_client(&self) -> Result<Box<dyn VlmClient>, ConfigError> {
        match (&self.vlm_script, &self.vlm_endpoint) {
            (Some(path), None) => Ok(Box::new(ScriptedVlm::load(path).map_err(|e| {
                ConfigError::Invalid(format!("failed to load vlm_script: {e}"))
            })?)),
            (None, Some(endpoint)) => Ok(Box::new(LiveVlm::new(HttpConfig::new(endpoint)))),
            (None, None) => Err(ConfigError::Invalid(
                "no retrieval client configured: set vlm_script or vlm_endpoint".into(),
            )),
            (Some(_), Some(_)) => Err(ConfigError::Invalid(
                "vlm_script and vlm_endpoint are mutually exclusive".into(),
            )),
        }
    }

    /// Builds the generation backend this config selects.
    pub fn sequence_backend(&self) -> Result<Box<dyn SequenceBackend>, ConfigError> {
        match self.backend {
            BackendChoice::Baseline => Ok(Box::new(NearestContextBackend)),
            BackendChoice::Llm => {
                let endpoint = self.llm_endpoint.as_deref().ok_or_else(|| {
                    ConfigError::Invalid("backend \"llm\" requires llm_endpoint".into())
                })?;
                Ok(Box::new(LlmApiBackend::new(HttpConfig::new(endpoint))))
            }
        }
    }

    fn gripper(&self) -> Result<GripperModel, GripperError> {
        match &self.gripper_model {
            Some(path) => GripperModel::load(path),
            None => Ok(GripperModel::default_2f85()),
        }
    }
}

/// Pipeline stages, in execution order. Failure records carry one of these.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Segmentation,
    Retrieval,
    Preprocessing,
    Heuristic,
    Generation,
    Retargeting,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Stage::Segmentation => "segmentation",
            Stage::Retrieval => "retrieval",
            Stage::Preprocessing => "preprocessing",
            Stage::Heuristic => "heuristic",
            Stage::Generation => "generation",
            Stage::Retargeting => "retargeting",
        };
        f.write_str(name)
    }
}

/// The error a stage raised, preserving the module-level type.
#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Hand(#[from] HandError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error(transparent)]
    Stabilization(#[from] StabilizationError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Gripper(#[from] GripperError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Depth(#[from] DepthIoError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl StageError {
    /// True when the underlying cause is a transport failure (retryable
    /// service trouble rather than bad data); the CLI maps this to its own
    /// exit code.
    pub fn is_transport(&self) -> bool {
        matches!(
            self,
            StageError::Retrieval(RetrievalError::Transport(_))
                | StageError::Context(ContextError::Transport(_))
        )
    }
}

/// A stage failure carrying everything the earlier stages produced. The
/// same record is embedded in `partial.failure`.
#[derive(Debug, Error)]
#[error("{stage} stage failed: {source}")]
pub struct StageFailure {
    pub stage: Stage,
    #[source]
    pub source: StageError,
    pub partial: Box<ExecutionResult>,
}

/// Serializable summary of a failure, embedded in exported results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub stage: Stage,
    pub message: String,
}

/// One retrieved clip's preprocessed context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipContext {
    pub clip_id: String,
    /// Span in original recording seconds.
    pub span: ClipSpan,
    /// Original frame indices the clip covers.
    pub frames: Vec<usize>,
    /// Keypoints in the clip's first-frame camera coordinates.
    pub keypoints: KeypointSet,
    /// Stabilized hand trajectory in the same coordinates.
    pub trajectory: HandTrajectory,
    /// Original frames whose registration was flagged (pose inherited).
    pub flagged_frames: Vec<usize>,
}

/// Non-geometric run information. Timings are kept out of the serialized
/// form so identical runs export identical bytes; the CLI prints them to
/// stderr instead.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub vlm: String,
    pub backend: String,
    #[serde(skip)]
    pub timings_ms: Vec<(Stage, f64)>,
}

/// Every intermediate of one [`execute_command`] run. All stage outputs are
/// present on success; on failure the fields up to the failing stage are
/// kept and `failure` records what went wrong.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub command: String,
    pub recording_id: String,
    pub seed: u64,
    pub spans: Option<Vec<ClipSpan>>,
    pub clips: Option<Vec<ClipContext>>,
    pub heuristic: Option<HeuristicKind>,
    pub live_keypoints: Option<KeypointSet>,
    pub generated: Option<GeneratedTrajectory>,
    pub gripper: Option<GripperTrajectory>,
    pub failure: Option<FailureRecord>,
    pub diagnostics: Diagnostics,
}

impl ExecutionResult {
    fn empty(command: &Command, recording: &Recording, config: &PipelineConfig) -> Self {
        Self {
            command: command.text().to_string(),
            recording_id: recording.recording_id().to_string(),
            seed: config.seed,
            spans: None,
            clips: None,
            heuristic: None,
            live_keypoints: None,
            generated: None,
            gripper: None,
            failure: None,
            diagnostics: Diagnostics::default(),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.failure.is_none()
            && self.spans.is_some()
            && self.clips.is_some()
            && self.heuristic.is_some()
            && self.live_keypoints.is_some()
            && self.generated.is_some()
            && self.gripper.is_some()
    }

    pub fn to_json(&self) -> String {
        let mut text =
            serde_json::to_string_pretty(self).expect("execution result serializes");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, ExportError> {
        Ok(Self::from_json(&std::fs::read_to_string(path)?)?)
    }
}

/// The live observation: an RGB reference (kept for provenance, never
/// decoded), a depth map, and a descriptor grid.
#[derive(Clone, Debug)]
pub struct LiveFrame {
    pub rgb: PathBuf,
    pub depth: DepthMap,
    pub descriptors: DescriptorGrid,
}

impl LiveFrame {
    /// Loads the live frame from a single-frame recording manifest.
    pub fn load(manifest_path: &Path) -> Result<Self, RetrievalError> {
        let recording = Recording::load(manifest_path)?;
        if recording.frame_count() != 1 {
            return Err(RetrievalError::BadManifest(format!(
                "live manifest must contain exactly one frame, got {}",
                recording.frame_count()
            )));
        }
        let frame = recording.frame(0).expect("frame 0 exists");
        let depth = DepthMap::from_png(&frame.depth, recording.depth_scale())
            .map_err(|e| RetrievalError::BadManifest(format!("live depth: {e}")))?;
        let descriptors = read_descriptor_grid(&frame.descriptors, 0)
            .map_err(|e| RetrievalError::BadManifest(format!("live descriptors: {e}")))?;
        Ok(Self {
            rgb: frame.rgb.clone(),
            depth,
            descriptors,
        })
    }
}

/// Validates and indexes a recording manifest.
pub fn ingest(manifest_path: &Path) -> Result<Recording, RetrievalError> {
    Recording::load(manifest_path)
}

struct StageClock {
    timings: Vec<(Stage, f64)>,
    started: Instant,
}

impl StageClock {
    fn new() -> Self {
        Self {
            timings: Vec::new(),
            started: Instant::now(),
        }
    }

    fn lap(&mut self, stage: Stage) {
        let now = Instant::now();
        self.timings
            .push((stage, now.duration_since(self.started).as_secs_f64() * 1e3));
        self.started = now;
    }
}

/// Runs the full pipeline for one command against one recording and live
/// frame. Clients are built from the config; see [`execute_command_with`]
/// to inject them (tests use this to simulate failing services).
pub fn execute_command(
    recording: &Recording,
    live: &LiveFrame,
    command: &Command,
    config: &PipelineConfig,
) -> Result<ExecutionResult, StageFailure> {
    let bail = |e: ConfigError| StageFailure {
        stage: Stage::Retrieval,
        source: StageError::Retrieval(RetrievalError::BadManifest(e.to_string())),
        partial: Box::new(ExecutionResult::empty(command, recording, config)),
    };
    let vlm = config.vlm_client().map_err(bail)?;
    let backend = config.sequence_backend().map_err(bail)?;
    execute_command_with(recording, live, command, config, vlm.as_ref(), backend.as_ref())
}

/// [`execute_command`] with explicit retrieval and generation clients.
pub fn execute_command_with(
    recording: &Recording,
    live: &LiveFrame,
    command: &Command,
    config: &PipelineConfig,
    vlm: &dyn VlmClient,
    backend: &dyn SequenceBackend,
) -> Result<ExecutionResult, StageFailure> {
    let mut result = ExecutionResult::empty(command, recording, config);
    result.diagnostics.vlm = vlm.name().to_string();
    result.diagnostics.backend = backend.name().to_string();
    let mut clock = StageClock::new();

    macro_rules! stage_try {
        ($stage:expr, $expr:expr) => {
            match $expr {
                Ok(v) => v,
                Err(e) => {
                    let source = StageError::from(e);
                    result.failure = Some(FailureRecord {
                        stage: $stage,
                        message: source.to_string(),
                    });
                    result.diagnostics.timings_ms = clock.timings.clone();
                    return Err(StageFailure {
                        stage: $stage,
                        source,
                        partial: Box::new(result),
                    });
                }
            }
        };
    }

    // Stage 1: hand-presence segmentation of the recording timeline.
    let observations = stage_try!(
        Stage::Segmentation,
        HandObservations::load(recording.hand_file())
    );
    let timeline = observations.presence_timeline(recording.frame_count());
    let filtered = stage_try!(
        Stage::Segmentation,
        segment_by_presence(recording, &timeline, config.min_gap)
    );
    clock.lap(Stage::Segmentation);

    // Stage 2: clip retrieval on the filtered timeline, mapped back to
    // original frames. retrieve_clips returns spans merged and sorted by
    // start time, which fixes the clip processing order.
    let filtered_spans = stage_try!(
        Stage::Retrieval,
        retrieve_clips(vlm, &filtered.summary(), command)
    );
    let mut plans = Vec::new();
    let mut original_spans = Vec::new();
    for span in &filtered_spans {
        let original = stage_try!(
            Stage::Retrieval,
            filtered.original_span(span).ok_or(RetrievalError::BadSpan {
                start_s: span.start_s(),
                end_s: span.end_s(),
            })
        );
        let frames = filtered.original_frames_for_span(span);
        if frames.is_empty() {
            stage_try!(
                Stage::Retrieval,
                Err(RetrievalError::BadSpan {
                    start_s: span.start_s(),
                    end_s: span.end_s(),
                })
            );
        }
        original_spans.push(original);
        plans.push(frames);
    }
    result.spans = Some(original_spans.clone());
    clock.lap(Stage::Retrieval);

    // Stage 3: per-clip preprocessing in span order. The descriptor vote
    // runs once across all clip first frames; everything downstream of it
    // is per clip.
    let tracks = stage_try!(Stage::Preprocessing, TrackSet::load(recording.track_file()));
    let mut depth_cache: BTreeMap<PathBuf, DepthMap> = BTreeMap::new();
    let mut load_depth = |path: &Path| -> Result<DepthMap, DepthIoError> {
        if let Some(hit) = depth_cache.get(path) {
            return Ok(hit.clone());
        }
        let map = DepthMap::from_png(path, recording.depth_scale())?;
        depth_cache.insert(path.to_path_buf(), map.clone());
        Ok(map)
    };

    let mut first_grids = Vec::with_capacity(plans.len());
    for frames in &plans {
        let first = frames[0];
        let asset = &recording.frame(first).expect("validated frame").descriptors;
        first_grids.push(stage_try!(
            Stage::Preprocessing,
            read_descriptor_grid(asset, first)
        ));
    }
    let set = stage_try!(
        Stage::Preprocessing,
        select_common_descriptors(&first_grids, config.keypoint_count)
    );

    let mut clips = Vec::with_capacity(plans.len());
    for (i, (frames, span)) in plans.iter().zip(&original_spans).enumerate() {
        let first = frames[0];
        let grid = &first_grids[i];
        let pixels = stage_try!(Stage::Preprocessing, locate_keypoints(&set, grid));
        let first_depth = stage_try!(
            Stage::Preprocessing,
            load_depth(&recording.frame(first).expect("validated frame").depth)
        );
        let keypoints = stage_try!(
            Stage::Preprocessing,
            lift_keypoints(&pixels, &first_depth, recording.intrinsics(), first)
        );

        let mut depths = Vec::with_capacity(frames.len());
        for &t in frames {
            depths.push(stage_try!(
                Stage::Preprocessing,
                load_depth(&recording.frame(t).expect("validated frame").depth)
            ));
        }
        let clip_tracks = tracks.select_frames(frames);
        let poses = stage_try!(
            Stage::Preprocessing,
            estimate_frame_poses(
                &clip_tracks,
                &depths,
                recording.intrinsics(),
                &config.robust_params(),
            )
        );
        let raw_joints = observations.joints_for_frames(frames);
        let clip_id = format!("clip-{i}");
        let trajectory = stage_try!(
            Stage::Preprocessing,
            build_hand_trajectory(&clip_id, &raw_joints, &poses)
        );
        let flagged_frames = frames
            .iter()
            .enumerate()
            .filter(|(local, _)| poses.is_flagged(*local))
            .map(|(_, &t)| t)
            .collect();
        clips.push(ClipContext {
            clip_id,
            span: *span,
            frames: frames.clone(),
            keypoints,
            trajectory,
            flagged_frames,
        });
    }
    result.clips = Some(clips.clone());
    clock.lap(Stage::Preprocessing);

    // Stage 4: command classification.
    let heuristic = stage_try!(Stage::Heuristic, select_heuristic(vlm, command));
    result.heuristic = Some(heuristic);
    clock.lap(Stage::Heuristic);

    // Stage 5: live keypoints, context assembly, and generation. Example
    // trajectories are cut down to the heuristic's joint subset so prompts
    // carry only gripper-relevant joints.
    let live_pixels = stage_try!(Stage::Generation, locate_keypoints(&set, &live.descriptors));
    let live_keypoints = stage_try!(
        Stage::Generation,
        lift_keypoints(&live_pixels, &live.depth, recording.intrinsics(), 0)
    );
    result.live_keypoints = Some(live_keypoints.clone());

    let mut examples = Vec::with_capacity(clips.len());
    for clip in &clips {
        let subset = stage_try!(
            Stage::Generation,
            heuristic_joint_subset(&clip.trajectory, heuristic)
        );
        examples.push(stage_try!(
            Stage::Generation,
            ContextExample::new(clip.keypoints.clone(), subset)
        ));
    }
    if config.translation_range > 0.0 || config.rotation_range > 0.0 {
        let originals = examples.clone();
        for (i, example) in originals.iter().enumerate() {
            examples.push(augment(
                example,
                config.seed ^ (i as u64 + 1),
                config.translation_range,
                config.rotation_range,
            ));
        }
    }
    let generated = stage_try!(
        Stage::Generation,
        generate_trajectory(backend, &examples, &live_keypoints, &config.generation())
    );
    result.generated = Some(generated.clone());
    clock.lap(Stage::Generation);

    // Stage 6: gripper retargeting.
    let model = stage_try!(Stage::Retargeting, config.gripper());
    let gripper = stage_try!(
        Stage::Retargeting,
        map_trajectory(&generated.trajectory, heuristic, &model)
    );
    result.gripper = Some(gripper);
    clock.lap(Stage::Retargeting);

    result.diagnostics.timings_ms = clock.timings;
    Ok(result)
}

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("result is missing {missing}, which the {format} export needs")]
    IncompleteResult {
        format: &'static str,
        missing: &'static str,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Json,
    Ply,
    Svg,
}

impl std::str::FromStr for ExportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "json" => Ok(Self::Json),
            "ply" => Ok(Self::Ply),
            "svg" => Ok(Self::Svg),
            other => Err(format!("unknown format {other:?} (expected json|ply|svg)")),
        }
    }
}

/// Linear red-to-blue gradient along the trajectory, matching the SVG plot.
fn step_color(i: usize, n: usize) -> (u8, u8, u8) {
    let t = if n <= 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
    let r = ((1.0 - t) * 255.0).round() as u8;
    let b = (t * 255.0).round() as u8;
    (r, 0, b)
}

/// Writes the requested artifacts into `out_dir` and returns their paths in
/// argument order. JSON accepts any result; the PLY cloud and SVG plot need
/// the live keypoints and gripper trajectory.
pub fn export_result(
    result: &ExecutionResult,
    out_dir: &Path,
    formats: &[ExportFormat],
) -> Result<Vec<PathBuf>, ExportError> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::with_capacity(formats.len());
    for format in formats {
        let path = match format {
            ExportFormat::Json => {
                let path = out_dir.join("result.json");
                std::fs::write(&path, result.to_json())?;
                path
            }
            ExportFormat::Ply => {
                let path = out_dir.join("result.ply");
                std::fs::write(&path, render_ply(result)?)?;
                path
            }
            ExportFormat::Svg => {
                let path = out_dir.join("result.svg");
                std::fs::write(&path, render_svg(result)?)?;
                path
            }
        };
        written.push(path);
    }
    Ok(written)
}

fn geometry_for_plots<'a>(
    result: &'a ExecutionResult,
    format: &'static str,
) -> Result<(&'a KeypointSet, &'a GripperTrajectory), ExportError> {
    let keypoints = result.live_keypoints.as_ref().ok_or(ExportError::IncompleteResult {
        format,
        missing: "live keypoints",
    })?;
    let gripper = result.gripper.as_ref().ok_or(ExportError::IncompleteResult {
        format,
        missing: "gripper trajectory",
    })?;
    Ok((keypoints, gripper))
}

/// ASCII PLY: live keypoints (gray) plus the gripper path as colored
/// vertices joined by edges. Vertex count is K + trajectory length.
fn render_ply(result: &ExecutionResult) -> Result<String, ExportError> {
    let (keypoints, gripper) = geometry_for_plots(result, "ply")?;
    let k = keypoints.points.len();
    let steps = gripper.poses().len();
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str("comment live keypoints + gripper trajectory polyline\n");
    out.push_str(&format!("element vertex {}\n", k + steps));
    out.push_str("property float x\nproperty float y\nproperty float z\n");
    out.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    out.push_str(&format!("element edge {}\n", steps.saturating_sub(1)));
    out.push_str("property int vertex1\nproperty int vertex2\n");
    out.push_str("end_header\n");
    for p in &keypoints.points {
        out.push_str(&format!("{} {} {} 128 128 128\n", p.x, p.y, p.z));
    }
    for (i, pose) in gripper.poses().iter().enumerate() {
        let t = pose.pose.translation();
        let (r, g, b) = step_color(i, steps);
        out.push_str(&format!("{} {} {} {r} {g} {b}\n", t.x, t.y, t.z));
    }
    for i in 0..steps.saturating_sub(1) {
        out.push_str(&format!("{} {}\n", k + i, k + i + 1));
    }
    Ok(out)
}

/// Top-down (x-y) SVG: keypoints as gray dots, the gripper path as segments
/// fading from red (start) to blue (end).
fn render_svg(result: &ExecutionResult) -> Result<String, ExportError> {
    let (keypoints, gripper) = geometry_for_plots(result, "svg")?;
    let path_points: Vec<(f64, f64)> = gripper
        .poses()
        .iter()
        .map(|p| {
            let t = p.pose.translation();
            (t.x, t.y)
        })
        .collect();
    let all: Vec<(f64, f64)> = keypoints
        .points
        .iter()
        .map(|p| (p.x, p.y))
        .chain(path_points.iter().copied())
        .collect();
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &all {
        min_x = min_x.min(x);
        max_x = max_x.max(x);
        min_y = min_y.min(y);
        max_y = max_y.max(y);
    }
    let span = (max_x - min_x).max(max_y - min_y).max(1e-6);
    let margin = span * 0.1;
    let scale = 480.0 / (span + 2.0 * margin);
    let to_px = |x: f64, y: f64| -> (f64, f64) {
        (
            (x - min_x + margin) * scale + 10.0,
            (y - min_y + margin) * scale + 10.0,
        )
    };

    let mut out = String::new();
    out.push_str(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"500\" height=\"500\" \
         viewBox=\"0 0 500 500\">\n",
    );
    out.push_str("<rect width=\"500\" height=\"500\" fill=\"white\"/>\n");
    for p in &keypoints.points {
        let (cx, cy) = to_px(p.x, p.y);
        out.push_str(&format!(
            "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"4\" fill=\"#808080\"/>\n"
        ));
    }
    let n = path_points.len();
    for i in 0..n.saturating_sub(1) {
        let (x1, y1) = to_px(path_points[i].0, path_points[i].1);
        let (x2, y2) = to_px(path_points[i + 1].0, path_points[i + 1].1);
        let (r, g, b) = step_color(i, n.saturating_sub(1).max(1));
        out.push_str(&format!(
            "<line x1=\"{x1:.2}\" y1=\"{y1:.2}\" x2=\"{x2:.2}\" y2=\"{y2:.2}\" \
             stroke=\"rgb({r},{g},{b})\" stroke-width=\"2\"/>\n"
        ));
    }
    for (i, &(x, y)) in path_points.iter().enumerate() {
        let (cx, cy) = to_px(x, y);
        let (r, g, b) = step_color(i, n);
        out.push_str(&format!(
            "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"3\" fill=\"rgb({r},{g},{b})\"/>\n"
        ));
    }
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::SerializedPrompt;
    use crate::synth::generate_scene;

    fn scene_setup() -> (tempfile::TempDir, crate::synth::SynthScene, Recording, LiveFrame) {
        let dir = tempfile::tempdir().unwrap();
        let scene = generate_scene(dir.path(), 10).unwrap();
        let recording = Recording::load(&scene.manifest_path).unwrap();
        let live = LiveFrame::load(&scene.live_manifest_path).unwrap();
        (dir, scene, recording, live)
    }

    fn scene_config(scene: &crate::synth::SynthScene) -> PipelineConfig {
        PipelineConfig {
            vlm_script: Some(scene.script_path.clone()),
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn default_config_validates() {
        PipelineConfig::default().validate().unwrap();
    }

    #[test]
    fn config_rejects_out_of_range_values() {
        let mut config = PipelineConfig {
            keypoint_count: 2,
            ..PipelineConfig::default()
        };
        assert!(matches!(config.validate(), Err(ConfigError::Invalid(_))));
        config.keypoint_count = 10;
        config.quantum = 0.0;
        assert!(config.validate().is_err());
        config.quantum = 0.001;
        config.backend = BackendChoice::Llm;
        assert!(config.validate().is_err());
        config.llm_endpoint = Some("http://localhost:1".into());
        config.validate().unwrap();
    }

    #[test]
    fn config_file_merges_and_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rx.toml");
        std::fs::write(&path, "keypoint_count = 7\nquantum = 0.002\nbackend = \"llm\"\n")
            .unwrap();
        let mut config = PipelineConfig::default();
        config.merge_file(&path).unwrap();
        assert_eq!(config.keypoint_count, 7);
        assert_eq!(config.quantum, 0.002);
        assert_eq!(config.backend, BackendChoice::Llm);
        // Unmentioned keys keep their previous values.
        assert_eq!(config.seed, 0);

        std::fs::write(&path, "keypoint_cnt = 7\n").unwrap();
        assert!(matches!(
            config.merge_file(&path),
            Err(ConfigError::Toml(_))
        ));
    }

    /// Environment variables outrank file values. One test owns all RX_*
    /// variables because the process environment is shared across threads.
    #[test]
    fn environment_overrides_win() {
        let mut config = PipelineConfig {
            seed: 1,
            keypoint_count: 5,
            ..PipelineConfig::default()
        };
        std::env::set_var(ENV_SEED, "42");
        std::env::set_var(ENV_KEYPOINTS, "8");
        std::env::set_var(ENV_QUANTUM, "0.01");
        std::env::set_var(ENV_BACKEND, "llm");
        std::env::set_var(ENV_TOLERANCE, "1.5");
        std::env::set_var(ENV_LLM_ENDPOINT, "http://localhost:9");
        let outcome = config.apply_env();
        std::env::remove_var(ENV_SEED);
        std::env::remove_var(ENV_KEYPOINTS);
        std::env::remove_var(ENV_QUANTUM);
        std::env::remove_var(ENV_BACKEND);
        std::env::remove_var(ENV_TOLERANCE);
        std::env::remove_var(ENV_LLM_ENDPOINT);
        outcome.unwrap();
        assert_eq!(config.seed, 42);
        assert_eq!(config.keypoint_count, 8);
        assert_eq!(config.quantum, 0.01);
        assert_eq!(config.backend, BackendChoice::Llm);
        assert_eq!(config.tolerance_s, 1.5);
        assert_eq!(config.llm_endpoint.as_deref(), Some("http://localhost:9"));
        config.validate().unwrap();

        std::env::set_var(ENV_SEED, "not-a-number");
        let err = config.apply_env();
        std::env::remove_var(ENV_SEED);
        assert!(matches!(err, Err(ConfigError::BadEnv { var, .. }) if var == ENV_SEED));
    }

    #[test]
    fn full_run_produces_every_stage_output() {
        let (_dir, scene, recording, live) = scene_setup();
        let config = scene_config(&scene);
        let command = Command::new(&scene.command).unwrap();
        let result = execute_command(&recording, &live, &command, &config).unwrap();
        assert!(result.is_complete());
        assert_eq!(result.diagnostics.vlm, "scripted");
        assert_eq!(result.diagnostics.backend, "nearest-context");
        assert_eq!(result.heuristic, Some(HeuristicKind::Grasp));
        assert_eq!(result.diagnostics.timings_ms.len(), 6);

        // Retrieved spans come back in original recording seconds.
        let spans = result.spans.as_ref().unwrap();
        assert_eq!(spans.len(), 2);
        assert!((spans[0].start_s() - scene.clip_a_frames.0 as f64 / scene.fps).abs() < 1e-9);
        assert!((spans[1].start_s() - scene.clip_b_frames.0 as f64 / scene.fps).abs() < 1e-9);

        // Per-clip context matches the scene's analytic ground truth.
        let clips = result.clips.as_ref().unwrap();
        assert_eq!(clips.len(), 2);
        assert_eq!(clips[0].frames[0], scene.clip_a_frames.0);
        assert!(clips[0].flagged_frames.is_empty());
        for (got, want) in clips[0]
            .keypoints
            .points
            .iter()
            .zip(&scene.demo_keypoints.points)
        {
            assert!(got.distance(want) < 1e-12);
        }
        for (got, want) in result
            .live_keypoints
            .as_ref()
            .unwrap()
            .points
            .iter()
            .zip(&scene.live_keypoints.points)
        {
            assert!(got.distance(want) < 1e-12);
        }

        // The generated trajectory is the demo rigidly moved into the live
        // frame, within the serialization quantum.
        let generated = result.generated.as_ref().unwrap();
        assert!(!generated.meta.fallback_used);
        assert_eq!(generated.trajectory.len(), scene.demo_trajectory.len());
        let expected = crate::hands::transform_trajectory(
            &scene.demo_to_live,
            &crate::context::heuristic_joint_subset(
                &scene.demo_trajectory,
                HeuristicKind::Grasp,
            )
            .unwrap(),
        )
        .unwrap();
        for (got, want) in generated.trajectory.frames().iter().zip(expected.frames()) {
            for (g, w) in got.joints.iter().zip(&want.joints) {
                assert!(g.distance(w) <= config.quantum);
            }
        }
        assert_eq!(result.gripper.as_ref().unwrap().len(), scene.demo_trajectory.len());
    }

    #[test]
    fn unknown_command_fails_in_the_retrieval_stage() {
        let (_dir, scene, recording, live) = scene_setup();
        let config = scene_config(&scene);
        let command = Command::new("paint the fence").unwrap();
        let err = execute_command(&recording, &live, &command, &config).unwrap_err();
        assert_eq!(err.stage, Stage::Retrieval);
        assert!(matches!(
            err.source,
            StageError::Retrieval(RetrievalError::EmptyRetrieval)
        ));
        // Earlier stage outputs are retained; later ones are absent.
        let partial = &err.partial;
        assert!(partial.spans.is_none());
        assert!(partial.gripper.is_none());
        let record = partial.failure.as_ref().unwrap();
        assert_eq!(record.stage, Stage::Retrieval);
        assert!(!err.source.is_transport());
    }

    #[test]
    fn generation_failure_keeps_preprocessing_output() {
        struct NoisyBackend;
        impl SequenceBackend for NoisyBackend {
            fn complete(&self, _prompt: &SerializedPrompt) -> Result<String, ContextError> {
                Ok("garbage with no frames".into())
            }
            fn is_deterministic(&self) -> bool {
                true
            }
            fn name(&self) -> &'static str {
                "noisy"
            }
        }
        let (_dir, scene, recording, live) = scene_setup();
        let config = scene_config(&scene);
        let command = Command::new(&scene.command).unwrap();
        let vlm = config.vlm_client().unwrap();
        // The baseline fallback rescues a garbage backend, so the run still
        // completes and is marked as a fallback.
        let result = execute_command_with(
            &recording,
            &live,
            &command,
            &config,
            vlm.as_ref(),
            &NoisyBackend,
        )
        .unwrap();
        assert!(result.is_complete());
        let meta = &result.generated.as_ref().unwrap().meta;
        assert!(meta.fallback_used);
        assert_eq!(meta.backend, "noisy");
        assert!(meta.residual_rms.unwrap() < 1e-9);
    }

    #[test]
    fn two_runs_export_identical_bytes() {
        let (_dir, scene, recording, live) = scene_setup();
        let config = scene_config(&scene);
        let command = Command::new(&scene.command).unwrap();
        let a = execute_command(&recording, &live, &command, &config).unwrap();
        let b = execute_command(&recording, &live, &command, &config).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn exported_json_reingests_losslessly() {
        let (_dir, scene, recording, live) = scene_setup();
        let config = scene_config(&scene);
        let command = Command::new(&scene.command).unwrap();
        let result = execute_command(&recording, &live, &command, &config).unwrap();
        let text = result.to_json();
        let back = ExecutionResult::from_json(&text).unwrap();
        assert_eq!(back, {
            let mut r = result.clone();
            // Timings are process-local diagnostics, not part of the schema.
            r.diagnostics.timings_ms = Vec::new();
            r
        });
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn export_writes_the_requested_formats() {
        let (_dir, scene, recording, live) = scene_setup();
        let config = scene_config(&scene);
        let command = Command::new(&scene.command).unwrap();
        let result = execute_command(&recording, &live, &command, &config).unwrap();

        let out = tempfile::tempdir().unwrap();
        let files = export_result(
            &result,
            out.path(),
            &[ExportFormat::Json, ExportFormat::Ply, ExportFormat::Svg],
        )
        .unwrap();
        assert_eq!(files.len(), 3);

        let loaded = ExecutionResult::load(&files[0]).unwrap();
        assert_eq!(loaded.to_json(), result.to_json());

        // PLY header announces K + steps vertices and steps-1 edges.
        let ply = std::fs::read_to_string(&files[1]).unwrap();
        let k = result.live_keypoints.as_ref().unwrap().points.len();
        let steps = result.gripper.as_ref().unwrap().len();
        assert!(ply.contains(&format!("element vertex {}", k + steps)));
        assert!(ply.contains(&format!("element edge {}", steps - 1)));
        let data_lines = ply
            .lines()
            .skip_while(|l| *l != "end_header")
            .skip(1)
            .count();
        assert_eq!(data_lines, k + steps + steps - 1);

        let svg = std::fs::read_to_string(&files[2]).unwrap();
        assert!(svg.starts_with("<svg"));
        // First segment starts red, last ends blue.
        assert!(svg.contains("rgb(255,0,0)"));
        assert!(svg.contains("rgb(0,0,255)"));
    }

    #[test]
    fn plots_need_a_complete_result() {
        let (_dir, scene, recording, _live) = scene_setup();
        let config = scene_config(&scene);
        let command = Command::new(&scene.command).unwrap();
        let partial = ExecutionResult::empty(&command, &recording, &config);
        let out = tempfile::tempdir().unwrap();
        // JSON export of a partial result still works.
        export_result(&partial, out.path(), &[ExportFormat::Json]).unwrap();
        assert!(matches!(
            export_result(&partial, out.path(), &[ExportFormat::Ply]),
            Err(ExportError::IncompleteResult { format: "ply", .. })
        ));
    }

    #[test]
    fn export_into_an_unwritable_path_is_an_io_error() {
        let (_dir, scene, recording, live) = scene_setup();
        let config = scene_config(&scene);
        let command = Command::new(&scene.command).unwrap();
        let result = execute_command(&recording, &live, &command, &config).unwrap();
        let out = tempfile::tempdir().unwrap();
        let blocker = out.path().join("blocker");
        std::fs::write(&blocker, "a file, not a directory").unwrap();
        assert!(matches!(
            export_result(&result, &blocker.join("sub"), &[ExportFormat::Json]),
            Err(ExportError::Io(_))
        ));
    }

    #[test]
    fn live_frame_requires_a_single_frame_manifest() {
        let (_dir, scene, _recording, _live) = scene_setup();
        assert!(matches!(
            LiveFrame::load(&scene.manifest_path),
            Err(RetrievalError::BadManifest(_))
        ));
    }
}

//! Command line front end for the retrieval-and-execution pipeline.
//!
//! Verbs: `ingest`, `retrieve`, `execute`, `eval-retrieval`, `stabilize`,
//! `export`, and `demo`. Machine-readable output goes to stdout as JSON;
//! progress and stage timings go to stderr. Configuration precedence is
//! defaults < `--config` file < flags < `RX_*` environment variables.
//!
//! Exit codes: 0 success, 2 validation error (bad arguments, unreadable
//! inputs), 3 stage failure, 4 transport failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use rx_core::geometry::DepthMap;
use rx_core::hands::HandObservations;
use rx_core::pipeline::{
    execute_command, export_result, ExecutionResult, ExportFormat, LiveFrame, PipelineConfig,
    StageError, StageFailure,
};
use rx_core::retrieval::{
    evaluate_retrieval, load_annotations, retrieve_clips, segment_by_presence, select_heuristic,
    ClipSpan, Command, FilteredRecording, Recording, RetrievalError, VlmClient,
};
use rx_core::stabilization::{estimate_frame_poses, TrackSet};
use rx_core::synth::{generate_scene, MAX_KEYPOINTS};

#[derive(Parser)]
#[command(name = "rx", version, about = "Retrieve demonstrations and generate gripper trajectories")]
struct Cli {
    /// TOML configuration file. Flags override it; RX_* environment
    /// variables override both.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Validate a recording manifest and print its summary.
    Ingest {
        /// Recording manifest (JSON).
        manifest: PathBuf,
    },
    /// Ask the retrieval client for the clip spans matching a command.
    Retrieve {
        manifest: PathBuf,
        /// Natural-language task, e.g. "grasp the marker".
        #[arg(long)]
        command: String,
        #[command(flatten)]
        overrides: ConfigOverrides,
    },
    /// Run the full pipeline against a live frame and export the result.
    Execute {
        manifest: PathBuf,
        #[arg(long)]
        command: String,
        /// Single-frame recording manifest for the live observation.
        #[arg(long, value_name = "MANIFEST")]
        live: PathBuf,
        /// Output directory for the exported result.
        #[arg(long, value_name = "DIR", default_value = "rx-out")]
        out: PathBuf,
        /// Comma-separated export formats: json, ply, svg.
        #[arg(long, value_delimiter = ',', default_value = "json")]
        formats: Vec<String>,
        #[command(flatten)]
        overrides: ConfigOverrides,
    },
    /// Score the retrieval client against ground-truth annotations.
    EvalRetrieval {
        manifest: PathBuf,
        /// JSON file mapping command text to ground-truth spans.
        #[arg(long, value_name = "FILE")]
        annotations: PathBuf,
        /// Span endpoint tolerance in seconds.
        #[arg(long)]
        tolerance: Option<f64>,
        #[command(flatten)]
        overrides: ConfigOverrides,
    },
    /// Estimate first-frame-relative camera poses for one clip.
    Stabilize {
        manifest: PathBuf,
        /// Clip bounds as start,end seconds, e.g. --clip 3.0,9.0.
        #[arg(long, value_name = "START,END")]
        clip: String,
        #[command(flatten)]
        overrides: ConfigOverrides,
    },
    /// Re-export a stored execution result in other formats.
    Export {
        /// result.json written by a previous execute run.
        result: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "json")]
        formats: Vec<String>,
        #[arg(long, value_name = "DIR", default_value = ".")]
        out: PathBuf,
    },
    /// Generate a synthetic scene and run the pipeline end to end on it.
    Demo {
        /// Where to write the scene and its outputs.
        #[arg(long, value_name = "DIR", default_value = "rx-demo")]
        dir: PathBuf,
        #[command(flatten)]
        overrides: ConfigOverrides,
    },
}

/// Flag-level overrides for the most commonly tuned configuration fields.
#[derive(Args)]
struct ConfigOverrides {
    /// Sequence backend: baseline or llm.
    #[arg(long)]
    backend: Option<String>,
    /// Seed for every stochastic component.
    #[arg(long)]
    seed: Option<u64>,
    /// Keypoints to select per scene.
    #[arg(long, value_name = "K")]
    keypoints: Option<usize>,
    /// Serialization grid pitch in meters.
    #[arg(long)]
    quantum: Option<f64>,
    /// Scripted retrieval file for offline runs.
    #[arg(long, value_name = "FILE")]
    vlm_script: Option<PathBuf>,
    /// Live retrieval service endpoint.
    #[arg(long, value_name = "URL")]
    vlm_endpoint: Option<String>,
    /// Completion endpoint for the llm backend.
    #[arg(long, value_name = "URL")]
    llm_endpoint: Option<String>,
    /// Gripper landmark file; stock 2F-85 when absent.
    #[arg(long, value_name = "FILE")]
    gripper_model: Option<PathBuf>,
}

enum CliError {
    /// Bad arguments or unreadable/invalid inputs; exit code 2.
    Validation(String),
    /// A pipeline stage failed; exit code 4 for transport, 3 otherwise.
    Stage { message: String, transport: bool },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Stage { transport: true, .. } => 4,
            CliError::Stage { transport: false, .. } => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) => m,
            CliError::Stage { message, .. } => message,
        }
    }
}

/// Inputs that fail to load or validate are the caller's problem.
fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

/// Errors from running pipeline stages, with transport failures kept apart
/// so scripts can retry them.
fn stage(e: impl Into<StageError>) -> CliError {
    let e = e.into();
    CliError::Stage {
        transport: e.is_transport(),
        message: e.to_string(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

fn build_config(
    config_path: Option<&Path>,
    overrides: &ConfigOverrides,
) -> Result<PipelineConfig, CliError> {
    let mut config = PipelineConfig::default();
    if let Some(path) = config_path {
        config.merge_file(path).map_err(invalid)?;
    }
    if let Some(backend) = &overrides.backend {
        config.backend = FromStr::from_str(backend).map_err(invalid)?;
    }
    if let Some(seed) = overrides.seed {
        config.seed = seed;
    }
    if let Some(k) = overrides.keypoints {
        config.keypoint_count = k;
    }
    if let Some(quantum) = overrides.quantum {
        config.quantum = quantum;
    }
    if let Some(path) = &overrides.vlm_script {
        config.vlm_script = Some(path.clone());
    }
    if let Some(url) = &overrides.vlm_endpoint {
        config.vlm_endpoint = Some(url.clone());
    }
    if let Some(url) = &overrides.llm_endpoint {
        config.llm_endpoint = Some(url.clone());
    }
    if let Some(path) = &overrides.gripper_model {
        config.gripper_model = Some(path.clone());
    }
    config.apply_env().map_err(invalid)?;
    config.validate().map_err(invalid)?;
    Ok(config)
}

fn parse_formats(names: &[String]) -> Result<Vec<ExportFormat>, CliError> {
    names
        .iter()
        .map(|name| ExportFormat::from_str(name).map_err(CliError::Validation))
        .collect()
}

/// Hand-presence filtering shared by the retrieval-facing verbs.
fn filter_recording(
    recording: &Recording,
    min_gap: usize,
) -> Result<FilteredRecording, CliError> {
    let observations = HandObservations::load(recording.hand_file()).map_err(stage)?;
    let timeline = observations.presence_timeline(recording.frame_count());
    segment_by_presence(recording, &timeline, min_gap).map_err(stage)
}

/// Retrieves spans on the filtered timeline and maps them back to original
/// recording seconds.
fn retrieve_original_spans(
    filtered: &FilteredRecording,
    client: &dyn VlmClient,
    command: &Command,
) -> Result<Vec<ClipSpan>, RetrievalError> {
    let spans = retrieve_clips(client, &filtered.summary(), command)?;
    let mut original = Vec::with_capacity(spans.len());
    for span in &spans {
        original.push(filtered.original_span(span).ok_or(RetrievalError::BadSpan {
            start_s: span.start_s(),
            end_s: span.end_s(),
        })?);
    }
    Ok(original)
}

fn print_timings(result: &ExecutionResult) {
    let timings = &result.diagnostics.timings_ms;
    if timings.is_empty() {
        return;
    }
    let rendered: Vec<String> = timings
        .iter()
        .map(|(stage, ms)| format!("{stage} {ms:.2} ms"))
        .collect();
    eprintln!("stage timings: {}", rendered.join(", "));
}

/// Runs the pipeline and exports whatever it produced: the full result on
/// success, the partial result when a stage fails (stage isolation means
/// everything before the failure is still worth keeping).
fn execute_and_export(
    recording: &Recording,
    live: &LiveFrame,
    command: &Command,
    config: &PipelineConfig,
    out: &Path,
    formats: &[ExportFormat],
) -> Result<(), CliError> {
    match execute_command(recording, live, command, config) {
        Ok(result) => {
            print_timings(&result);
            let written = export_result(&result, out, formats).map_err(invalid)?;
            for path in &written {
                println!("{}", path.display());
            }
            let gripper_len = result.gripper.as_ref().map_or(0, |g| g.len());
            eprintln!(
                "generated {} gripper poses via {} (vlm: {})",
                gripper_len, result.diagnostics.backend, result.diagnostics.vlm
            );
            Ok(())
        }
        Err(StageFailure {
            stage: failed,
            source,
            partial,
        }) => {
            print_timings(&partial);
            if let Ok(written) = export_result(&partial, out, &[ExportFormat::Json]) {
                for path in &written {
                    eprintln!("partial result written to {}", path.display());
                }
            }
            Err(CliError::Stage {
                transport: source.is_transport(),
                message: format!("{failed} stage failed: {source}"),
            })
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.verb {
        Verb::Ingest { manifest } => {
            let recording = Recording::load(&manifest).map_err(invalid)?;
            let summary = recording.summary();
            println!(
                "{}",
                serde_json::json!({
                    "recording_id": summary.recording_id,
                    "fps": summary.fps,
                    "duration_s": summary.duration_s,
                    "frames": recording.frame_count(),
                })
            );
            Ok(())
        }
        Verb::Retrieve {
            manifest,
            command,
            overrides,
        } => {
            let config = build_config(cli.config.as_deref(), &overrides)?;
            let recording = Recording::load(&manifest).map_err(invalid)?;
            let command = Command::new(command).map_err(invalid)?;
            let filtered = filter_recording(&recording, config.min_gap)?;
            let client = config.vlm_client().map_err(invalid)?;
            let spans =
                retrieve_original_spans(&filtered, client.as_ref(), &command).map_err(stage)?;
            let heuristic = select_heuristic(client.as_ref(), &command).map_err(stage)?;
            println!(
                "{}",
                serde_json::json!({ "spans": spans, "heuristic": heuristic })
            );
            Ok(())
        }
        Verb::Execute {
            manifest,
            command,
            live,
            out,
            formats,
            overrides,
        } => {
            let config = build_config(cli.config.as_deref(), &overrides)?;
            let formats = parse_formats(&formats)?;
            let recording = Recording::load(&manifest).map_err(invalid)?;
            let live = LiveFrame::load(&live).map_err(invalid)?;
            let command = Command::new(command).map_err(invalid)?;
            execute_and_export(&recording, &live, &command, &config, &out, &formats)
        }
        Verb::EvalRetrieval {
            manifest,
            annotations,
            tolerance,
            overrides,
        } => {
            let config = build_config(cli.config.as_deref(), &overrides)?;
            let tolerance = tolerance.unwrap_or(config.tolerance_s);
            let recording = Recording::load(&manifest).map_err(invalid)?;
            let truth = load_annotations(&annotations).map_err(invalid)?;
            let filtered = filter_recording(&recording, config.min_gap)?;
            let client = config.vlm_client().map_err(invalid)?;
            let mut scores = serde_json::Map::new();
            for (text, truth_spans) in &truth {
                let command = Command::new(text.clone()).map_err(invalid)?;
                let predicted = match retrieve_original_spans(&filtered, client.as_ref(), &command)
                {
                    Ok(spans) => spans,
                    // A command the client cannot find anything for scores
                    // zero recall; it is not a failed run.
                    Err(RetrievalError::EmptyRetrieval) => Vec::new(),
                    Err(other) => return Err(stage(other)),
                };
                let score =
                    evaluate_retrieval(&predicted, truth_spans, tolerance).map_err(invalid)?;
                scores.insert(
                    text.clone(),
                    serde_json::json!({
                        "precision": score.precision,
                        "recall": score.recall,
                        "matches": score.matches,
                        "predicted": predicted,
                    }),
                );
            }
            println!(
                "{}",
                serde_json::to_string_pretty(&serde_json::Value::Object(scores))
                    .expect("scores serialize")
            );
            Ok(())
        }
        Verb::Stabilize {
            manifest,
            clip,
            overrides,
        } => {
            let config = build_config(cli.config.as_deref(), &overrides)?;
            let recording = Recording::load(&manifest).map_err(invalid)?;
            let (start_s, end_s) = clip
                .split_once(',')
                .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)))
                .ok_or_else(|| {
                    CliError::Validation(format!(
                        "--clip expects start,end seconds, got {clip:?}"
                    ))
                })?;
            let span = ClipSpan::new(start_s, end_s).map_err(invalid)?;
            let frames = span.frame_indices(recording.fps(), recording.frame_count());
            if frames.is_empty() {
                return Err(CliError::Validation(format!(
                    "clip {start_s},{end_s} covers no frames of {}",
                    recording.recording_id()
                )));
            }
            let tracks = TrackSet::load(recording.track_file()).map_err(stage)?;
            let clip_tracks = tracks.select_frames(&frames);
            let mut depths = Vec::with_capacity(frames.len());
            for &frame in &frames {
                let asset = recording.frame(frame).expect("indices come from the recording");
                depths.push(
                    DepthMap::from_png(&asset.depth, recording.depth_scale()).map_err(stage)?,
                );
            }
            let params = config.robust_params();
            let poses = estimate_frame_poses(&clip_tracks, &depths, recording.intrinsics(), &params)
                .map_err(stage)?;
            let rows: Vec<serde_json::Value> = frames
                .iter()
                .enumerate()
                .map(|(local, &original)| {
                    serde_json::json!({
                        "frame": original,
                        "pose": poses.pose(local).expect("pose per selected frame"),
                        "flagged": poses.is_flagged(local),
                    })
                })
                .collect();
            println!(
                "{}",
                serde_json::to_string_pretty(&rows).expect("poses serialize")
            );
            Ok(())
        }
        Verb::Export {
            result,
            formats,
            out,
        } => {
            let formats = parse_formats(&formats)?;
            let result = ExecutionResult::load(&result).map_err(invalid)?;
            let written = export_result(&result, &out, &formats).map_err(invalid)?;
            for path in &written {
                println!("{}", path.display());
            }
            Ok(())
        }
        Verb::Demo { dir, overrides } => {
            let mut config = build_config(cli.config.as_deref(), &overrides)?;
            std::fs::create_dir_all(&dir).map_err(invalid)?;
            let scene_dir = dir.join("scene");
            let scene = generate_scene(&scene_dir, config.keypoint_count.min(MAX_KEYPOINTS))
                .map_err(invalid)?;
            config.keypoint_count = scene.keypoint_count;
            if config.vlm_script.is_none() && config.vlm_endpoint.is_none() {
                config.vlm_script = Some(scene.script_path.clone());
            }
            eprintln!("scene written to {}", scene_dir.display());
            let recording = Recording::load(&scene.manifest_path).map_err(invalid)?;
            let live = LiveFrame::load(&scene.live_manifest_path).map_err(invalid)?;
            let command = Command::new(scene.command.clone()).map_err(invalid)?;
            eprintln!("executing {:?}", scene.command);
            let formats = [ExportFormat::Json, ExportFormat::Ply, ExportFormat::Svg];
            execute_and_export(
                &recording,
                &live,
                &command,
                &config,
                &dir.join("out"),
                &formats,
            )
        }
    }
}

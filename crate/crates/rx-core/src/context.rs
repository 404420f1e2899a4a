//! In-context trajectory generation. Retrieved clips supply example pairs of
//! (3D keypoints → stabilized hand trajectory); those pairs plus the live
//! observation's keypoints are serialized into a plain-text prompt, handed to
//! a sequence backend, and the completion is parsed back into a trajectory
//! expressed in the live frame.
//!
//! Prompt grammar (EBNF; `sp` is one or more spaces/tabs, `nl` a newline):
//!
//! ```text
//! prompt    = { example } , live ;
//! example   = keypoints , "output:" , nl , frame , { frame } ;
//! live      = keypoints , "output:" , nl ;
//! keypoints = "input:" , sp , triples , nl ;
//! frame     = triples , nl ;
//! triples   = triple , { sp , triple } ;
//! triple    = "(" , int , "," , sp , int , "," , sp , int , ")" ;
//! int       = [ "-" ] , digit , { digit } ;
//! ```
//!
//! A completion is `frame , { frame }` continuing after the live block's
//! `output:` header. Coordinates are integers in units of the configured
//! quantum (default millimeters); parsing dequantizes back to meters. The
//! writer emits the canonical `", "` separator inside triples and single
//! spaces between them; the parser accepts any run of blanks in those
//! positions, tolerates blank lines between frames, and treats `\r` as a
//! blank.

use std::fmt::Write as _;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptors::KeypointSet;
use crate::geometry::{estimate_rigid_transform, Point3, RigidTransform};
use crate::gripper::HeuristicKind;
use crate::hands::{
    transform_trajectory, HandError, HandJointFrame, HandTrajectory, JointFrame, JOINT_COUNT,
};
use crate::transport::{post_json, HttpConfig, TransportError};

#[derive(Debug, Error)]
pub enum ContextError {
    #[error("context requires at least one example")]
    EmptyContext,
    #[error("example {index} has {example} keypoints but the live set has {live}")]
    KeypointCountMismatch {
        live: usize,
        example: usize,
        index: usize,
    },
    #[error("example {index} has {got} joints per frame, expected {expected}")]
    JointCountMismatch {
        expected: usize,
        got: usize,
        index: usize,
    },
    #[error("quantization step must be positive and finite, got {got}")]
    BadQuantum { got: f64 },
    #[error("malformed sequence output at byte {offset}: {detail}")]
    MalformedOutput { offset: usize, detail: String },
    #[error("output frame {frame} has {got} joints, expected {expected}")]
    WrongArity {
        frame: usize,
        expected: usize,
        got: usize,
    },
    #[error("degenerate keypoints: {0}")]
    DegenerateKeypoints(String),
    #[error("generation failed after {attempts} attempts and the baseline also failed: {source}")]
    GenerationFailed {
        attempts: u32,
        source: Box<ContextError>,
    },
    #[error("transport: {0}")]
    Transport(#[from] TransportError),
    #[error("hand data: {0}")]
    Hand(#[from] HandError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// One retrieved demonstration: the clip's common 3D keypoints paired with
/// its stabilized hand trajectory, both in the clip's frame-1 coordinates.
/// The trajectory may carry the full 21-joint skeleton or a serialized
/// subset, as long as all examples in one context agree.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextExample {
    pub keypoints: KeypointSet,
    pub trajectory: HandTrajectory,
}

impl ContextExample {
    pub fn new(keypoints: KeypointSet, trajectory: HandTrajectory) -> Result<Self, ContextError> {
        if keypoints.points.is_empty() {
            return Err(ContextError::DegenerateKeypoints(
                "example has no keypoints".into(),
            ));
        }
        Ok(Self {
            keypoints,
            trajectory,
        })
    }

    pub fn keypoint_count(&self) -> usize {
        self.keypoints.points.len()
    }
}

/// Shape metadata recorded alongside the prompt text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptMetadata {
    pub keypoint_count: usize,
    pub example_count: usize,
    /// Trajectory length of each example, in prompt order.
    pub frame_counts: Vec<usize>,
    pub joint_count: usize,
    pub quantum: f64,
}

/// A token-ready prompt plus the shape information a parser needs to read it
/// back.
#[derive(Clone, Debug, PartialEq)]
pub struct SerializedPrompt {
    pub text: String,
    pub metadata: PromptMetadata,
}

/// Something that continues a serialized prompt with raw text: a remote
/// language model or the bundled deterministic baseline.
pub trait SequenceBackend {
    fn complete(&self, prompt: &SerializedPrompt) -> Result<String, ContextError>;
    fn is_deterministic(&self) -> bool;
    fn name(&self) -> &str;
}

fn check_quantum(quantum: f64) -> Result<(), ContextError> {
    if quantum > 0.0 && quantum.is_finite() {
        Ok(())
    } else {
        Err(ContextError::BadQuantum { got: quantum })
    }
}

/// Rounds half away from zero, so quantize(0.0005, 0.001) = 1 and
/// quantize(-0.0005, 0.001) = -1.
pub fn quantize(value: f64, quantum: f64) -> i64 {
    (value / quantum).round() as i64
}

pub fn dequantize(steps: i64, quantum: f64) -> f64 {
    steps as f64 * quantum
}

fn write_triple(out: &mut String, p: &Point3, quantum: f64) {
    write!(
        out,
        "({}, {}, {})",
        quantize(p.x, quantum),
        quantize(p.y, quantum),
        quantize(p.z, quantum)
    )
    .expect("writing to a String cannot fail");
}

fn write_points_line(out: &mut String, prefix: &str, points: &[Point3], quantum: f64) {
    out.push_str(prefix);
    for p in points {
        out.push(' ');
        write_triple(out, p, quantum);
    }
    out.push('\n');
}

/// Renders a trajectory as completion text: one line of quantized triples per
/// frame. This is exactly the block a backend is expected to produce.
pub fn serialize_trajectory(
    trajectory: &HandTrajectory,
    quantum: f64,
) -> Result<String, ContextError> {
    check_quantum(quantum)?;
    let mut out = String::new();
    for frame in trajectory.frames() {
        for (i, joint) in frame.joints.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            write_triple(&mut out, joint, quantum);
        }
        out.push('\n');
    }
    Ok(out)
}

/// Serializes examples and the live keypoints into the prompt grammar.
/// Every example must carry the same number of keypoints as the live set and
/// the same joints-per-frame as each other.
pub fn serialize_context(
    examples: &[ContextExample],
    live: &KeypointSet,
    quantum: f64,
) -> Result<SerializedPrompt, ContextError> {
    check_quantum(quantum)?;
    if examples.is_empty() {
        return Err(ContextError::EmptyContext);
    }
    let k = live.points.len();
    if k == 0 {
        return Err(ContextError::DegenerateKeypoints(
            "live keypoint set is empty".into(),
        ));
    }
    let joint_count = examples[0].trajectory.arity();
    let mut frame_counts = Vec::with_capacity(examples.len());
    let mut text = String::new();
    for (index, example) in examples.iter().enumerate() {
        if example.keypoint_count() != k {
            return Err(ContextError::KeypointCountMismatch {
                live: k,
                example: example.keypoint_count(),
                index,
            });
        }
        if example.trajectory.arity() != joint_count {
            return Err(ContextError::JointCountMismatch {
                expected: joint_count,
                got: example.trajectory.arity(),
                index,
            });
        }
        write_points_line(&mut text, "input:", &example.keypoints.points, quantum);
        text.push_str("output:\n");
        text.push_str(&serialize_trajectory(&example.trajectory, quantum)?);
        frame_counts.push(example.trajectory.len());
    }
    write_points_line(&mut text, "input:", &live.points, quantum);
    text.push_str("output:\n");
    Ok(SerializedPrompt {
        text,
        metadata: PromptMetadata {
            keypoint_count: k,
            example_count: examples.len(),
            frame_counts,
            joint_count,
            quantum,
        },
    })
}

/// Text left over after a complete trajectory; reported rather than silently
/// dropped so callers can log it.
#[derive(Clone, Debug, PartialEq)]
pub struct TrailingGarbage {
    pub offset: usize,
    pub preview: String,
}

#[derive(Debug)]
pub struct ParsedTrajectory {
    pub trajectory: HandTrajectory,
    pub trailing_garbage: Option<TrailingGarbage>,
}

#[derive(Clone, Copy, PartialEq)]
enum BlockEnd {
    /// Completion text: garbage after at least one frame is reported, not
    /// fatal; anything that starts a frame must parse completely.
    CompletionTail,
    /// Prompt block: stops cleanly before the next "input:"; any other
    /// non-frame content is an error.
    PromptStrict,
}

struct Scanner<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Scanner<'a> {
    fn new(text: &'a str) -> Self {
        Scanner {
            bytes: text.as_bytes(),
            pos: 0,
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn at_eof(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    fn malformed(&self, detail: impl Into<String>) -> ContextError {
        ContextError::MalformedOutput {
            offset: self.pos,
            detail: detail.into(),
        }
    }

    fn skip_blanks(&mut self) {
        while matches!(self.peek(), Some(b' ') | Some(b'\t') | Some(b'\r')) {
            self.pos += 1;
        }
    }

    fn skip_blank_lines(&mut self) {
        while matches!(
            self.peek(),
            Some(b' ') | Some(b'\t') | Some(b'\r') | Some(b'\n')
        ) {
            self.pos += 1;
        }
    }

    fn eat(&mut self, b: u8) -> bool {
        if self.peek() == Some(b) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, b: u8) -> Result<(), ContextError> {
        if self.eat(b) {
            Ok(())
        } else {
            Err(self.malformed(format!("expected '{}'", b as char)))
        }
    }

    fn at_literal(&self, lit: &[u8]) -> bool {
        self.bytes[self.pos..].starts_with(lit)
    }

    fn expect_literal(&mut self, lit: &[u8]) -> Result<(), ContextError> {
        if self.at_literal(lit) {
            self.pos += lit.len();
            Ok(())
        } else {
            Err(self.malformed(format!(
                "expected \"{}\"",
                String::from_utf8_lossy(lit)
            )))
        }
    }

    fn parse_int(&mut self) -> Result<i64, ContextError> {
        let start = self.pos;
        if self.peek() == Some(b'-') {
            self.pos += 1;
        }
        let digits_start = self.pos;
        while matches!(self.peek(), Some(b'0'..=b'9')) {
            self.pos += 1;
        }
        if self.pos == digits_start {
            return Err(self.malformed("expected a digit"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("digits and '-' are ASCII")
            .parse::<i64>()
            .map_err(|_| ContextError::MalformedOutput {
                offset: start,
                detail: "integer out of range".into(),
            })
    }

    fn parse_triple(&mut self, quantum: f64) -> Result<Point3, ContextError> {
        self.expect(b'(')?;
        self.skip_blanks();
        let x = self.parse_int()?;
        self.skip_blanks();
        self.expect(b',')?;
        self.skip_blanks();
        let y = self.parse_int()?;
        self.skip_blanks();
        self.expect(b',')?;
        self.skip_blanks();
        let z = self.parse_int()?;
        self.skip_blanks();
        self.expect(b')')?;
        Ok(Point3::new(
            dequantize(x, quantum),
            dequantize(y, quantum),
            dequantize(z, quantum),
        ))
    }

    /// Parses the triples remaining on the current line; stops at a newline
    /// (consumed) or EOF.
    fn parse_triple_line(&mut self, quantum: f64) -> Result<Vec<Point3>, ContextError> {
        let mut points = Vec::new();
        loop {
            points.push(self.parse_triple(quantum)?);
            self.skip_blanks();
            match self.peek() {
                None => break,
                Some(b'\n') => {
                    self.pos += 1;
                    break;
                }
                Some(b'(') => continue,
                Some(_) => return Err(self.malformed("unexpected text inside a frame line")),
            }
        }
        Ok(points)
    }
}

/// Parses frame lines until the block ends. Under `PromptStrict` the block
/// also ends just before a line starting with "input:".
fn parse_frame_block(
    scanner: &mut Scanner,
    expected_joints: usize,
    quantum: f64,
    end: BlockEnd,
) -> Result<(Vec<JointFrame>, Option<TrailingGarbage>), ContextError> {
    let mut frames: Vec<JointFrame> = Vec::new();
    loop {
        scanner.skip_blank_lines();
        match scanner.peek() {
            None => return Ok((frames, None)),
            Some(b'(') => {
                let joints = scanner.parse_triple_line(quantum)?;
                if joints.len() != expected_joints {
                    return Err(ContextError::WrongArity {
                        frame: frames.len(),
                        expected: expected_joints,
                        got: joints.len(),
                    });
                }
                frames.push(JointFrame {
                    frame_id: frames.len(),
                    joints,
                });
            }
            Some(_) => {
                if end == BlockEnd::PromptStrict {
                    if scanner.at_literal(b"input:") {
                        return Ok((frames, None));
                    }
                    return Err(scanner.malformed("expected a frame line or \"input:\""));
                }
                if frames.is_empty() {
                    return Err(scanner.malformed("expected '(' opening a coordinate triple"));
                }
                let offset = scanner.pos;
                let rest = String::from_utf8_lossy(&scanner.bytes[offset..]);
                let preview: String = rest.chars().take(40).collect();
                return Ok((frames, Some(TrailingGarbage { offset, preview })));
            }
        }
    }
}

/// Strictly parses completion text into a trajectory with frame ids 0..T-1.
/// Trailing text that cannot start a frame is reported, not fatal; anything
/// that opens a triple must parse completely, so truncation mid-triple is an
/// error with the byte offset of the failure.
pub fn parse_trajectory(
    raw: &str,
    expected_joints: usize,
    quantum: f64,
) -> Result<ParsedTrajectory, ContextError> {
    check_quantum(quantum)?;
    if expected_joints == 0 {
        return Err(ContextError::MalformedOutput {
            offset: 0,
            detail: "expected joint count must be at least 1".into(),
        });
    }
    let mut scanner = Scanner::new(raw);
    let (frames, trailing_garbage) =
        parse_frame_block(&mut scanner, expected_joints, quantum, BlockEnd::CompletionTail)?;
    if frames.is_empty() {
        return Err(ContextError::MalformedOutput {
            offset: scanner.pos,
            detail: "output contains no frames".into(),
        });
    }
    let trajectory = HandTrajectory::new("generated".into(), frames)?;
    Ok(ParsedTrajectory {
        trajectory,
        trailing_garbage,
    })
}

/// Reads a prompt back into examples plus the live keypoint set, using the
/// prompt's own shape metadata. Example clip ids are positional
/// ("example-0", ...); original ids are not part of the grammar.
pub fn parse_prompt(
    prompt: &SerializedPrompt,
) -> Result<(Vec<ContextExample>, KeypointSet), ContextError> {
    let meta = &prompt.metadata;
    check_quantum(meta.quantum)?;
    let mut scanner = Scanner::new(&prompt.text);
    let mut examples = Vec::new();
    loop {
        scanner.skip_blank_lines();
        scanner.expect_literal(b"input:")?;
        scanner.skip_blanks();
        let points = scanner.parse_triple_line(meta.quantum)?;
        if points.len() != meta.keypoint_count {
            return Err(scanner.malformed(format!(
                "expected {} keypoints, found {}",
                meta.keypoint_count,
                points.len()
            )));
        }
        scanner.skip_blank_lines();
        scanner.expect_literal(b"output:")?;
        scanner.skip_blanks();
        if !scanner.at_eof() {
            scanner.expect(b'\n')?;
        }
        let (frames, _) = parse_frame_block(
            &mut scanner,
            meta.joint_count,
            meta.quantum,
            BlockEnd::PromptStrict,
        )?;
        scanner.skip_blank_lines();
        match (frames.is_empty(), scanner.at_eof()) {
            // "output:" with no frames and nothing after it is the live block.
            (true, true) => {
                let live = KeypointSet {
                    frame_id: 0,
                    points,
                };
                return Ok((examples, live));
            }
            (true, false) => {
                return Err(scanner.malformed("example block has no output frames"));
            }
            (false, true) => {
                return Err(scanner.malformed("prompt ends without a live keypoint block"));
            }
            (false, false) => {
                let trajectory =
                    HandTrajectory::new(format!("example-{}", examples.len()), frames)?;
                examples.push(ContextExample {
                    keypoints: KeypointSet {
                        frame_id: examples.len(),
                        points,
                    },
                    trajectory,
                });
            }
        }
    }
}

/// Restores generated trajectories from the centroid-normalized frame back
/// into the live observation's frame.
#[derive(Clone, Debug)]
pub struct Denormalizer {
    shift: Vector3<f64>,
}

impl Denormalizer {
    pub fn shift(&self) -> Vector3<f64> {
        self.shift
    }

    pub fn restore(&self, trajectory: &HandTrajectory) -> Result<HandTrajectory, ContextError> {
        Ok(shift_trajectory(trajectory, self.shift)?)
    }

    pub fn restore_point(&self, p: Point3) -> Point3 {
        Point3::from_vector(p.to_vector() + self.shift)
    }
}

fn shift_points(points: &[Point3], delta: Vector3<f64>) -> Vec<Point3> {
    points
        .iter()
        .map(|p| Point3::from_vector(p.to_vector() + delta))
        .collect()
}

fn shift_trajectory(traj: &HandTrajectory, delta: Vector3<f64>) -> Result<HandTrajectory, HandError> {
    let frames = traj
        .frames()
        .iter()
        .map(|f| JointFrame {
            frame_id: f.frame_id,
            joints: shift_points(&f.joints, delta),
        })
        .collect();
    HandTrajectory::new(traj.clip_id().to_string(), frames)
}

/// Translates each example (keypoints and trajectory together) so its own
/// keypoint centroid is the origin, and the live set likewise. The returned
/// denormalizer moves generated trajectories back into the live frame.
pub fn normalize_frame(
    examples: &[ContextExample],
    live: &KeypointSet,
) -> Result<(Vec<ContextExample>, KeypointSet, Denormalizer), ContextError> {
    if examples.is_empty() {
        return Err(ContextError::EmptyContext);
    }
    if live.points.is_empty() {
        return Err(ContextError::DegenerateKeypoints(
            "live keypoint set is empty".into(),
        ));
    }
    let mut normalized = Vec::with_capacity(examples.len());
    for example in examples {
        let delta = -example.keypoints.centroid();
        normalized.push(ContextExample {
            keypoints: KeypointSet {
                frame_id: example.keypoints.frame_id,
                points: shift_points(&example.keypoints.points, delta),
            },
            trajectory: shift_trajectory(&example.trajectory, delta)?,
        });
    }
    let live_centroid = live.centroid();
    let live_normalized = KeypointSet {
        frame_id: live.frame_id,
        points: shift_points(&live.points, -live_centroid),
    };
    Ok((
        normalized,
        live_normalized,
        Denormalizer {
            shift: live_centroid,
        },
    ))
}

/// Applies one random rigid motion (uniform-axis rotation with angle drawn
/// from [0, rotation_range], translation drawn per axis from
/// [-translation_range, translation_range]) to the example's keypoints and
/// every trajectory frame. Deterministic under the seed; zero ranges produce
/// the example unchanged. Negative or non-finite ranges are treated as zero.
pub fn augment(
    example: &ContextExample,
    seed: u64,
    translation_range: f64,
    rotation_range: f64,
) -> ContextExample {
    let t_range = if translation_range.is_finite() {
        translation_range.max(0.0)
    } else {
        0.0
    };
    let r_range = if rotation_range.is_finite() {
        rotation_range.max(0.0)
    } else {
        0.0
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (axis, angle) = if r_range > 0.0 {
        // Archimedes' sphere sampling: z uniform, azimuth uniform.
        let z: f64 = rng.gen_range(-1.0..=1.0);
        let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let r = (1.0 - z * z).max(0.0).sqrt();
        (
            Vector3::new(r * phi.cos(), r * phi.sin(), z),
            rng.gen_range(0.0..=r_range),
        )
    } else {
        (Vector3::z(), 0.0)
    };
    let translation = if t_range > 0.0 {
        Vector3::new(
            rng.gen_range(-t_range..=t_range),
            rng.gen_range(-t_range..=t_range),
            rng.gen_range(-t_range..=t_range),
        )
    } else {
        Vector3::zeros()
    };
    let g = RigidTransform::from_axis_angle(axis, angle, translation);
    ContextExample {
        keypoints: KeypointSet {
            frame_id: example.keypoints.frame_id,
            points: example.keypoints.points.iter().map(|p| g.apply(*p)).collect(),
        },
        trajectory: transform_trajectory(&g, &example.trajectory)
            .expect("rigid motion of finite joints stays finite"),
    }
}

struct WarpChoice {
    residual_rms: f64,
    trajectory: HandTrajectory,
}

fn fit_rms(pose: &RigidTransform, sources: &[Point3], targets: &[Point3]) -> f64 {
    let sum: f64 = sources
        .iter()
        .zip(targets)
        .map(|(s, t)| {
            let d = pose.apply(*s).distance(t);
            d * d
        })
        .sum();
    (sum / sources.len() as f64).sqrt()
}

fn best_warp(examples: &[ContextExample], live: &KeypointSet) -> Result<WarpChoice, ContextError> {
    if examples.is_empty() {
        return Err(ContextError::EmptyContext);
    }
    let mut best: Option<(usize, f64, RigidTransform)> = None;
    for (index, example) in examples.iter().enumerate() {
        if example.keypoint_count() != live.points.len() {
            return Err(ContextError::KeypointCountMismatch {
                live: live.points.len(),
                example: example.keypoint_count(),
                index,
            });
        }
        let g = estimate_rigid_transform(&example.keypoints.points, &live.points).map_err(
            |e| ContextError::DegenerateKeypoints(format!("example {index}: {e}")),
        )?;
        let rms = fit_rms(&g, &example.keypoints.points, &live.points);
        // Strict < keeps the lowest index on ties.
        if best.as_ref().map_or(true, |(_, b, _)| rms < *b) {
            best = Some((index, rms, g));
        }
    }
    let (index, residual_rms, g) = best.expect("examples is nonempty");
    let trajectory = transform_trajectory(&g, &examples[index].trajectory)?;
    Ok(WarpChoice {
        residual_rms,
        trajectory,
    })
}

/// Deterministic local baseline: rigidly fits every example's keypoints onto
/// the live keypoints, picks the example with the smallest RMS residual (ties
/// go to the lowest index), and returns its trajectory mapped through the
/// winning transform. The output keeps the winning example's clip id.
pub fn nearest_context_warp(
    examples: &[ContextExample],
    live: &KeypointSet,
) -> Result<HandTrajectory, ContextError> {
    best_warp(examples, live).map(|choice| choice.trajectory)
}

/// `nearest_context_warp` exposed through the backend interface: parses the
/// prompt text, warps, and serializes the winning trajectory as completion
/// text. Exercises the full grammar in both directions.
#[derive(Clone, Copy, Debug, Default)]
pub struct NearestContextBackend;

impl SequenceBackend for NearestContextBackend {
    fn complete(&self, prompt: &SerializedPrompt) -> Result<String, ContextError> {
        let (examples, live) = parse_prompt(prompt)?;
        let choice = best_warp(&examples, &live)?;
        serialize_trajectory(&choice.trajectory, prompt.metadata.quantum)
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn name(&self) -> &str {
        "nearest-context"
    }
}

/// Remote sequence model reached over HTTP: POST /complete with the prompt
/// text, expecting `{"completion": "..."}` back.
pub struct LlmApiBackend {
    http: HttpConfig,
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct CompletionResponse {
    completion: String,
}

impl LlmApiBackend {
    pub fn new(http: HttpConfig) -> Self {
        LlmApiBackend { http }
    }
}

impl SequenceBackend for LlmApiBackend {
    fn complete(&self, prompt: &SerializedPrompt) -> Result<String, ContextError> {
        let request = CompletionRequest {
            prompt: &prompt.text,
        };
        let response: CompletionResponse = post_json(&self.http, "/complete", &request)?;
        Ok(response.completion)
    }

    fn is_deterministic(&self) -> bool {
        false
    }

    fn name(&self) -> &str {
        "llm-api"
    }
}

#[derive(Clone, Debug)]
pub struct GenerationConfig {
    pub quantum: f64,
    /// Extra attempts after the first failed completion or parse.
    pub retries: u32,
    /// Generated trajectories are truncated to this many frames.
    pub max_steps: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            quantum: 0.001,
            retries: 2,
            max_steps: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationMeta {
    /// True when the backend never produced a parseable completion and the
    /// nearest-context baseline supplied the result instead.
    pub fallback_used: bool,
    /// Name of the configured backend (even when the fallback produced the
    /// trajectory).
    pub backend: String,
    /// RMS keypoint-fit residual of the chosen example; only known on the
    /// fallback path.
    pub residual_rms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedTrajectory {
    pub trajectory: HandTrajectory,
    pub meta: GenerationMeta,
}

#[derive(Serialize, Deserialize)]
struct GeneratedDto {
    frames: Vec<JointFrame>,
    meta: GenerationMeta,
}

impl GeneratedTrajectory {
    /// Compact artifact form: frames plus metadata, without the clip id.
    /// Embedding contexts use the derived serde impls, which keep it.
    pub fn to_json(&self) -> String {
        let dto = GeneratedDto {
            frames: self.trajectory.frames().to_vec(),
            meta: self.meta.clone(),
        };
        serde_json::to_string_pretty(&dto).expect("generated trajectory serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ContextError> {
        let dto: GeneratedDto = serde_json::from_str(text)?;
        Ok(GeneratedTrajectory {
            trajectory: HandTrajectory::new("generated".into(), dto.frames)?,
            meta: dto.meta,
        })
    }
}

fn truncate_frames(traj: HandTrajectory, cap: usize) -> Result<HandTrajectory, ContextError> {
    if traj.len() <= cap {
        return Ok(traj);
    }
    let frames = traj.frames()[..cap].to_vec();
    Ok(HandTrajectory::new(traj.clip_id().to_string(), frames)?)
}

/// Runs the full generation pass: centroid-normalize, serialize, complete,
/// parse, denormalize. A failed completion or parse is retried up to
/// `config.retries` more times; if every attempt fails the nearest-context
/// baseline answers directly in the live frame (so the denormalizer is
/// applied exactly once overall, on the backend path only). Errors out only
/// when the baseline fails too.
pub fn generate_trajectory(
    backend: &dyn SequenceBackend,
    examples: &[ContextExample],
    live: &KeypointSet,
    config: &GenerationConfig,
) -> Result<GeneratedTrajectory, ContextError> {
    let cap = config.max_steps.max(1);
    let (norm_examples, norm_live, denormalizer) = normalize_frame(examples, live)?;
    let prompt = serialize_context(&norm_examples, &norm_live, config.quantum)?;
    let expected_joints = prompt.metadata.joint_count;

    let attempts = config.retries + 1;
    let mut last_error = None;
    for _ in 0..attempts {
        let attempt = backend
            .complete(&prompt)
            .and_then(|raw| parse_trajectory(&raw, expected_joints, config.quantum));
        match attempt {
            Ok(parsed) => {
                let truncated = truncate_frames(parsed.trajectory, cap)?;
                return Ok(GeneratedTrajectory {
                    trajectory: denormalizer.restore(&truncated)?,
                    meta: GenerationMeta {
                        fallback_used: false,
                        backend: backend.name().to_string(),
                        residual_rms: None,
                    },
                });
            }
            Err(e) => last_error = Some(e),
        }
    }

    match best_warp(examples, live) {
        Ok(choice) => Ok(GeneratedTrajectory {
            trajectory: truncate_frames(choice.trajectory, cap)?,
            meta: GenerationMeta {
                fallback_used: true,
                backend: backend.name().to_string(),
                residual_rms: Some(choice.residual_rms),
            },
        }),
        Err(baseline_error) => Err(ContextError::GenerationFailed {
            attempts,
            source: Box::new(match last_error {
                // The baseline error explains why nothing could be produced;
                // the last backend error is usually just garbage text.
                Some(_) | None => baseline_error,
            }),
        }),
    }
}

/// Restricts a full 21-joint trajectory to the four joints each heuristic
/// serializes, in the order the gripper retargeting expects:
/// grasp [index_tip, thumb_tip, index_mcp, thumb_dip];
/// press [index_tip, index_dip, index_pip, index_mcp];
/// push the index/middle midpoints at tip, dip, pip, and mcp.
pub fn heuristic_joint_subset(
    trajectory: &HandTrajectory,
    heuristic: HeuristicKind,
) -> Result<HandTrajectory, ContextError> {
    if trajectory.arity() != JOINT_COUNT {
        return Err(ContextError::JointCountMismatch {
            expected: JOINT_COUNT,
            got: trajectory.arity(),
            index: 0,
        });
    }
    let mut frames = Vec::with_capacity(trajectory.len());
    for frame in trajectory.frames() {
        let joints: [Point3; JOINT_COUNT] = frame
            .joints
            .as_slice()
            .try_into()
            .expect("arity checked above");
        let full = HandJointFrame::new(frame.frame_id, joints)?;
        let subset = match heuristic {
            HeuristicKind::Grasp => vec![
                full.index_tip(),
                full.thumb_tip(),
                full.index_mcp(),
                full.thumb_dip(),
            ],
            HeuristicKind::Press => vec![
                full.index_tip(),
                full.index_dip(),
                full.index_pip(),
                full.index_mcp(),
            ],
            HeuristicKind::Push => vec![
                full.index_tip().midpoint(&full.middle_tip()),
                full.index_dip().midpoint(&full.middle_dip()),
                full.index_pip().midpoint(&full.middle_pip()),
                full.index_mcp().midpoint(&full.middle_mcp()),
            ],
        };
        frames.push(JointFrame {
            frame_id: frame.frame_id,
            joints: subset,
        });
    }
    Ok(HandTrajectory::new(trajectory.clip_id().to_string(), frames)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_support::random_transform;
    use std::cell::Cell;

    fn keypoints(frame_id: usize, points: Vec<Point3>) -> KeypointSet {
        KeypointSet { frame_id, points }
    }

    /// Four non-coplanar keypoints and a 3-frame, 2-joint trajectory.
    fn example_fixture(clip: &str, shift: f64) -> ContextExample {
        let points = vec![
            Point3::new(shift, 0.0, 0.4),
            Point3::new(shift + 0.2, 0.0, 0.4),
            Point3::new(shift, 0.2, 0.45),
            Point3::new(shift + 0.1, 0.1, 0.6),
        ];
        let frames = (0..3)
            .map(|t| JointFrame {
                frame_id: t,
                joints: vec![
                    Point3::new(shift + 0.01 * t as f64, 0.05, 0.5),
                    Point3::new(shift + 0.01 * t as f64, -0.05, 0.52),
                ],
            })
            .collect();
        ContextExample {
            keypoints: keypoints(0, points),
            trajectory: HandTrajectory::new(clip.into(), frames).unwrap(),
        }
    }

    /// Non-rigid shape change on top of the base fixture, so fixtures with
    /// different `warp` values are not rigidly equivalent and best-fit
    /// residuals separate cleanly.
    fn shaped_fixture(clip: &str, shift: f64, warp: f64) -> ContextExample {
        let mut e = example_fixture(clip, shift);
        let p = e.keypoints.points[3];
        e.keypoints.points[3] = Point3::new(p.x, p.y + warp, p.z - warp);
        e
    }

    fn assert_trajectories_close(a: &HandTrajectory, b: &HandTrajectory, tol: f64) {
        assert_eq!(a.len(), b.len());
        assert_eq!(a.arity(), b.arity());
        for (fa, fb) in a.frames().iter().zip(b.frames()) {
            for (pa, pb) in fa.joints.iter().zip(&fb.joints) {
                assert!(
                    pa.distance(pb) <= tol,
                    "joints differ by {} (tol {tol})",
                    pa.distance(pb)
                );
            }
        }
    }

    /// Per-coordinate bound, for quantization round trips where the
    /// guarantee is quantum/2 on each axis, not on the Euclidean distance.
    fn assert_coords_close(a: &HandTrajectory, b: &HandTrajectory, tol: f64) {
        assert_eq!(a.len(), b.len());
        assert_eq!(a.arity(), b.arity());
        for (fa, fb) in a.frames().iter().zip(b.frames()) {
            for (pa, pb) in fa.joints.iter().zip(&fb.joints) {
                for (x, y) in [(pa.x, pb.x), (pa.y, pb.y), (pa.z, pb.z)] {
                    assert!((x - y).abs() <= tol, "coordinate off by {} (tol {tol})", (x - y).abs());
                }
            }
        }
    }

    struct FnBackend<F: Fn(&SerializedPrompt) -> Result<String, ContextError>> {
        f: F,
        calls: Cell<u32>,
    }

    impl<F: Fn(&SerializedPrompt) -> Result<String, ContextError>> FnBackend<F> {
        fn new(f: F) -> Self {
            FnBackend {
                f,
                calls: Cell::new(0),
            }
        }
    }

    impl<F: Fn(&SerializedPrompt) -> Result<String, ContextError>> SequenceBackend for FnBackend<F> {
        fn complete(&self, prompt: &SerializedPrompt) -> Result<String, ContextError> {
            self.calls.set(self.calls.get() + 1);
            (self.f)(prompt)
        }

        fn is_deterministic(&self) -> bool {
            true
        }

        fn name(&self) -> &str {
            "test"
        }
    }

    #[test]
    fn quantization_rounds_half_away_from_zero() {
        assert_eq!(quantize(0.1234, 0.001), 123);
        assert_eq!(quantize(0.5, 0.001), 500);
        assert_eq!(quantize(0.0005, 0.001), 1);
        assert_eq!(quantize(-0.0005, 0.001), -1);
        assert_eq!(quantize(0.0, 0.001), 0);
        assert_eq!(dequantize(123, 0.001), 0.123);
    }

    #[test]
    fn serializer_emits_the_documented_grammar() {
        let example = ContextExample {
            keypoints: keypoints(
                0,
                vec![Point3::new(0.1234, 0.0, 0.5), Point3::new(1.0, 2.0, 3.0)],
            ),
            trajectory: HandTrajectory::new(
                "c".into(),
                vec![JointFrame {
                    frame_id: 0,
                    joints: vec![Point3::new(0.01, 0.02, 0.03), Point3::new(0.04, 0.05, 0.06)],
                }],
            )
            .unwrap(),
        };
        let live = keypoints(5, vec![Point3::new(-0.001, 0.0, 0.002), Point3::new(0.0, 0.0, 0.0)]);
        let prompt = serialize_context(&[example], &live, 0.001).unwrap();
        let expected = "input: (123, 0, 500) (1000, 2000, 3000)\n\
                        output:\n\
                        (10, 20, 30) (40, 50, 60)\n\
                        input: (-1, 0, 2) (0, 0, 0)\n\
                        output:\n";
        assert_eq!(prompt.text, expected);
        assert_eq!(prompt.metadata.keypoint_count, 2);
        assert_eq!(prompt.metadata.example_count, 1);
        assert_eq!(prompt.metadata.frame_counts, vec![1]);
        assert_eq!(prompt.metadata.joint_count, 2);
    }

    #[test]
    fn keypoint_count_mismatch_is_rejected() {
        let example = example_fixture("a", 0.0);
        let live = keypoints(0, vec![Point3::new(0.0, 0.0, 0.5); 3]);
        match serialize_context(&[example], &live, 0.001) {
            Err(ContextError::KeypointCountMismatch { live: 3, example: 4, index: 0 }) => {}
            other => panic!("expected k-mismatch, got {other:?}"),
        }
    }

    #[test]
    fn empty_context_is_rejected() {
        let live = keypoints(0, vec![Point3::new(0.0, 0.0, 0.5)]);
        assert!(matches!(
            serialize_context(&[], &live, 0.001),
            Err(ContextError::EmptyContext)
        ));
        assert!(matches!(
            serialize_context(&[example_fixture("a", 0.0)], &live, 0.0),
            Err(ContextError::BadQuantum { .. })
        ));
    }

    #[test]
    fn parser_reads_a_well_formed_completion() {
        let raw = "(10, 20, 30) (40, 50, 60)\n(11, 21, 31) (41, 51, 61)\n(12, 22, 32) (42, 52, 62)\n";
        let parsed = parse_trajectory(raw, 2, 0.001).unwrap();
        assert_eq!(parsed.trajectory.len(), 3);
        assert_eq!(parsed.trajectory.arity(), 2);
        assert!(parsed.trailing_garbage.is_none());
        let first = &parsed.trajectory.frames()[0];
        assert_eq!(first.frame_id, 0);
        assert!((first.joints[0].x - 0.010).abs() < 1e-12);
        assert!((first.joints[1].z - 0.060).abs() < 1e-12);
    }

    #[test]
    fn truncated_triple_reports_the_byte_offset() {
        let raw = "(1, 2, 3)\n(4";
        match parse_trajectory(raw, 1, 0.001) {
            Err(ContextError::MalformedOutput { offset, .. }) => {
                assert_eq!(offset, raw.len());
            }
            other => panic!("expected malformed output, got {other:?}"),
        }
    }

    #[test]
    fn wrong_arity_names_the_frame() {
        let raw = "(1, 2, 3) (4, 5, 6) (7, 8, 9) (10, 11, 12)\n(1, 2, 3) (4, 5, 6) (7, 8, 9)\n";
        match parse_trajectory(raw, 4, 0.001) {
            Err(ContextError::WrongArity { frame: 1, expected: 4, got: 3 }) => {}
            other => panic!("expected wrong arity, got {other:?}"),
        }
    }

    #[test]
    fn trailing_garbage_is_reported_not_fatal() {
        let raw = "(1, 2, 3)\n(4, 5, 6)\nDone, hope that helps!";
        let parsed = parse_trajectory(raw, 1, 0.001).unwrap();
        assert_eq!(parsed.trajectory.len(), 2);
        let garbage = parsed.trailing_garbage.unwrap();
        assert_eq!(garbage.offset, 20);
        assert!(garbage.preview.starts_with("Done"));

        // Garbage before any complete frame is an error, not a warning.
        assert!(matches!(
            parse_trajectory("no frames here", 1, 0.001),
            Err(ContextError::MalformedOutput { .. })
        ));
        assert!(matches!(
            parse_trajectory("", 1, 0.001),
            Err(ContextError::MalformedOutput { .. })
        ));
    }

    #[test]
    fn round_trip_is_within_half_a_quantum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let arity = rng.gen_range(1..6);
            let frames = (0..rng.gen_range(1..8))
                .map(|t| JointFrame {
                    frame_id: t,
                    joints: (0..arity)
                        .map(|_| {
                            Point3::new(
                                rng.gen_range(-10.0..10.0),
                                rng.gen_range(-10.0..10.0),
                                rng.gen_range(-10.0..10.0),
                            )
                        })
                        .collect(),
                })
                .collect();
            let traj = HandTrajectory::new("t".into(), frames).unwrap();
            let quantum = *[0.001, 0.0001, 0.01].iter().nth(rng.gen_range(0..3)).unwrap();
            let text = serialize_trajectory(&traj, quantum).unwrap();
            let parsed = parse_trajectory(&text, arity, quantum).unwrap();
            assert!(parsed.trailing_garbage.is_none());
            assert_coords_close(&traj, &parsed.trajectory, quantum / 2.0 + 1e-12);
        }
    }

    #[test]
    fn prompt_round_trips_through_the_parser() {
        let examples = vec![example_fixture("a", 0.0), example_fixture("b", 0.3)];
        let live = keypoints(9, example_fixture("c", 0.7).keypoints.points);
        let prompt = serialize_context(&examples, &live, 0.0001).unwrap();
        let (back, live_back) = parse_prompt(&prompt).unwrap();
        assert_eq!(back.len(), 2);
        let tol = 0.0001 / 2.0 + 1e-12;
        let coord_close = |p: &Point3, q: &Point3| {
            (p.x - q.x).abs() <= tol && (p.y - q.y).abs() <= tol && (p.z - q.z).abs() <= tol
        };
        for (orig, parsed) in examples.iter().zip(&back) {
            for (p, q) in orig.keypoints.points.iter().zip(&parsed.keypoints.points) {
                assert!(coord_close(p, q));
            }
            assert_coords_close(&orig.trajectory, &parsed.trajectory, tol);
        }
        for (p, q) in live.points.iter().zip(&live_back.points) {
            assert!(coord_close(p, q));
        }
    }

    #[test]
    fn normalization_centers_and_restores() {
        let example = example_fixture("a", 1.0);
        let live = keypoints(0, shift_points(&example.keypoints.points, Vector3::new(1.0, 2.0, 3.0)));
        let (norm_examples, norm_live, denorm) = normalize_frame(&[example.clone()], &live).unwrap();
        assert!(norm_examples[0].keypoints.centroid().norm() < 1e-12);
        assert!(norm_live.centroid().norm() < 1e-12);
        // Keypoints and trajectory move together.
        let d_before = example.keypoints.points[0].distance(&example.trajectory.frames()[0].joints[0]);
        let d_after = norm_examples[0].keypoints.points[0]
            .distance(&norm_examples[0].trajectory.frames()[0].joints[0]);
        assert!((d_before - d_after).abs() < 1e-12);
        // Restoring a normalized trajectory lands it back near the live frame.
        let restored = denorm.restore(&norm_examples[0].trajectory).unwrap();
        for (r, orig) in restored.frames().iter().zip(example.trajectory.frames()) {
            for (p, q) in r.joints.iter().zip(&orig.joints) {
                // live centroid = example centroid + (1,2,3).
                let expected = Point3::new(q.x + 1.0, q.y + 2.0, q.z + 3.0);
                assert!(p.distance(&expected) < 1e-12);
            }
        }
    }

    #[test]
    fn normalization_is_identity_for_centered_points() {
        let points = vec![
            Point3::new(-0.1, 0.0, 0.0),
            Point3::new(0.1, 0.0, 0.0),
            Point3::new(0.0, -0.1, 0.05),
            Point3::new(0.0, 0.1, -0.05),
        ];
        let example = ContextExample {
            keypoints: keypoints(0, points.clone()),
            trajectory: example_fixture("a", 0.0).trajectory,
        };
        let live = keypoints(0, points.clone());
        let (norm, live_norm, denorm) = normalize_frame(&[example], &live).unwrap();
        assert_eq!(norm[0].keypoints.points, points);
        assert_eq!(live_norm.points, points);
        assert_eq!(denorm.shift(), Vector3::zeros());
    }

    #[test]
    fn augment_with_zero_ranges_is_identity() {
        let example = example_fixture("a", 0.2);
        let out = augment(&example, 7, 0.0, 0.0);
        assert_eq!(out, example);
        let negative = augment(&example, 7, -1.0, f64::NAN);
        assert_eq!(negative, example);
    }

    #[test]
    fn augment_is_deterministic_and_rigid() {
        let example = example_fixture("a", 0.1);
        let once = augment(&example, 42, 0.5, 1.5);
        let twice = augment(&example, 42, 0.5, 1.5);
        assert_eq!(once, twice);
        let other_seed = augment(&example, 43, 0.5, 1.5);
        assert_ne!(once, other_seed);

        // Isometry: pairwise keypoint distances and joint-to-keypoint
        // distances survive the motion.
        let kp = &example.keypoints.points;
        let kp_out = &once.keypoints.points;
        for i in 0..kp.len() {
            for j in (i + 1)..kp.len() {
                assert!((kp[i].distance(&kp[j]) - kp_out[i].distance(&kp_out[j])).abs() < 1e-9);
            }
        }
        for (f, g) in example.trajectory.frames().iter().zip(once.trajectory.frames()) {
            for (a, b) in f.joints.iter().zip(&g.joints) {
                assert!((a.distance(&kp[0]) - b.distance(&kp_out[0])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn warp_recovers_the_generating_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let example = example_fixture("demo", 0.0);
        for _ in 0..100 {
            let g = random_transform(&mut rng);
            let live = keypoints(
                0,
                example.keypoints.points.iter().map(|p| g.apply(*p)).collect(),
            );
            let warped = nearest_context_warp(std::slice::from_ref(&example), &live).unwrap();
            let expected = transform_trajectory(&g, &example.trajectory).unwrap();
            assert_trajectories_close(&warped, &expected, 1e-6);
        }
    }

    #[test]
    fn warp_prefers_the_zero_residual_example() {
        let examples = vec![
            shaped_fixture("first", 0.0, 0.05),
            shaped_fixture("second", 0.5, -0.03),
        ];
        let live = keypoints(0, examples[1].keypoints.points.clone());
        let out = nearest_context_warp(&examples, &live).unwrap();
        assert_eq!(out.clip_id(), "second");
    }

    #[test]
    fn warp_rejects_collinear_keypoints() {
        let example = ContextExample {
            keypoints: keypoints(
                0,
                vec![
                    Point3::new(0.0, 0.0, 0.5),
                    Point3::new(0.1, 0.0, 0.5),
                    Point3::new(0.2, 0.0, 0.5),
                ],
            ),
            trajectory: example_fixture("a", 0.0).trajectory,
        };
        let live = keypoints(0, example.keypoints.points.clone());
        assert!(matches!(
            nearest_context_warp(&[example], &live),
            Err(ContextError::DegenerateKeypoints(_))
        ));
    }

    #[test]
    fn warp_is_equivariant_under_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let examples = vec![
            shaped_fixture("a", 0.0, 0.04),
            shaped_fixture("b", 0.4, -0.06),
        ];
        let live = keypoints(0, shaped_fixture("c", 0.15, 0.01).keypoints.points);
        let base = nearest_context_warp(&examples, &live).unwrap();
        for _ in 0..100 {
            let g = random_transform(&mut rng);
            let moved_live = keypoints(0, live.points.iter().map(|p| g.apply(*p)).collect());
            let moved = nearest_context_warp(&examples, &moved_live).unwrap();
            let expected = transform_trajectory(&g, &base).unwrap();
            assert_trajectories_close(&moved, &expected, 1e-6);
        }
    }

    #[test]
    fn common_motion_leaves_the_selection_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let examples = vec![
            shaped_fixture("a", 0.0, 0.04),
            shaped_fixture("b", 0.4, -0.06),
        ];
        let live = keypoints(0, shaped_fixture("c", 0.33, -0.05).keypoints.points);
        let baseline_choice = best_warp(&examples, &live)
            .unwrap()
            .trajectory
            .clip_id()
            .to_string();
        for _ in 0..20 {
            let g = random_transform(&mut rng);
            let moved_examples: Vec<ContextExample> = examples
                .iter()
                .map(|e| ContextExample {
                    keypoints: keypoints(
                        e.keypoints.frame_id,
                        e.keypoints.points.iter().map(|p| g.apply(*p)).collect(),
                    ),
                    trajectory: transform_trajectory(&g, &e.trajectory).unwrap(),
                })
                .collect();
            let moved_live = keypoints(0, live.points.iter().map(|p| g.apply(*p)).collect());
            let choice = best_warp(&moved_examples, &moved_live).unwrap();
            assert_eq!(choice.trajectory.clip_id(), baseline_choice);
        }
    }

    #[test]
    fn generation_echoes_the_matching_example() {
        let example = example_fixture("demo", 0.2);
        let live = keypoints(0, example.keypoints.points.clone());
        let config = GenerationConfig::default();
        let out = generate_trajectory(
            &NearestContextBackend,
            std::slice::from_ref(&example),
            &live,
            &config,
        )
        .unwrap();
        assert!(!out.meta.fallback_used);
        assert_eq!(out.meta.backend, "nearest-context");
        assert_trajectories_close(&out.trajectory, &example.trajectory, config.quantum);
    }

    #[test]
    fn generation_warps_into_the_live_frame() {
        let example = example_fixture("demo", 0.0);
        let g = RigidTransform::from_axis_angle(
            Vector3::new(0.3, -0.5, 0.8),
            0.9,
            Vector3::new(0.4, -0.1, 0.25),
        );
        let live = keypoints(
            0,
            example.keypoints.points.iter().map(|p| g.apply(*p)).collect(),
        );
        let config = GenerationConfig {
            quantum: 1e-7,
            ..GenerationConfig::default()
        };
        let out = generate_trajectory(
            &NearestContextBackend,
            std::slice::from_ref(&example),
            &live,
            &config,
        )
        .unwrap();
        let expected = transform_trajectory(&g, &example.trajectory).unwrap();
        assert_trajectories_close(&out.trajectory, &expected, 1e-5);
    }

    #[test]
    fn garbage_backend_falls_back_to_the_baseline() {
        let example = example_fixture("demo", 0.0);
        let live = keypoints(0, example.keypoints.points.clone());
        let backend = FnBackend::new(|_| Ok("owls are not triples".into()));
        let config = GenerationConfig::default();
        let out = generate_trajectory(&backend, std::slice::from_ref(&example), &live, &config)
            .unwrap();
        assert!(out.meta.fallback_used);
        assert_eq!(out.meta.backend, "test");
        assert!(out.meta.residual_rms.unwrap() < 1e-9);
        assert_eq!(backend.calls.get(), config.retries + 1);
        assert_trajectories_close(&out.trajectory, &example.trajectory, 1e-9);
    }

    #[test]
    fn one_transient_failure_is_retried() {
        let example = example_fixture("demo", 0.0);
        let live = keypoints(0, example.keypoints.points.clone());
        let inner = NearestContextBackend;
        let backend = FnBackend::new(move |prompt: &SerializedPrompt| {
            thread_local! {
                static FIRST: Cell<bool> = const { Cell::new(true) };
            }
            if FIRST.with(|f| f.replace(false)) {
                Ok("garbled".into())
            } else {
                inner.complete(prompt)
            }
        });
        let out = generate_trajectory(
            &backend,
            std::slice::from_ref(&example),
            &live,
            &GenerationConfig::default(),
        )
        .unwrap();
        assert!(!out.meta.fallback_used);
        assert_eq!(backend.calls.get(), 2);
    }

    #[test]
    fn generation_fails_only_when_the_baseline_does() {
        let example = ContextExample {
            keypoints: keypoints(
                0,
                vec![
                    Point3::new(0.0, 0.0, 0.5),
                    Point3::new(0.1, 0.0, 0.5),
                    Point3::new(0.2, 0.0, 0.5),
                ],
            ),
            trajectory: example_fixture("a", 0.0).trajectory,
        };
        let live = keypoints(0, example.keypoints.points.clone());
        let backend = FnBackend::new(|_| Ok("nope".into()));
        match generate_trajectory(&backend, &[example], &live, &GenerationConfig::default()) {
            Err(ContextError::GenerationFailed { attempts: 3, source }) => {
                assert!(matches!(*source, ContextError::DegenerateKeypoints(_)));
            }
            other => panic!("expected generation failure, got {other:?}"),
        }
    }

    #[test]
    fn long_completions_are_truncated_to_max_steps() {
        let example = example_fixture("demo", 0.0);
        let live = keypoints(0, example.keypoints.points.clone());
        let backend = FnBackend::new(|prompt: &SerializedPrompt| {
            let mut out = String::new();
            for t in 0..100 {
                out.push_str(&format!("({t}, 0, 0) ({t}, 1, 1)\n"));
            }
            let _ = prompt;
            Ok(out)
        });
        let config = GenerationConfig {
            max_steps: 7,
            ..GenerationConfig::default()
        };
        let out = generate_trajectory(&backend, &[example], &live, &config).unwrap();
        assert_eq!(out.trajectory.len(), 7);
    }

    #[test]
    fn generated_trajectory_round_trips_through_json() {
        let example = example_fixture("demo", 0.0);
        let live = keypoints(0, example.keypoints.points.clone());
        let out = generate_trajectory(
            &NearestContextBackend,
            &[example],
            &live,
            &GenerationConfig::default(),
        )
        .unwrap();
        let json = out.to_json();
        assert!(json.contains("\"meta\""));
        assert!(json.contains("\"fallback_used\": false"));
        let back = GeneratedTrajectory::from_json(&json).unwrap();
        assert_eq!(back.meta, out.meta);
        // Bit-exact: serializing uses shortest round-trippable floats and
        // parsing is configured for full precision.
        assert_eq!(back.trajectory.frames(), out.trajectory.frames());
    }

    #[test]
    fn joint_subsets_match_the_retargeting_order() {
        let joints: [Point3; JOINT_COUNT] =
            std::array::from_fn(|i| Point3::new(i as f64 * 0.01, (i % 5) as f64 * 0.02, 0.5));
        let frame = HandJointFrame::new(0, joints).unwrap();
        let traj = HandTrajectory::from_mano("clip".into(), vec![frame.clone()]).unwrap();

        let grasp = heuristic_joint_subset(&traj, HeuristicKind::Grasp).unwrap();
        assert_eq!(grasp.arity(), 4);
        assert_eq!(grasp.clip_id(), "clip");
        assert_eq!(
            grasp.frames()[0].joints,
            vec![frame.index_tip(), frame.thumb_tip(), frame.index_mcp(), frame.thumb_dip()]
        );

        let press = heuristic_joint_subset(&traj, HeuristicKind::Press).unwrap();
        assert_eq!(
            press.frames()[0].joints,
            vec![frame.index_tip(), frame.index_dip(), frame.index_pip(), frame.index_mcp()]
        );

        let push = heuristic_joint_subset(&traj, HeuristicKind::Push).unwrap();
        assert_eq!(
            push.frames()[0].joints[0],
            frame.index_tip().midpoint(&frame.middle_tip())
        );

        // Subsets of subsets are rejected.
        assert!(matches!(
            heuristic_joint_subset(&grasp, HeuristicKind::Grasp),
            Err(ContextError::JointCountMismatch { .. })
        ));
    }
}

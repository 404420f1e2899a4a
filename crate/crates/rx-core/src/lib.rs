//! rx-core: turn an unlabelled egocentric video and a language command into
//! a gripper trajectory.
//!
//! The pipeline has two halves. Retrieval asks a vision-language client which
//! parts of a long recording show the commanded task and cuts them into
//! clips. Execution turns those clips into sparse 3D context (common visual
//! keypoints plus stabilized hand trajectories), asks a sequence backend to
//! complete the trajectory for the live scene, and maps the result onto a
//! parallel-jaw gripper.
//!
//! Modules follow the data flow:
//!
//! - [`geometry`]: points, rigid transforms, pinhole camera, registration
//! - [`descriptors`]: patch descriptor grids, common-keypoint selection
//! - [`stabilization`]: camera-motion removal against the first clip frame
//! - [`hands`]: 21-joint hand trajectories and presence filtering
//! - [`gripper`]: hand-to-gripper retargeting heuristics
//! - [`retrieval`]: recordings, clip spans, VLM clients, span metrics
//! - [`context`]: prompt serialization, sequence backends, trajectory
//!   generation with a deterministic geometric fallback
//! - [`pipeline`]: end-to-end orchestration, config, and exports
//! - [`synth`]: synthetic recordings for tests, demos, and documentation

pub mod context;
pub mod descriptors;
pub mod geometry;
pub mod gripper;
pub mod hands;
pub mod pipeline;
pub mod retrieval;
pub mod stabilization;
pub mod synth;
pub mod transport;

#[cfg(test)]
pub(crate) mod test_support;

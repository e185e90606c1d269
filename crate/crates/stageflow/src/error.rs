//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Task cannot be instantiated: empty sub-task order or no room to place entities.
    #[error("degenerate task: {0}")]
    DegenerateTask(String),

    /// The scripted expert failed to complete the task within its retry budget.
    #[error("scripted expert failed after {attempts} attempts on task {task_id} (seed {seed})")]
    ExpertFailure {
        task_id: u32,
        seed: u64,
        attempts: u32,
    },

    /// A trajectory contains non-finite state components.
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),

    /// Key-pose indices are not strictly increasing / contain duplicates.
    #[error("invalid key poses: {0}")]
    InvalidKeys(String),

    /// Empty sequence passed to an alignment routine.
    #[error("invalid sequence: {0}")]
    InvalidSequence(String),

    /// DTW alignment left a stage with zero query timesteps.
    #[error("alignment degenerate: stage {stage} received no timesteps")]
    AlignmentDegenerate { stage: usize },

    /// No timestep carries the requested stage label.
    #[error("empty stage: no timesteps labeled {stage}")]
    EmptyStage { stage: usize },

    /// Training loss became non-finite.
    #[error("training failure: {0}")]
    TrainingFailure(String),

    /// Shape or domain violation at an operation boundary.
    #[error("contract violation: {0}")]
    Contract(String),

    /// No candidate window satisfies the stage-neighborhood constraint.
    #[error("retrieval found no candidate for stage {k_cur} in a library of {demos} demos")]
    RetrievalEmpty { k_cur: usize, demos: usize },

    /// An episode produced a non-finite action and was aborted.
    #[error("episode aborted at step {step}: non-finite action")]
    AbortedEpisode { step: usize },

    /// Serialized artifact carries an unknown version tag.
    #[error("version mismatch in {path}: expected `{expected}`, found `{found}`")]
    VersionMismatch {
        path: String,
        expected: String,
        found: String,
    },

    /// Loaded artifact violates a structural invariant.
    #[error("invariant violation in {path}: {reason}")]
    InvariantViolation { path: String, reason: String },

    /// Malformed artifact file.
    #[error("parse error in {path}: {reason}")]
    Parse { path: String, reason: String },

    /// Required artifacts are missing for the requested run.
    #[error("preflight failed, missing artifacts: {0:?}")]
    Preflight(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

//! Stage-segmented demonstration memory for a small flow-matching policy.
//!
//! The crate covers the whole loop at desk scale:
//!
//! - [`simenv`]: a planar pick-and-place simulator with a scripted expert
//!   producing demonstrations;
//! - [`segment`]: RDP key-pose extraction, midpoint stage boundaries, and
//!   DTW label transfer across demonstrations;
//! - [`policy`]: a dense flow-matching network over action chunks with
//!   prompt-token conditioning, trained on the demonstrations;
//! - [`memory`]: per-stage soft prompts tuned against the frozen policy and
//!   persisted alongside the trajectories that produced them;
//! - [`retrieval`]: windowed l2 search over stored trajectories under a
//!   stage-neighborhood constraint;
//! - [`execution`]: the observe / retrieve / dual-forward / ensemble loop;
//! - [`harness`]: experiment driver, evaluation matrix and reports.
//!
//! Batch work (rollouts, stage tuning, retrieval scans, gradient chunks)
//! runs through [`par`], which parallelizes with rayon under the `parallel`
//! feature (default) and degrades to sequential iteration without it;
//! results are bit-identical either way.

pub mod error;
pub mod execution;
pub mod harness;
pub mod memory;
pub mod par;
pub mod policy;
pub mod retrieval;
pub mod rng;
pub mod segment;
pub mod simenv;
pub mod textio;

pub use error::{Error, Result};

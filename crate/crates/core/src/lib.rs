//! Core building blocks for training and evaluating generative models of
//! single-day human mobility trajectories.
//!
//! - [`grid`]: spatial and temporal discretization.
//! - [`traj`]: visits, trajectories, constraints, validity checks.
//! - [`ingest`]: raw GPS records to staypoint trajectories.
//! - [`encode`]: the token vocabulary, codec and visit permutation.
//! - [`metrics`]: distributional realism metrics.
//! - [`io`]: JSONL file formats shared by every tool.

pub mod encode;
pub mod grid;
pub mod ingest;
pub mod io;
pub mod metrics;
pub mod rng;
pub mod traj;

pub use encode::{CodecError, TokenId, TokenSequence, Vocabulary};
pub use grid::{GridError, GridSpec, TimeSpec};
pub use traj::{
    Constraint, ConstraintSet, SatisfactionReport, Trajectory, TrajectoryDataset, Violation,
    Visit,
};

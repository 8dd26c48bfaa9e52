//! Turning a trained model into trajectories: prompts, temperature
//! sampling, the decode/reorder/check retry loop, the forcible-insert
//! baseline and constraint sets drawn from data.

pub mod constraints;
pub mod error;
pub mod fi;
pub mod pipeline;
pub mod prompt;
pub mod sample;

pub use constraints::{make_constraints, ConstraintParams};
pub use error::{GenError, Result};
pub use fi::forcible_insert;
pub use pipeline::{
    generate_many, generate_trajectory, generated_id, summarize, FailureReason, GenContext, GenMode,
    GenerationOutcome, RunSummary,
};
pub use prompt::{
    build_controlled_prompt, build_uncontrolled_prompt, encode_controlled_prompt, materialize_constraints,
    DurationDistribution,
};
pub use sample::{generate_sequence, sample_next, CachedModel, Continuation, GenConfig, NextToken};

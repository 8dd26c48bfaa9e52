use std::collections::BTreeMap;

use thiserror::Error;
use trajforge_lm::LmError;

use crate::pipeline::FailureReason;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
    #[error("logits contain NaN or infinity")]
    NonFiniteLogits,
    #[error("constraint set is empty")]
    EmptyConstraintSet,
    #[error("constraint {index} does not fit the vocabulary")]
    InvalidConstraint { index: usize },
    #[error("constraints keep drawing the same arrival slot")]
    UnresolvableCollision,
    #[error("constraints cannot all be inserted")]
    Unsatisfiable,
    #[error("no valid trajectory after {attempts} attempts ({})", summarize(reasons))]
    RetriesExhausted { attempts: usize, reasons: BTreeMap<FailureReason, usize> },
    #[error(transparent)]
    Model(#[from] LmError),
}

fn summarize(reasons: &BTreeMap<FailureReason, usize>) -> String {
    reasons.iter().map(|(r, n)| format!("{}: {n}", r.as_str())).collect::<Vec<_>>().join(", ")
}

pub type Result<T, E = GenError> = std::result::Result<T, E>;

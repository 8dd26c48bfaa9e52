//! Sample, decode, reorder, check, retry.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use trajforge_core::{rng, ConstraintSet, GridSpec, SatisfactionReport, TimeSpec, Trajectory, Visit, Vocabulary};

use crate::error::{GenError, Result};
use crate::prompt::{build_uncontrolled_prompt, encode_controlled_prompt, materialize_constraints, DurationDistribution};
use crate::sample::{generate_sequence, GenConfig, NextToken};

/// Why one attempt was rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureReason {
    /// Token budget or context exhausted before `<EOS>`.
    NoEos,
    Parse,
    DuplicateArrival,
    Invalid,
    /// A prompted constraint visit is missing from the decoded output.
    ConstraintLost,
    ConstraintUnsatisfied,
}

impl FailureReason {
    pub fn as_str(self) -> &'static str {
        match self {
            FailureReason::NoEos => "no-eos",
            FailureReason::Parse => "parse",
            FailureReason::DuplicateArrival => "duplicate-arrival",
            FailureReason::Invalid => "invalid",
            FailureReason::ConstraintLost => "constraint-lost",
            FailureReason::ConstraintUnsatisfied => "constraint-unsatisfied",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum GenMode<'a> {
    Uncontrolled,
    Controlled(&'a ConstraintSet),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationOutcome {
    pub trajectory: Trajectory,
    pub attempts: usize,
    /// Present in controlled mode; always all true.
    pub constraint_report: Option<SatisfactionReport>,
    /// Rejected attempts before the accepted one.
    pub failures: BTreeMap<FailureReason, usize>,
}

/// Everything needed to turn tokens back into checked trajectories.
#[derive(Debug, Clone)]
pub struct GenContext<'a> {
    pub vocab: &'a Vocabulary,
    pub grid: &'a GridSpec,
    pub timespec: &'a TimeSpec,
    pub durations: &'a DurationDistribution,
}

/// Decodes `tokens` and reorders visits by arrival; the reason on failure.
fn check_attempt(
    tokens: &trajforge_core::TokenSequence,
    prompted: &[Visit],
    cs: Option<&ConstraintSet>,
    ctx: &GenContext<'_>,
) -> std::result::Result<(Trajectory, Option<SatisfactionReport>), FailureReason> {
    let mut traj = ctx.vocab.decode(tokens).map_err(|_| FailureReason::Parse)?;
    traj.visits.sort_by_key(|v| v.arrival);
    if traj.visits.windows(2).any(|w| w[0].arrival == w[1].arrival) {
        return Err(FailureReason::DuplicateArrival);
    }
    traj.validate(ctx.timespec, ctx.grid).map_err(|_| FailureReason::Invalid)?;
    let Some(cs) = cs else { return Ok((traj, None)) };
    if !prompted.iter().all(|p| traj.visits.contains(p)) {
        return Err(FailureReason::ConstraintLost);
    }
    let report = traj.satisfies_all(cs);
    if !report.all() {
        return Err(FailureReason::ConstraintUnsatisfied);
    }
    Ok((traj, Some(report)))
}

/// Generates one checked trajectory, retrying the whole sequence (with a
/// fresh prompt draw in controlled mode) on any failure.
pub fn generate_trajectory<R: Rng + ?Sized>(
    model: &mut dyn NextToken,
    mode: GenMode<'_>,
    gc: &GenConfig,
    ctx: &GenContext<'_>,
    rng: &mut R,
) -> Result<GenerationOutcome> {
    gc.validate()?;
    let attempts = gc.max_retries.max(1);
    let mut failures = BTreeMap::new();
    for attempt in 1..=attempts {
        let (prompt, prompted, cs) = match mode {
            GenMode::Uncontrolled => (build_uncontrolled_prompt(ctx.vocab), Vec::new(), None),
            GenMode::Controlled(cs) => {
                let visits = materialize_constraints(cs, ctx.vocab, ctx.durations, rng)?;
                (encode_controlled_prompt(&visits, ctx.vocab)?, visits, Some(cs))
            }
        };
        let out = generate_sequence(model, &prompt, gc, rng)?;
        let checked = if out.ended {
            check_attempt(&out.tokens, &prompted, cs, ctx)
        } else {
            Err(FailureReason::NoEos)
        };
        match checked {
            Ok((trajectory, constraint_report)) => {
                return Ok(GenerationOutcome { trajectory, attempts: attempt, constraint_report, failures })
            }
            Err(reason) => *failures.entry(reason).or_insert(0) += 1,
        }
    }
    Err(GenError::RetriesExhausted { attempts, reasons: failures })
}

/// Id given to the `index`-th generated trajectory.
pub fn generated_id(index: usize) -> String {
    format!("gen-{index:05}")
}

/// Runs one generation per mode, each with its own random stream derived
/// from `gc.seed` and its index, so any single output can be reproduced.
pub fn generate_many(
    model: &mut dyn NextToken,
    modes: &[GenMode<'_>],
    gc: &GenConfig,
    ctx: &GenContext<'_>,
) -> Vec<Result<GenerationOutcome>> {
    modes
        .iter()
        .enumerate()
        .map(|(i, &mode)| {
            let mut r = rng::stream(gc.seed, "generate", i as u64);
            generate_trajectory(model, mode, gc, ctx, &mut r).map(|mut o| {
                o.trajectory.id = generated_id(i);
                o
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub requested: usize,
    pub succeeded: usize,
    pub retries_exhausted: usize,
    pub other_errors: usize,
    pub total_attempts: usize,
    /// Rejected attempts by reason, over every request.
    pub failure_histogram: BTreeMap<FailureReason, usize>,
    /// Fraction of successful controlled outputs meeting all constraints.
    pub satisfaction_rate: Option<f64>,
}

pub fn summarize(outcomes: &[Result<GenerationOutcome>]) -> RunSummary {
    let mut s = RunSummary {
        requested: outcomes.len(),
        succeeded: 0,
        retries_exhausted: 0,
        other_errors: 0,
        total_attempts: 0,
        failure_histogram: BTreeMap::new(),
        satisfaction_rate: None,
    };
    let (mut controlled, mut satisfied) = (0usize, 0usize);
    for o in outcomes {
        let reasons = match o {
            Ok(o) => {
                s.succeeded += 1;
                s.total_attempts += o.attempts;
                if let Some(r) = &o.constraint_report {
                    controlled += 1;
                    satisfied += r.all() as usize;
                }
                &o.failures
            }
            Err(GenError::RetriesExhausted { attempts, reasons }) => {
                s.retries_exhausted += 1;
                s.total_attempts += attempts;
                reasons
            }
            Err(_) => {
                s.other_errors += 1;
                continue;
            }
        };
        for (r, n) in reasons {
            *s.failure_histogram.entry(*r).or_insert(0) += n;
        }
    }
    if controlled > 0 {
        s.satisfaction_rate = Some(satisfied as f64 / controlled as f64);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use trajforge_core::encode::{COMMA, DURATION, EOS, LOCATION, SEP};
    use trajforge_core::{Constraint, TokenId};

    /// Replays a token script after whatever prompt it is given, restarting
    /// the script whenever the context shrinks (a new attempt).
    struct Rigged {
        script: Vec<TokenId>,
        pos: usize,
        last_len: usize,
        vocab: usize,
    }

    impl Rigged {
        fn new(script: Vec<TokenId>, vocab: usize) -> Self {
            Rigged { script, pos: 0, last_len: 0, vocab }
        }
    }

    impl NextToken for Rigged {
        fn context_limit(&self) -> usize {
            256
        }
        fn next_logits(&mut self, ctx: &[TokenId]) -> Result<Vec<f32>> {
            if ctx.len() <= self.last_len {
                self.pos = 0;
            }
            self.last_len = ctx.len();
            let mut l = vec![-60.0f32; self.vocab];
            l[self.script[self.pos.min(self.script.len() - 1)] as usize] = 60.0;
            self.pos += 1;
            Ok(l)
        }
    }

    struct Fixture {
        vocab: Vocabulary,
        grid: GridSpec,
        ts: TimeSpec,
        durations: DurationDistribution,
    }

    impl Fixture {
        fn new() -> Self {
            let grid = GridSpec::new(40.0, 116.0, 1.0, 4, 5).unwrap();
            let ts = TimeSpec::new(15).unwrap();
            Fixture { vocab: Vocabulary::build(&grid, &ts), grid, ts, durations: DurationDistribution::from_counts(vec![1]) }
        }
        fn ctx(&self) -> GenContext<'_> {
            GenContext { vocab: &self.vocab, grid: &self.grid, timespec: &self.ts, durations: &self.durations }
        }
        /// Tokens after "arrival time is" for a visit block's remainder.
        fn tail(&self, v: Visit) -> Vec<TokenId> {
            let t = self.vocab.time_token(v.arrival).unwrap();
            let l = self.vocab.location_token(v.location).unwrap();
            let d = self.vocab.duration_token(v.duration).unwrap();
            vec![t, COMMA, LOCATION, 5, l, COMMA, DURATION, 5, d]
        }
    }

    #[test]
    fn malformed_output_exhausts_retries() {
        let f = Fixture::new();
        let mut m = Rigged::new(vec![COMMA], f.vocab.len());
        let gc = GenConfig { max_new_tokens: 20, ..Default::default() };
        // budget runs out first
        match generate_trajectory(&mut m, GenMode::Uncontrolled, &gc, &f.ctx(), &mut rng::stream(0, "t", 0)) {
            Err(GenError::RetriesExhausted { attempts: 10, reasons }) => assert_eq!(reasons[&FailureReason::NoEos], 10),
            other => panic!("{other:?}"),
        }
        let mut m = Rigged::new(vec![COMMA, EOS], f.vocab.len());
        match generate_trajectory(&mut m, GenMode::Uncontrolled, &gc, &f.ctx(), &mut rng::stream(0, "t", 0)) {
            Err(GenError::RetriesExhausted { reasons, .. }) => assert_eq!(reasons[&FailureReason::Parse], 10),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_arrivals_are_rejected() {
        let f = Fixture::new();
        let mut script = f.tail(Visit::new(10, 3, 2));
        script.extend([SEP, 3, 4, 5]);
        script.extend(f.tail(Visit::new(10, 4, 2)));
        script.push(EOS);
        let mut m = Rigged::new(script, f.vocab.len());
        let gc = GenConfig { max_retries: 3, ..Default::default() };
        match generate_trajectory(&mut m, GenMode::Uncontrolled, &gc, &f.ctx(), &mut rng::stream(0, "t", 0)) {
            Err(GenError::RetriesExhausted { attempts: 3, reasons }) => {
                assert_eq!(reasons.get(&FailureReason::DuplicateArrival), Some(&3))
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn reordered_valid_output_is_accepted() {
        let f = Fixture::new();
        let mut script = f.tail(Visit::new(40, 3, 2));
        script.extend([SEP, 3, 4, 5]);
        script.extend(f.tail(Visit::new(10, 4, 8)));
        script.push(EOS);
        let mut m = Rigged::new(script, f.vocab.len());
        let o = generate_trajectory(&mut m, GenMode::Uncontrolled, &GenConfig::default(), &f.ctx(), &mut rng::stream(0, "t", 0))
            .unwrap();
        assert_eq!(o.trajectory.visits, vec![Visit::new(10, 4, 8), Visit::new(40, 3, 2)]);
        assert_eq!(o.attempts, 1);
        assert!(o.constraint_report.is_none());
    }

    #[test]
    fn controlled_success_and_overlap_failure() {
        let f = Fixture::new();
        let cs = ConstraintSet::new(vec![Constraint::new(7, 30, 30, Some(4))]);
        let mut script = f.tail(Visit::new(10, 4, 8));
        script.push(EOS);
        let mut m = Rigged::new(script, f.vocab.len());
        let o = generate_trajectory(&mut m, GenMode::Controlled(&cs), &GenConfig::default(), &f.ctx(), &mut rng::stream(0, "t", 0))
            .unwrap();
        assert_eq!(o.trajectory.visits, vec![Visit::new(10, 4, 8), Visit::new(30, 7, 4)]);
        assert_eq!(o.constraint_report.unwrap().per_constraint, vec![true]);

        // a generated visit overlapping the constrained one is an integrity failure
        let mut script = f.tail(Visit::new(28, 4, 8));
        script.push(EOS);
        let mut m = Rigged::new(script, f.vocab.len());
        match generate_trajectory(&mut m, GenMode::Controlled(&cs), &GenConfig::default(), &f.ctx(), &mut rng::stream(0, "t", 0)) {
            Err(GenError::RetriesExhausted { reasons, .. }) => assert_eq!(reasons[&FailureReason::Invalid], 10),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn summary_counts() {
        let ok = GenerationOutcome {
            trajectory: Trajectory::new("a", vec![Visit::new(1, 1, 1)]),
            attempts: 2,
            constraint_report: Some(SatisfactionReport { per_constraint: vec![true] }),
            failures: BTreeMap::from([(FailureReason::Parse, 1)]),
        };
        let bad = GenError::RetriesExhausted { attempts: 10, reasons: BTreeMap::from([(FailureReason::Parse, 10)]) };
        let s = summarize(&[Ok(ok), Err(bad)]);
        assert_eq!((s.requested, s.succeeded, s.retries_exhausted, s.total_attempts), (2, 1, 1, 12));
        assert_eq!(s.failure_histogram[&FailureReason::Parse], 11);
        assert_eq!(s.satisfaction_rate, Some(1.0));
    }
}

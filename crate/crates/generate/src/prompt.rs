//! Prompt construction and the empirical duration marginal.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use trajforge_core::encode::{ARRIVAL, BOS, IS, SEP, TIME};
use trajforge_core::{ConstraintSet, TokenSequence, TrajectoryDataset, Visit, Vocabulary};

use crate::error::{GenError, Result};

/// Redraws allowed when two constraints land on the same arrival slot.
pub const MAX_REDRAWS: usize = 100;

/// Visit-duration frequencies observed in training data.
#[derive(Debug, Clone)]
pub struct DurationDistribution {
    counts: Vec<u64>,
    index: Option<WeightedIndex<u64>>,
}

impl DurationDistribution {
    /// `counts[i]` is the number of visits lasting `i + 1` slots.
    pub fn from_counts(counts: Vec<u64>) -> Self {
        let index = WeightedIndex::new(&counts).ok();
        DurationDistribution { counts, index }
    }

    pub fn from_dataset(ds: &TrajectoryDataset) -> Self {
        let mut counts = Vec::new();
        for v in ds.visits() {
            let i = v.duration.max(1) as usize - 1;
            if counts.len() <= i {
                counts.resize(i + 1, 0);
            }
            counts[i] += 1;
        }
        Self::from_counts(counts)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// A duration in slots; 1 when nothing was observed.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        self.index.as_ref().map_or(1, |w| w.sample(rng) as u32 + 1)
    }
}

/// `<BOS> arrival time is`
pub fn build_uncontrolled_prompt(_vocab: &Vocabulary) -> TokenSequence {
    TokenSequence(vec![BOS, ARRIVAL, TIME, IS])
}

/// One concrete visit per constraint, in the given order. Arrivals are drawn
/// uniformly from each window (redrawn together on a collision); durations
/// come from the hint or the marginal and are shortened so the visits neither
/// overlap each other nor run past midnight.
pub fn materialize_constraints<R: Rng + ?Sized>(
    cs: &ConstraintSet,
    vocab: &Vocabulary,
    durations: &DurationDistribution,
    rng: &mut R,
) -> Result<Vec<Visit>> {
    if cs.is_empty() {
        return Err(GenError::EmptyConstraintSet);
    }
    let slots = vocab.slots();
    for (index, c) in cs.constraints.iter().enumerate() {
        if c.t_start > c.t_end || c.t_end >= slots || c.location == 0 || c.location > vocab.cells() {
            return Err(GenError::InvalidConstraint { index });
        }
    }
    let mut arrivals = Vec::with_capacity(cs.len());
    let mut resolved = false;
    for _ in 0..MAX_REDRAWS {
        arrivals.clear();
        arrivals.extend(cs.constraints.iter().map(|c| rng.random_range(c.t_start..=c.t_end)));
        let mut sorted = arrivals.clone();
        sorted.sort_unstable();
        if sorted.windows(2).all(|w| w[0] != w[1]) {
            resolved = true;
            break;
        }
    }
    if !resolved {
        return Err(GenError::UnresolvableCollision);
    }
    let mut visits: Vec<Visit> = cs
        .constraints
        .iter()
        .zip(&arrivals)
        .map(|(c, &a)| Visit::new(a, c.location, c.duration_hint.unwrap_or_else(|| durations.sample(rng))))
        .collect();
    let mut order: Vec<usize> = (0..visits.len()).collect();
    order.sort_by_key(|&i| visits[i].arrival);
    for (j, &i) in order.iter().enumerate() {
        let limit = order.get(j + 1).map_or(slots, |&n| visits[n].arrival);
        let v = &mut visits[i];
        v.duration = v.duration.clamp(1, limit - v.arrival);
    }
    Ok(visits)
}

/// Constraint visits as full blocks joined by `=>`, then `=> arrival time is`.
pub fn encode_controlled_prompt(visits: &[Visit], vocab: &Vocabulary) -> Result<TokenSequence> {
    let mut t = vec![BOS];
    for (i, v) in visits.iter().enumerate() {
        if i > 0 {
            t.push(SEP);
        }
        let block = vocab.encode_visit(v).map_err(|_| GenError::InvalidConstraint { index: i })?;
        t.extend_from_slice(&block);
    }
    t.extend_from_slice(&[SEP, ARRIVAL, TIME, IS]);
    Ok(TokenSequence(t))
}

pub fn build_controlled_prompt<R: Rng + ?Sized>(
    cs: &ConstraintSet,
    vocab: &Vocabulary,
    durations: &DurationDistribution,
    rng: &mut R,
) -> Result<TokenSequence> {
    encode_controlled_prompt(&materialize_constraints(cs, vocab, durations, rng)?, vocab)
}

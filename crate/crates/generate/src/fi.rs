//! Forcible insertion: the baseline that splices constraint visits into an
//! independently generated trajectory.

use rand::Rng;
use trajforge_core::{ConstraintSet, Trajectory, Visit, Vocabulary};

use crate::error::{GenError, Result};
use crate::prompt::{materialize_constraints, DurationDistribution};

/// Inserts one visit per constraint. Incumbent visits that overlap an
/// inserted one lose the overlapping part: the tail when they start first,
/// the head when they start inside it, everything when fully covered.
pub fn forcible_insert<R: Rng + ?Sized>(
    traj: &Trajectory,
    cs: &ConstraintSet,
    vocab: &Vocabulary,
    durations: &DurationDistribution,
    rng: &mut R,
) -> Result<Trajectory> {
    if cs.is_empty() {
        return Ok(traj.clone());
    }
    let mut inserted = materialize_constraints(cs, vocab, durations, rng).map_err(|e| match e {
        GenError::UnresolvableCollision => GenError::Unsatisfiable,
        other => other,
    })?;
    inserted.sort_by_key(|v| v.arrival);
    let mut visits: Vec<Visit> = Vec::with_capacity(traj.len() + inserted.len());
    'incumbents: for v in &traj.visits {
        let (mut start, end) = (v.arrival, v.end());
        for c in &inserted {
            if end <= c.arrival || start >= c.end() {
                continue;
            }
            if start < c.arrival {
                visits.push(Visit::new(start, v.location, c.arrival - start));
                continue 'incumbents;
            }
            if end <= c.end() {
                continue 'incumbents;
            }
            start = c.end();
        }
        visits.push(Visit::new(start, v.location, end - start));
    }
    visits.extend(inserted);
    visits.sort_by_key(|v| v.arrival);
    let out = Trajectory::new(traj.id.clone(), visits);
    if out.visits.windows(2).any(|w| w[0].end() > w[1].arrival) || !out.satisfies_all(cs).all() {
        return Err(GenError::Unsatisfiable);
    }
    Ok(out)
}

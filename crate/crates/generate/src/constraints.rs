//! Drawing constraint sets from real trajectories.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use trajforge_core::io::ConstraintRecord;
use trajforge_core::{Constraint, ConstraintSet, TrajectoryDataset};

use crate::error::{GenError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstraintParams {
    pub n_min: usize,
    pub n_max: usize,
    /// Half-width of each arrival window, in slots.
    pub window: u32,
    /// Share of trajectories that receive a constraint set.
    pub fraction: f64,
}

impl Default for ConstraintParams {
    fn default() -> Self {
        ConstraintParams { n_min: 1, n_max: 3, window: 1, fraction: 1.0 }
    }
}

/// For each selected trajectory, `k` of its visits (k uniform in
/// `n_min..=n_max`, capped at the visit count) become constraints with a
/// window of `±window` slots around the real arrival and the real duration
/// as hint. Records keep the source id and are in dataset order.
pub fn make_constraints<R: Rng + ?Sized>(
    ds: &TrajectoryDataset,
    rng: &mut R,
    params: &ConstraintParams,
) -> Result<Vec<ConstraintRecord>> {
    if params.n_min == 0 || params.n_min > params.n_max {
        return Err(GenError::InvalidConfig(format!("need 1 <= n_min <= n_max, got {}..={}", params.n_min, params.n_max)));
    }
    if !(params.fraction > 0.0 && params.fraction <= 1.0) {
        return Err(GenError::InvalidConfig(format!("fraction must be in (0, 1], got {}", params.fraction)));
    }
    let n = ds.len();
    let take = ((params.fraction * n as f64).round() as usize).clamp(n.min(1), n);
    let mut chosen = index::sample(rng, n, take).into_vec();
    chosen.sort_unstable();
    let last_slot = ds.timespec.slots_per_day() - 1;
    let mut out = Vec::with_capacity(take);
    for i in chosen {
        let traj = &ds.trajectories[i];
        if traj.is_empty() {
            continue;
        }
        let k = rng.random_range(params.n_min..=params.n_max).min(traj.len());
        let mut picks = index::sample(rng, traj.len(), k).into_vec();
        picks.sort_unstable();
        let constraints = picks
            .into_iter()
            .map(|j| {
                let v = traj.visits[j];
                Constraint::new(
                    v.location,
                    v.arrival.saturating_sub(params.window),
                    (v.arrival + params.window).min(last_slot),
                    Some(v.duration),
                )
            })
            .collect();
        out.push(ConstraintRecord { target: Some(traj.id.clone()), constraints: ConstraintSet::new(constraints) });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use trajforge_core::{rng, GridSpec, TimeSpec, Trajectory, Visit};

    fn dataset(raw: Vec<Vec<(u32, u32)>>) -> TrajectoryDataset {
        let trajectories = raw
            .into_iter()
            .enumerate()
            .map(|(i, vs)| {
                let mut t = 0;
                let visits = vs
                    .into_iter()
                    .map(|(gap, loc)| {
                        let v = Visit::new(t + gap, loc, 2);
                        t = v.end();
                        v
                    })
                    .collect();
                Trajectory::new(format!("t{i}"), visits)
            })
            .collect();
        TrajectoryDataset::new(GridSpec::new(40.0, 116.0, 1.0, 4, 5).unwrap(), TimeSpec::new(15).unwrap(), trajectories)
    }

    fn arb_dataset() -> impl Strategy<Value = TrajectoryDataset> {
        prop::collection::vec(prop::collection::vec((0u32..5, 1u32..=20), 1..8), 1..12).prop_map(dataset)
    }

    proptest! {
        #[test]
        fn constraints_come_from_their_source(ds in arb_dataset(), seed in 0u64..500, w in 0u32..3) {
            let params = ConstraintParams { window: w, ..Default::default() };
            let recs = make_constraints(&ds, &mut rng::stream(seed, "constraints", 0), &params).unwrap();
            prop_assert_eq!(recs.len(), ds.len());
            for rec in &recs {
                let src = ds.trajectories.iter().find(|t| Some(&t.id) == rec.target.as_ref()).unwrap();
                prop_assert!(!rec.constraints.is_empty());
                prop_assert!(rec.constraints.len() <= 3.min(src.len()));
                prop_assert!(src.satisfies_all(&rec.constraints).all());
                for c in &rec.constraints.constraints {
                    prop_assert!(c.is_valid(&ds.timespec, &ds.grid));
                    prop_assert!(c.t_end - c.t_start <= 2 * w);
                    if w == 0 {
                        prop_assert_eq!(c.t_start, c.t_end);
                    }
                }
            }
        }
    }

    #[test]
    fn fraction_and_determinism() {
        let ds = dataset((0..20).map(|i| vec![(i % 3, 1 + i % 20), (1, 2)]).collect());
        let p = ConstraintParams { fraction: 0.25, ..Default::default() };
        let a = make_constraints(&ds, &mut rng::stream(3, "c", 0), &p).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, make_constraints(&ds, &mut rng::stream(3, "c", 0), &p).unwrap());
        let bad = ConstraintParams { n_min: 3, n_max: 2, ..Default::default() };
        assert!(make_constraints(&ds, &mut rng::stream(3, "c", 0), &bad).is_err());
    }
}

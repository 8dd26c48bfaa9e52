//! Visits, trajectories, datasets and spatiotemporal constraints.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::grid::{GridSpec, TimeSpec};

/// One stay: arrival slot, grid cell and duration in slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[u32; 3]", into = "[u32; 3]")]
pub struct Visit {
    pub arrival: u32,
    pub location: u32,
    pub duration: u32,
}

impl Visit {
    pub fn new(arrival: u32, location: u32, duration: u32) -> Self {
        Visit { arrival, location, duration }
    }

    /// First slot after the visit ends.
    pub fn end(&self) -> u32 {
        self.arrival + self.duration
    }
}

impl From<[u32; 3]> for Visit {
    fn from([arrival, location, duration]: [u32; 3]) -> Self {
        Visit { arrival, location, duration }
    }
}

impl From<Visit> for [u32; 3] {
    fn from(v: Visit) -> Self {
        [v.arrival, v.location, v.duration]
    }
}

/// A single-day sequence of visits.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    #[serde(default)]
    pub id: String,
    pub visits: Vec<Visit>,
}

impl Trajectory {
    pub fn new(id: impl Into<String>, visits: Vec<Visit>) -> Self {
        Trajectory { id: id.into(), visits }
    }

    pub fn len(&self) -> usize {
        self.visits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visits.is_empty()
    }

    /// True iff some visit is at the constraint's location with an arrival
    /// inside its (inclusive) window.
    pub fn satisfies(&self, c: &Constraint) -> bool {
        self.visits
            .iter()
            .any(|v| v.location == c.location && c.t_start <= v.arrival && v.arrival <= c.t_end)
    }

    pub fn satisfies_all(&self, cs: &ConstraintSet) -> SatisfactionReport {
        SatisfactionReport {
            per_constraint: cs.constraints.iter().map(|c| self.satisfies(c)).collect(),
        }
    }

    /// Every rule a trajectory must obey, checked exhaustively. `Ok(())` when
    /// nothing is wrong.
    pub fn validate(&self, ts: &TimeSpec, grid: &GridSpec) -> Result<(), Vec<Violation>> {
        let slots = ts.slots_per_day();
        let mut out = Vec::new();
        if self.visits.is_empty() {
            out.push(Violation::Empty);
        }
        for (i, v) in self.visits.iter().enumerate() {
            if !grid.contains_cell(v.location) {
                out.push(Violation::LocationOutOfRange { index: i, location: v.location });
            }
            if v.arrival >= slots {
                out.push(Violation::ArrivalOutOfRange { index: i, arrival: v.arrival });
            }
            if v.duration == 0 || v.duration > slots {
                out.push(Violation::DurationOutOfRange { index: i, duration: v.duration });
            }
            if v.arrival < slots && v.end() > slots {
                out.push(Violation::PastEndOfDay { index: i, end: v.end() });
            }
        }
        for (i, w) in self.visits.windows(2).enumerate() {
            if w[1].arrival <= w[0].arrival {
                out.push(Violation::NotIncreasing { index: i + 1 });
            } else if w[0].end() > w[1].arrival {
                out.push(Violation::Overlap { index: i + 1 });
            }
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(out)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Empty,
    LocationOutOfRange { index: usize, location: u32 },
    ArrivalOutOfRange { index: usize, arrival: u32 },
    DurationOutOfRange { index: usize, duration: u32 },
    /// Visit `index` arrives no later than its predecessor.
    NotIncreasing { index: usize },
    /// Visit `index` starts before its predecessor ends.
    Overlap { index: usize },
    PastEndOfDay { index: usize, end: u32 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Empty => write!(f, "trajectory has no visits"),
            Violation::LocationOutOfRange { index, location } => {
                write!(f, "visit {index}: location {location} not in grid")
            }
            Violation::ArrivalOutOfRange { index, arrival } => {
                write!(f, "visit {index}: arrival slot {arrival} out of range")
            }
            Violation::DurationOutOfRange { index, duration } => {
                write!(f, "visit {index}: duration {duration} out of range")
            }
            Violation::NotIncreasing { index } => {
                write!(f, "visit {index}: arrival not after previous arrival")
            }
            Violation::Overlap { index } => write!(f, "visit {index}: overlaps previous visit"),
            Violation::PastEndOfDay { index, end } => {
                write!(f, "visit {index}: ends at slot {end}, past the end of the day")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDataset {
    pub grid: GridSpec,
    pub timespec: TimeSpec,
    pub trajectories: Vec<Trajectory>,
}

impl TrajectoryDataset {
    pub fn new(grid: GridSpec, timespec: TimeSpec, trajectories: Vec<Trajectory>) -> Self {
        TrajectoryDataset { grid, timespec, trajectories }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn visits(&self) -> impl Iterator<Item = &Visit> {
        self.trajectories.iter().flat_map(|t| t.visits.iter())
    }

    /// Validate every trajectory; returns the ids and violations of the bad ones.
    pub fn invalid(&self) -> Vec<(String, Vec<Violation>)> {
        self.trajectories
            .iter()
            .filter_map(|t| t.validate(&self.timespec, &self.grid).err().map(|v| (t.id.clone(), v)))
            .collect()
    }

    /// Keep trajectories with at least `min_visits` visits, preserving order.
    pub fn filter_short(mut self, min_visits: usize) -> Self {
        self.trajectories.retain(|t| t.len() >= min_visits);
        self
    }
}

/// A required visit: `location` reached with arrival in `[t_start, t_end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "ConstraintRepr", into = "ConstraintRepr")]
pub struct Constraint {
    pub location: u32,
    pub t_start: u32,
    pub t_end: u32,
    pub duration_hint: Option<u32>,
}

type ConstraintRepr = (u32, u32, u32, Option<u32>);

impl From<ConstraintRepr> for Constraint {
    fn from((location, t_start, t_end, duration_hint): ConstraintRepr) -> Self {
        Constraint { location, t_start, t_end, duration_hint }
    }
}

impl From<Constraint> for ConstraintRepr {
    fn from(c: Constraint) -> Self {
        (c.location, c.t_start, c.t_end, c.duration_hint)
    }
}

impl Constraint {
    pub fn new(location: u32, t_start: u32, t_end: u32, duration_hint: Option<u32>) -> Self {
        Constraint { location, t_start, t_end, duration_hint }
    }

    pub fn is_valid(&self, ts: &TimeSpec, grid: &GridSpec) -> bool {
        let slots = ts.slots_per_day();
        grid.contains_cell(self.location)
            && self.t_start <= self.t_end
            && self.t_end < slots
            && self.duration_hint.is_none_or(|d| d >= 1 && d <= slots)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConstraintSet {
    pub constraints: Vec<Constraint>,
}

impl ConstraintSet {
    pub fn new(constraints: Vec<Constraint>) -> Self {
        ConstraintSet { constraints }
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SatisfactionReport {
    pub per_constraint: Vec<bool>,
}

impl SatisfactionReport {
    pub fn all(&self) -> bool {
        self.per_constraint.iter().all(|&b| b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid() -> GridSpec {
        GridSpec::new(39.9, 116.3, 1.0, 10, 10).unwrap()
    }

    fn traj(visits: &[(u32, u32, u32)]) -> Trajectory {
        Trajectory::new("t", visits.iter().map(|&(a, l, d)| Visit::new(a, l, d)).collect())
    }

    #[test]
    fn satisfies_examples() {
        let t = traj(&[(10, 2, 4), (30, 5, 3)]);
        assert!(t.satisfies(&Constraint::new(5, 28, 32, None)));
        assert!(!t.satisfies(&Constraint::new(6, 28, 32, None)));
        assert!(t.satisfies(&Constraint::new(5, 30, 35, None)));
        assert!(t.satisfies(&Constraint::new(5, 25, 30, None)));
        assert!(!t.satisfies(&Constraint::new(5, 31, 35, None)));
    }

    #[test]
    fn satisfies_all_examples() {
        let t = traj(&[(10, 2, 4), (30, 5, 3)]);
        assert!(t.satisfies_all(&ConstraintSet::default()).all());

        let cs = ConstraintSet::new(vec![
            Constraint::new(2, 9, 11, None),
            Constraint::new(7, 0, 95, None),
        ]);
        let r = t.satisfies_all(&cs);
        assert_eq!(r.per_constraint, vec![true, false]);
        assert!(!r.all());

        // one visit in the intersection of two windows at the same location
        let cs = ConstraintSet::new(vec![
            Constraint::new(5, 26, 31, None),
            Constraint::new(5, 30, 40, None),
        ]);
        let r = t.satisfies_all(&cs);
        let oracle: Vec<bool> = cs
            .constraints
            .iter()
            .map(|c| t.visits.iter().any(|v| v.location == c.location && (c.t_start..=c.t_end).contains(&v.arrival)))
            .collect();
        assert_eq!(r.per_constraint, oracle);
        assert!(r.all());
    }

    #[test]
    fn validate_examples() {
        let (ts, g) = (TimeSpec::default(), grid());
        assert_eq!(traj(&[(10, 3, 2), (13, 3, 2)]).validate(&ts, &g), Ok(()));
        assert_eq!(
            traj(&[(10, 3, 5), (13, 3, 2)]).validate(&ts, &g),
            Err(vec![Violation::Overlap { index: 1 }])
        );
        assert_eq!(
            traj(&[(95, 3, 3)]).validate(&ts, &g),
            Err(vec![Violation::PastEndOfDay { index: 0, end: 98 }])
        );
        assert_eq!(traj(&[]).validate(&ts, &g), Err(vec![Violation::Empty]));
    }

    #[test]
    fn validate_reports_every_violation() {
        let (ts, g) = (TimeSpec::default(), grid());
        let errs = traj(&[(20, 0, 0), (20, 101, 1), (96, 4, 1)]).validate(&ts, &g).unwrap_err();
        assert!(errs.contains(&Violation::LocationOutOfRange { index: 0, location: 0 }));
        assert!(errs.contains(&Violation::DurationOutOfRange { index: 0, duration: 0 }));
        assert!(errs.contains(&Violation::LocationOutOfRange { index: 1, location: 101 }));
        assert!(errs.contains(&Violation::NotIncreasing { index: 1 }));
        assert!(errs.contains(&Violation::ArrivalOutOfRange { index: 2, arrival: 96 }));
    }

    #[test]
    fn constraint_validity() {
        let (ts, g) = (TimeSpec::default(), grid());
        assert!(Constraint::new(5, 3, 3, None).is_valid(&ts, &g));
        assert!(!Constraint::new(5, 4, 3, None).is_valid(&ts, &g));
        assert!(!Constraint::new(5, 3, 96, None).is_valid(&ts, &g));
        assert!(!Constraint::new(0, 3, 4, None).is_valid(&ts, &g));
        assert!(!Constraint::new(5, 3, 4, Some(0)).is_valid(&ts, &g));
    }

    #[test]
    fn filter_short_keeps_order() {
        let ds = TrajectoryDataset::new(
            grid(),
            TimeSpec::default(),
            vec![traj(&[(1, 1, 1), (3, 1, 1)]), traj(&[(1, 1, 1), (3, 1, 1), (5, 1, 1)]), traj(&[(1, 1, 1), (3, 1, 1), (5, 1, 1), (7, 1, 1)])],
        );
        let lens: Vec<usize> = ds.clone().filter_short(3).trajectories.iter().map(|t| t.len()).collect();
        assert_eq!(lens, vec![3, 4]);
        assert_eq!(ds.clone().filter_short(1), ds);
    }

    proptest! {
        #[test]
        fn widening_window_never_unsatisfies(
            visits in prop::collection::vec((0u32..96, 1u32..5, 1u32..4), 1..8),
            loc in 1u32..5, a in 0u32..96, b in 0u32..96, grow_lo in 0u32..10, grow_hi in 0u32..10,
        ) {
            let t = traj(&visits);
            let (lo, hi) = (a.min(b), a.max(b));
            let narrow = Constraint::new(loc, lo, hi, None);
            let wide = Constraint::new(loc, lo.saturating_sub(grow_lo), (hi + grow_hi).min(95), None);
            if t.satisfies(&narrow) {
                prop_assert!(t.satisfies(&wide));
            }
        }
    }
}

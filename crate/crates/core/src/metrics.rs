//! Realism metrics between a real and a generated trajectory dataset.
//!
//! Six distributions are compared with the Jensen-Shannon divergence in
//! nats (bounded by ln 2): travel distance, radius of gyration, visit
//! duration, visits per day, global location rank and individual location
//! rank. Location transitions are compared with the Frobenius norm of the
//! difference of their transition matrices, optionally restricted to
//! transitions touching a set of locations.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{haversine_km, GridSpec};
use crate::traj::{Trajectory, TrajectoryDataset};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("histograms have different bins ({0} vs {1})")]
    BinMismatch(usize, usize),
    #[error("datasets use different grids or time specs")]
    GridMismatch,
}

/// Probabilities over a fixed list of bins, or all zeros for no data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub probs: Vec<f64>,
}

impl Histogram {
    pub fn from_counts(counts: &[f64]) -> Self {
        let total: f64 = counts.iter().sum();
        let probs = if total > 0.0 { counts.iter().map(|c| c / total).collect() } else { vec![0.0; counts.len()] };
        Histogram { probs }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.iter().all(|&p| p == 0.0)
    }
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn shannon_entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Jensen-Shannon divergence `h((p+q)/2) - (h(p) + h(q))/2` in nats. Two
/// empty histograms are identical (0); one empty histogram is maximally far
/// from any non-empty one (ln 2).
pub fn jsd(p: &Histogram, q: &Histogram) -> Result<f64, MetricsError> {
    if p.len() != q.len() {
        return Err(MetricsError::BinMismatch(p.len(), q.len()));
    }
    match (p.is_empty(), q.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(std::f64::consts::LN_2),
        _ => {}
    }
    let m: Vec<f64> = p.probs.iter().zip(&q.probs).map(|(a, b)| (a + b) / 2.0).collect();
    let d = shannon_entropy(&m) - (shannon_entropy(&p.probs) + shannon_entropy(&q.probs)) / 2.0;
    Ok(d.clamp(0.0, std::f64::consts::LN_2))
}

/// `bins` equal-width bins over `[0, upper)` plus one overflow bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearBins {
    pub upper: f64,
    pub bins: usize,
}

impl LinearBins {
    pub fn slot(&self, x: f64) -> usize {
        if x >= self.upper {
            return self.bins;
        }
        ((x / self.upper * self.bins as f64).floor().max(0.0) as usize).min(self.bins - 1)
    }

    pub fn histogram(&self, values: &[f64]) -> Histogram {
        let mut counts = vec![0.0; self.bins + 1];
        for &v in values {
            counts[self.slot(v)] += 1.0;
        }
        Histogram::from_counts(&counts)
    }

    /// Bins spanning `[0, quantile(values, q))`, never narrower than 1e-6.
    pub fn from_quantile(values: &[f64], q: f64, bins: usize) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let upper = if sorted.is_empty() {
            0.0
        } else {
            let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
            sorted[rank - 1]
        };
        // the quantile value itself belongs inside the range
        LinearBins { upper: (upper * (1.0 + 1e-9)).max(1e-6), bins: bins.max(1) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub distance_bins: usize,
    pub gradius_bins: usize,
    /// Upper edge of the linear bins as a quantile of the real data.
    pub upper_quantile: f64,
    pub dailyloc_max: usize,
    pub top_k: usize,
    pub irank_depth: usize,
    pub top_k_transition: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            distance_bins: 50,
            gradius_bins: 50,
            upper_quantile: 0.99,
            dailyloc_max: 50,
            top_k: 100,
            irank_depth: 10,
            top_k_transition: 100,
        }
    }
}

/// Bin layout shared by both datasets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Binning {
    pub distance: LinearBins,
    pub gradius: LinearBins,
    pub duration_max: usize,
    pub dailyloc_max: usize,
}

impl Binning {
    pub fn from_real(real: &TrajectoryDataset, cfg: &MetricsConfig) -> Self {
        let dist: Vec<f64> = real.trajectories.iter().map(|t| travel_distance_km(t, &real.grid)).collect();
        let gyr: Vec<f64> = real.trajectories.iter().map(|t| gyration_km(t, &real.grid)).collect();
        Binning {
            distance: LinearBins::from_quantile(&dist, cfg.upper_quantile, cfg.distance_bins),
            gradius: LinearBins::from_quantile(&gyr, cfg.upper_quantile, cfg.gradius_bins),
            duration_max: real.timespec.slots_per_day() as usize,
            dailyloc_max: cfg.dailyloc_max.max(1),
        }
    }
}

/// Sum of great-circle distances between consecutive visited cell centers.
pub fn travel_distance_km(t: &Trajectory, grid: &GridSpec) -> f64 {
    t.visits
        .windows(2)
        .map(|w| {
            let (a, b) = (grid.cell_centroid(w[0].location), grid.cell_centroid(w[1].location));
            match (a, b) {
                (Ok((la, oa)), Ok((lb, ob))) => haversine_km(la, oa, lb, ob),
                _ => 0.0,
            }
        })
        .sum()
}

/// Root-mean-square distance of planar points from their mean.
pub fn radius_of_gyration(points: &[(f64, f64)]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.1).sum::<f64>() / n;
    (points.iter().map(|p| (p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sum::<f64>() / n).sqrt()
}

/// Radius of gyration of the visited cell centers, in kilometers.
pub fn gyration_km(t: &Trajectory, grid: &GridSpec) -> f64 {
    let pts: Vec<(f64, f64)> = t.visits.iter().filter_map(|v| grid.cell_center_km(v.location).ok()).collect();
    radius_of_gyration(&pts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDistributions {
    pub distance: Histogram,
    pub gradius: Histogram,
    pub duration: Histogram,
    pub dailyloc: Histogram,
}

pub fn trajectory_distributions(ds: &TrajectoryDataset, binning: &Binning) -> TrajectoryDistributions {
    let dist: Vec<f64> = ds.trajectories.iter().map(|t| travel_distance_km(t, &ds.grid)).collect();
    let gyr: Vec<f64> = ds.trajectories.iter().map(|t| gyration_km(t, &ds.grid)).collect();
    // categorical supports: duration 1..=duration_max, dailyloc 1..=dailyloc_max (capped)
    let mut dur = vec![0.0; binning.duration_max];
    for v in ds.visits() {
        let d = (v.duration as usize).clamp(1, binning.duration_max);
        dur[d - 1] += 1.0;
    }
    let mut daily = vec![0.0; binning.dailyloc_max];
    for t in &ds.trajectories {
        if !t.is_empty() {
            daily[t.len().min(binning.dailyloc_max) - 1] += 1.0;
        }
    }
    TrajectoryDistributions {
        distance: binning.distance.histogram(&dist),
        gradius: binning.gradius.histogram(&gyr),
        duration: Histogram::from_counts(&dur),
        dailyloc: Histogram::from_counts(&daily),
    }
}

/// Location visit counts sorted by count descending, then id ascending.
fn ranked_counts<'a>(visits: impl Iterator<Item = &'a crate::traj::Visit>) -> Vec<(u32, usize)> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for v in visits {
        *counts.entry(v.location).or_default() += 1;
    }
    let mut ranked: Vec<(u32, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankDistributions {
    pub grank: Histogram,
    pub irank: Histogram,
}

/// G-rank: share of visits at the k-th most visited location, k = 1..=top_k.
/// I-rank: each trajectory's normalized rank profile over ranks 1..=depth,
/// averaged across trajectories and renormalized.
pub fn rank_distributions(ds: &TrajectoryDataset, top_k: usize, irank_depth: usize) -> RankDistributions {
    let ranked = ranked_counts(ds.visits());
    let mut g = vec![0.0; top_k];
    for (slot, (_, c)) in g.iter_mut().zip(ranked.iter()) {
        *slot = *c as f64;
    }
    let mut ind = vec![0.0; irank_depth];
    for t in ds.trajectories.iter().filter(|t| !t.is_empty()) {
        let profile = ranked_counts(t.visits.iter());
        let l = t.len() as f64;
        for (slot, (_, c)) in ind.iter_mut().zip(profile.iter()) {
            *slot += *c as f64 / l;
        }
    }
    RankDistributions { grank: Histogram::from_counts(&g), irank: Histogram::from_counts(&ind) }
}

/// Sparse row-stochastic (or zero-row) matrix over cells `1..=n_cells`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TransitionMatrix {
    pub n_cells: u32,
    pub rows: BTreeMap<u32, BTreeMap<u32, f64>>,
}

impl TransitionMatrix {
    pub fn get(&self, from: u32, to: u32) -> f64 {
        self.rows.get(&from).and_then(|r| r.get(&to)).copied().unwrap_or(0.0)
    }

    /// Build from a dense matrix; row `i` is cell `i + 1`.
    pub fn from_dense(rows: &[Vec<f64>]) -> Self {
        let mut m = TransitionMatrix { n_cells: rows.len() as u32, rows: BTreeMap::new() };
        for (i, row) in rows.iter().enumerate() {
            let entries: BTreeMap<u32, f64> =
                row.iter().enumerate().filter(|(_, &p)| p != 0.0).map(|(j, &p)| (j as u32 + 1, p)).collect();
            if !entries.is_empty() {
                m.rows.insert(i as u32 + 1, entries);
            }
        }
        m
    }
}

/// Empirical next-location probabilities from consecutive visit pairs.
pub fn transition_matrix(ds: &TrajectoryDataset) -> TransitionMatrix {
    let mut counts: BTreeMap<u32, BTreeMap<u32, u64>> = BTreeMap::new();
    for t in &ds.trajectories {
        for w in t.visits.windows(2) {
            *counts.entry(w[0].location).or_default().entry(w[1].location).or_default() += 1;
        }
    }
    let rows = counts
        .into_iter()
        .map(|(from, row)| {
            let total = row.values().sum::<u64>() as f64;
            (from, row.into_iter().map(|(to, c)| (to, c as f64 / total)).collect())
        })
        .collect();
    TransitionMatrix { n_cells: ds.grid.n_cells(), rows }
}

/// Frobenius norm of `p - q`. With `restrict_to`, only entries whose source
/// or destination is in the set contribute.
pub fn frobenius_diff(
    p: &TransitionMatrix,
    q: &TransitionMatrix,
    restrict_to: Option<&BTreeSet<u32>>,
) -> Result<f64, MetricsError> {
    if p.n_cells != q.n_cells {
        return Err(MetricsError::GridMismatch);
    }
    let keep = |a: u32, b: u32| restrict_to.is_none_or(|s| s.contains(&a) || s.contains(&b));
    let mut keys: BTreeSet<(u32, u32)> = BTreeSet::new();
    for m in [p, q] {
        for (&a, row) in &m.rows {
            keys.extend(row.keys().map(|&b| (a, b)));
        }
    }
    let sum: f64 = keys
        .into_iter()
        .filter(|&(a, b)| keep(a, b))
        .map(|(a, b)| (p.get(a, b) - q.get(a, b)).powi(2))
        .sum();
    Ok(sum.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub real_trajectories: usize,
    pub generated_trajectories: usize,
    pub binning: Binning,
    pub config: MetricsConfig,
    /// Locations used for the Top-K transition metric, if any.
    pub top_k_locations: Option<Vec<u32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub distance_jsd: f64,
    pub gradius_jsd: f64,
    pub duration_jsd: f64,
    pub dailyloc_jsd: f64,
    pub grank_jsd: f64,
    pub irank_jsd: f64,
    pub transition_frob: f64,
    pub topk_transition_frob: Option<f64>,
    pub meta: ReportMeta,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "distance_jsd,gradius_jsd,duration_jsd,dailyloc_jsd,irank_jsd,grank_jsd,transition_frob,topk_transition_frob";

    pub fn csv_row(&self) -> String {
        let topk = self.topk_transition_frob.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            self.distance_jsd,
            self.gradius_jsd,
            self.duration_jsd,
            self.dailyloc_jsd,
            self.irank_jsd,
            self.grank_jsd,
            self.transition_frob,
            topk
        )
    }

    /// The six JSD values in report order.
    pub fn jsds(&self) -> [(&'static str, f64); 6] {
        [
            ("distance", self.distance_jsd),
            ("gradius", self.gradius_jsd),
            ("duration", self.duration_jsd),
            ("dailyloc", self.dailyloc_jsd),
            ("grank", self.grank_jsd),
            ("irank", self.irank_jsd),
        ]
    }
}

/// Histogram pairs `(name, real, generated)` under the shared binning.
pub fn histogram_pairs(
    real: &TrajectoryDataset,
    gen: &TrajectoryDataset,
    binning: &Binning,
    cfg: &MetricsConfig,
) -> Vec<(&'static str, Histogram, Histogram)> {
    let (tr, tg) = (trajectory_distributions(real, binning), trajectory_distributions(gen, binning));
    let (rr, rg) = (rank_distributions(real, cfg.top_k, cfg.irank_depth), rank_distributions(gen, cfg.top_k, cfg.irank_depth));
    vec![
        ("distance", tr.distance, tg.distance),
        ("gradius", tr.gradius, tg.gradius),
        ("duration", tr.duration, tg.duration),
        ("dailyloc", tr.dailyloc, tg.dailyloc),
        ("grank", rr.grank, rg.grank),
        ("irank", rr.irank, rg.irank),
    ]
}

/// Most visited (in `real`) of the given locations, at most `k`.
pub fn top_locations(real: &TrajectoryDataset, candidates: &BTreeSet<u32>, k: usize) -> BTreeSet<u32> {
    let counts: BTreeMap<u32, usize> = ranked_counts(real.visits()).into_iter().collect();
    let mut ranked: Vec<u32> = candidates.iter().copied().collect();
    ranked.sort_by(|a, b| {
        let (ca, cb) = (counts.get(a).unwrap_or(&0), counts.get(b).unwrap_or(&0));
        cb.cmp(ca).then(a.cmp(b))
    });
    ranked.into_iter().take(k).collect()
}

pub fn evaluate(
    real: &TrajectoryDataset,
    gen: &TrajectoryDataset,
    constraint_locations: Option<&BTreeSet<u32>>,
    cfg: &MetricsConfig,
) -> Result<MetricsReport, MetricsError> {
    if real.grid != gen.grid || real.timespec != gen.timespec {
        return Err(MetricsError::GridMismatch);
    }
    let binning = Binning::from_real(real, cfg);
    let pairs = histogram_pairs(real, gen, &binning, cfg);
    let mut j = [0.0; 6];
    for (slot, (_, p, q)) in j.iter_mut().zip(&pairs) {
        *slot = jsd(p, q)?;
    }
    let (pr, pg) = (transition_matrix(real), transition_matrix(gen));
    let transition_frob = frobenius_diff(&pr, &pg, None)?;
    let top = constraint_locations.map(|locs| top_locations(real, locs, cfg.top_k_transition));
    let topk_transition_frob = top.as_ref().map(|s| frobenius_diff(&pr, &pg, Some(s))).transpose()?;
    Ok(MetricsReport {
        distance_jsd: j[0],
        gradius_jsd: j[1],
        duration_jsd: j[2],
        dailyloc_jsd: j[3],
        grank_jsd: j[4],
        irank_jsd: j[5],
        transition_frob,
        topk_transition_frob,
        meta: ReportMeta {
            real_trajectories: real.len(),
            generated_trajectories: gen.len(),
            binning,
            config: *cfg,
            top_k_locations: top.map(|s| s.into_iter().collect()),
            seed: None,
        },
    })
}

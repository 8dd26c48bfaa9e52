//! Raw GPS records to single-day staypoint trajectories.
//!
//! Pipeline: parse CSV, group by user, extract staypoints with an anchor
//! scan, discretize into visits grouped by calendar day (UTC), then drop
//! short days.

use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{haversine_km, GridSpec, TimeSpec};
use crate::traj::{Trajectory, TrajectoryDataset, Visit};

const COLUMNS: [&str; 4] = ["user_id", "timestamp", "lat", "lon"];

#[derive(Debug, Clone, PartialEq)]
pub struct GpsRecord {
    pub user_id: String,
    /// Epoch seconds.
    pub timestamp: i64,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RowProblem {
    FieldCount { expected: usize, found: usize },
    NonNumericField(&'static str),
    CoordinateOutOfRange,
}

impl fmt::Display for RowProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RowProblem::FieldCount { expected, found } => write!(f, "expected {expected} fields, found {found}"),
            RowProblem::NonNumericField(name) => write!(f, "field `{name}` is not numeric"),
            RowProblem::CoordinateOutOfRange => write!(f, "coordinate out of range"),
        }
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("missing CSV column `{0}`")]
    MissingColumn(String),
    #[error("line {line}: malformed row ({problem}): {text:?}")]
    MalformedRow { line: usize, text: String, problem: RowProblem },
    #[error("reading input: {0}")]
    Io(#[from] std::io::Error),
}

struct ColumnMap {
    idx: [usize; 4],
    width: usize,
}

fn read_header(line: &str) -> Result<ColumnMap, IngestError> {
    let names: Vec<&str> = line.split(',').map(|s| s.trim().trim_start_matches('\u{feff}')).collect();
    let mut idx = [0; 4];
    for (slot, col) in idx.iter_mut().zip(COLUMNS) {
        *slot = names.iter().position(|n| *n == col).ok_or_else(|| IngestError::MissingColumn(col.into()))?;
    }
    Ok(ColumnMap { idx, width: names.len() })
}

fn parse_row(cols: &ColumnMap, line_no: usize, line: &str) -> Result<GpsRecord, IngestError> {
    let bad = |problem| IngestError::MalformedRow { line: line_no, text: line.to_string(), problem };
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != cols.width {
        return Err(bad(RowProblem::FieldCount { expected: cols.width, found: fields.len() }));
    }
    let [u, t, la, lo] = cols.idx.map(|i| fields[i]);
    let timestamp = t
        .parse::<i64>()
        .ok()
        .or_else(|| t.parse::<f64>().ok().filter(|x| x.is_finite()).map(|x| x.floor() as i64))
        .ok_or_else(|| bad(RowProblem::NonNumericField("timestamp")))?;
    let lat: f64 = la.parse().ok().filter(|x: &f64| x.is_finite()).ok_or_else(|| bad(RowProblem::NonNumericField("lat")))?;
    let lon: f64 = lo.parse().ok().filter(|x: &f64| x.is_finite()).ok_or_else(|| bad(RowProblem::NonNumericField("lon")))?;
    if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
        return Err(bad(RowProblem::CoordinateOutOfRange));
    }
    Ok(GpsRecord { user_id: u.to_string(), timestamp, lat, lon })
}

/// Parse every row, collecting per-row errors instead of stopping. A missing
/// column or an I/O failure is still fatal.
pub fn parse_gps_csv_lenient<R: BufRead>(input: R) -> Result<(Vec<GpsRecord>, Vec<IngestError>), IngestError> {
    let mut lines = input.lines();
    let cols = match lines.next() {
        Some(header) => read_header(&header?)?,
        None => return Ok((Vec::new(), Vec::new())),
    };
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_row(&cols, i + 2, &line) {
            Ok(r) => records.push(r),
            Err(e) => errors.push(e),
        }
    }
    Ok((records, errors))
}

/// Parse `user_id,timestamp,lat,lon` rows in file order, failing on the first
/// bad row. Line numbers count the header as line 1.
pub fn parse_gps_csv<R: BufRead>(input: R) -> Result<Vec<GpsRecord>, IngestError> {
    let (records, mut errors) = parse_gps_csv_lenient(input)?;
    match errors.is_empty() {
        true => Ok(records),
        false => Err(errors.swap_remove(0)),
    }
}

/// Records per user, each list stably sorted by timestamp.
pub fn group_by_user(records: Vec<GpsRecord>) -> BTreeMap<String, Vec<GpsRecord>> {
    let mut by_user: BTreeMap<String, Vec<GpsRecord>> = BTreeMap::new();
    for r in records {
        by_user.entry(r.user_id.clone()).or_default().push(r);
    }
    for recs in by_user.values_mut() {
        recs.sort_by_key(|r| r.timestamp);
    }
    by_user
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Staypoint {
    pub lat: f64,
    pub lon: f64,
    pub t_arrive: i64,
    pub t_leave: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestParams {
    pub radius_km: f64,
    pub min_minutes: f64,
    pub min_visits: usize,
}

impl Default for IngestParams {
    fn default() -> Self {
        IngestParams { radius_km: 1.0, min_minutes: 20.0, min_visits: 3 }
    }
}

/// Anchor scan over one user's time-sorted records. A window grows from its
/// first point while points stay within `radius_km` of it; if the window
/// spans at least `min_minutes`, it becomes a staypoint at the mean of its
/// points and the scan resumes after it, otherwise the anchor advances by one.
pub fn extract_staypoints(records: &[GpsRecord], radius_km: f64, min_minutes: f64) -> Vec<Staypoint> {
    let min_secs = min_minutes * 60.0;
    let n = records.len();
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let anchor = &records[i];
        let mut j = i + 1;
        while j < n && haversine_km(anchor.lat, anchor.lon, records[j].lat, records[j].lon) <= radius_km {
            j += 1;
        }
        let last = &records[j - 1];
        if (last.timestamp - anchor.timestamp) as f64 >= min_secs {
            let members = &records[i..j];
            let k = members.len() as f64;
            out.push(Staypoint {
                lat: members.iter().map(|r| r.lat).sum::<f64>() / k,
                lon: members.iter().map(|r| r.lon).sum::<f64>() / k,
                t_arrive: anchor.timestamp,
                t_leave: last.timestamp,
            });
            i = j;
        } else {
            i += 1;
        }
    }
    out
}

/// Counters for records lost while building visits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    /// Staypoints whose coordinates fall outside the grid.
    pub out_of_bounds: usize,
    /// Staypoints sharing an arrival slot with the previous visit of the day.
    pub slot_collisions: usize,
}

/// Turn time-sorted staypoints into one trajectory per calendar day.
/// Durations round to the nearest slot (at least 1) and are clipped at
/// midnight and at the next visit's arrival.
pub fn split_days(
    user: &str,
    staypoints: &[Staypoint],
    grid: &GridSpec,
    ts: &TimeSpec,
) -> (Vec<Trajectory>, SplitCounts) {
    let slots = ts.slots_per_day();
    let slot_secs = ts.slot_seconds() as f64;
    let mut counts = SplitCounts::default();
    let mut days: BTreeMap<i64, Vec<Visit>> = BTreeMap::new();
    for sp in staypoints {
        let location = match grid.discretize_location(sp.lat, sp.lon) {
            Ok(cell) => cell,
            Err(_) => {
                counts.out_of_bounds += 1;
                continue;
            }
        };
        let day = sp.t_arrive.div_euclid(86_400);
        let arrival = ts.discretize_time(sp.t_arrive.rem_euclid(86_400)).expect("second of day in range");
        let rounded = ((sp.t_leave - sp.t_arrive) as f64 / slot_secs).round() as u32;
        let duration = rounded.max(1).min(slots - arrival);
        days.entry(day).or_default().push(Visit::new(arrival, location, duration));
    }
    let trajectories = days
        .into_iter()
        .map(|(day, visits)| {
            let mut kept: Vec<Visit> = Vec::with_capacity(visits.len());
            for v in visits {
                match kept.last_mut() {
                    Some(prev) if v.arrival <= prev.arrival => {
                        counts.slot_collisions += 1;
                        continue;
                    }
                    Some(prev) => prev.duration = prev.duration.min(v.arrival - prev.arrival),
                    None => {}
                }
                kept.push(v);
            }
            Trajectory::new(format!("{user}-{day}"), kept)
        })
        .collect();
    (trajectories, counts)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub records_read: usize,
    pub malformed_rows: usize,
    pub users: usize,
    pub staypoints: usize,
    pub staypoints_out_of_bounds: usize,
    pub slot_collisions: usize,
    pub trajectories_before_filter: usize,
    pub trajectories: usize,
}

/// Full preprocessing of one GPS CSV. Malformed rows are skipped and counted.
/// Returns the dataset, the statistics and the skipped-row errors.
pub fn build_dataset<R: BufRead>(
    input: R,
    grid: &GridSpec,
    ts: &TimeSpec,
    params: &IngestParams,
) -> Result<(TrajectoryDataset, IngestStats, Vec<IngestError>), IngestError> {
    let (records, errors) = parse_gps_csv_lenient(input)?;
    let mut stats = IngestStats {
        records_read: records.len(),
        malformed_rows: errors.len(),
        ..Default::default()
    };
    let by_user = group_by_user(records);
    stats.users = by_user.len();
    let mut trajectories = Vec::new();
    for (user, recs) in &by_user {
        let sps = extract_staypoints(recs, params.radius_km, params.min_minutes);
        stats.staypoints += sps.len();
        let (days, counts) = split_days(user, &sps, grid, ts);
        stats.staypoints_out_of_bounds += counts.out_of_bounds;
        stats.slot_collisions += counts.slot_collisions;
        trajectories.extend(days);
    }
    stats.trajectories_before_filter = trajectories.len();
    let ds = TrajectoryDataset::new(*grid, *ts, trajectories).filter_short(params.min_visits);
    stats.trajectories = ds.len();
    Ok((ds, stats, errors))
}

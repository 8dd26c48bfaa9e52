//! Line-oriented file formats.
//!
//! Trajectories: one JSON object per line, `{"id": .., "visits": [[arrival, location, duration], ..]}`,
//! with a sidecar `<stem>.header.json` holding the grid and time spec.
//! Constraints: one JSON object per line, `{"for": id-or-null, "constraints": [[loc, t_start, t_end, duration-or-null], ..]}`.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridSpec, TimeSpec};
use crate::traj::{ConstraintSet, Trajectory, TrajectoryDataset};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("trajectory {id:?} does not fit the dataset header: {reason}")]
    Invalid { id: String, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> FormatError + '_ {
    move |source| FormatError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub grid: GridSpec,
    pub timespec: TimeSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintRecord {
    #[serde(rename = "for")]
    pub target: Option<String>,
    pub constraints: ConstraintSet,
}

pub fn write_jsonl<W: Write, T: Serialize>(mut w: W, items: &[T]) -> io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Parse one JSON value per non-blank line.
pub fn read_jsonl<R: BufRead, T: DeserializeOwned>(r: R) -> Result<Vec<T>, FormatError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|source| FormatError::Io { path: "<stream>".into(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| FormatError::Json { line: i + 1, source })?);
    }
    Ok(out)
}

/// `dir/name.jsonl` -> `dir/name.header.json`.
pub fn header_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.header.json"))
}

pub fn save_dataset(path: &Path, ds: &TrajectoryDataset) -> Result<(), FormatError> {
    let f = File::create(path).map_err(io_err(path))?;
    write_jsonl(BufWriter::new(f), &ds.trajectories).map_err(io_err(path))?;
    let hp = header_path(path);
    let header = DatasetHeader { grid: ds.grid, timespec: ds.timespec };
    let mut text = serde_json::to_string_pretty(&header).expect("header serializes");
    text.push('\n');
    std::fs::write(&hp, text).map_err(io_err(&hp))
}

pub fn load_dataset(path: &Path) -> Result<TrajectoryDataset, FormatError> {
    let hp = header_path(path);
    let header_text = std::fs::read_to_string(&hp).map_err(io_err(&hp))?;
    let header: DatasetHeader =
        serde_json::from_str(&header_text).map_err(|source| FormatError::Json { line: 1, source })?;
    let f = File::open(path).map_err(io_err(path))?;
    let trajectories: Vec<Trajectory> = read_jsonl(BufReader::new(f))?;
    let ds = TrajectoryDataset::new(header.grid, header.timespec, trajectories);
    if let Some((id, violations)) = ds.invalid().into_iter().next() {
        let reason = violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ");
        return Err(FormatError::Invalid { id, reason });
    }
    Ok(ds)
}

pub fn save_constraints(path: &Path, records: &[ConstraintRecord]) -> Result<(), FormatError> {
    let f = File::create(path).map_err(io_err(path))?;
    write_jsonl(BufWriter::new(f), records).map_err(io_err(path))
}

pub fn load_constraints(path: &Path) -> Result<Vec<ConstraintRecord>, FormatError> {
    let f = File::open(path).map_err(io_err(path))?;
    read_jsonl(BufReader::new(f))
}

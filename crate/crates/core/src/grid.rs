//! Spatial grid and time-slot discretization.
//!
//! Cells are numbered row-major from the southwest corner, starting at 1.
//! Longitude widths use a fixed kilometers-per-degree taken at the box's
//! mid-latitude, which is accurate to well under a meter per kilometer at
//! city scale.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius in kilometers.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

const SECONDS_PER_DAY: u32 = 86_400;
const MINUTES_PER_DAY: u32 = 1_440;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GridError {
    #[error("point ({lat}, {lon}) lies outside the grid bounding box")]
    OutOfBounds { lat: f64, lon: f64 },
    #[error("timestamp {0} s is outside [0, 86400)")]
    OutOfRange(i64),
    #[error("cell id {0} is not in the grid")]
    InvalidCell(u32),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid time spec: {0}")]
    InvalidTimeSpec(String),
}

/// Kilometers per degree of latitude on the reference sphere.
pub fn km_per_deg_lat() -> f64 {
    EARTH_RADIUS_KM * std::f64::consts::PI / 180.0
}

/// Great-circle distance in kilometers.
pub fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub origin_lat: f64,
    pub origin_lon: f64,
    #[serde(default = "default_cell_km")]
    pub cell_km: f64,
    pub n_rows: u32,
    pub n_cols: u32,
}

fn default_cell_km() -> f64 {
    1.0
}

impl GridSpec {
    pub fn new(
        origin_lat: f64,
        origin_lon: f64,
        cell_km: f64,
        n_rows: u32,
        n_cols: u32,
    ) -> Result<Self, GridError> {
        let grid = GridSpec { origin_lat, origin_lon, cell_km, n_rows, n_cols };
        grid.check()?;
        Ok(grid)
    }

    pub fn check(&self) -> Result<(), GridError> {
        if !(self.cell_km.is_finite() && self.cell_km > 0.0) {
            return Err(GridError::InvalidGrid(format!("cell_km must be > 0, got {}", self.cell_km)));
        }
        if self.n_rows == 0 || self.n_cols == 0 {
            return Err(GridError::InvalidGrid("grid needs at least one row and column".into()));
        }
        if !(-90.0..=90.0).contains(&self.origin_lat) || !(-180.0..=180.0).contains(&self.origin_lon) {
            return Err(GridError::InvalidGrid("origin is not a valid coordinate".into()));
        }
        let top = self.origin_lat + self.n_rows as f64 * self.cell_lat_deg();
        if top >= 90.0 {
            return Err(GridError::InvalidGrid("grid extends past the pole".into()));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> u32 {
        self.n_rows * self.n_cols
    }

    pub fn contains_cell(&self, cell: u32) -> bool {
        cell >= 1 && cell <= self.n_cells()
    }

    /// Cell height in degrees of latitude.
    pub fn cell_lat_deg(&self) -> f64 {
        self.cell_km / km_per_deg_lat()
    }

    /// Cell width in degrees of longitude, fixed at the mid-latitude of the box.
    pub fn cell_lon_deg(&self) -> f64 {
        let mid = self.origin_lat + 0.5 * self.n_rows as f64 * self.cell_lat_deg();
        self.cell_km / (km_per_deg_lat() * mid.to_radians().cos())
    }

    /// Row-major cell id (1-based) containing the point. Cell edges are
    /// lower-inclusive; the north and east edges of the box belong to the last
    /// row and column.
    pub fn discretize_location(&self, lat: f64, lon: f64) -> Result<u32, GridError> {
        let row = axis_index(lat - self.origin_lat, self.cell_lat_deg(), self.n_rows);
        let col = axis_index(lon - self.origin_lon, self.cell_lon_deg(), self.n_cols);
        match (row, col) {
            (Some(r), Some(c)) => Ok(r * self.n_cols + c + 1),
            _ => Err(GridError::OutOfBounds { lat, lon }),
        }
    }

    /// Zero-based (row, col) of a cell.
    pub fn row_col(&self, cell: u32) -> Result<(u32, u32), GridError> {
        if !self.contains_cell(cell) {
            return Err(GridError::InvalidCell(cell));
        }
        let idx = cell - 1;
        Ok((idx / self.n_cols, idx % self.n_cols))
    }

    /// Geographic center `(lat, lon)` of a cell.
    pub fn cell_centroid(&self, cell: u32) -> Result<(f64, f64), GridError> {
        let (r, c) = self.row_col(cell)?;
        Ok((
            self.origin_lat + (r as f64 + 0.5) * self.cell_lat_deg(),
            self.origin_lon + (c as f64 + 0.5) * self.cell_lon_deg(),
        ))
    }

    /// Cell center in local planar kilometers, measured from the origin.
    pub fn cell_center_km(&self, cell: u32) -> Result<(f64, f64), GridError> {
        let (r, c) = self.row_col(cell)?;
        Ok(((c as f64 + 0.5) * self.cell_km, (r as f64 + 0.5) * self.cell_km))
    }
}

fn axis_index(offset: f64, step: f64, n: u32) -> Option<u32> {
    if !offset.is_finite() || offset < 0.0 {
        return None;
    }
    let extent = step * n as f64;
    if offset > extent * (1.0 + 1e-12) {
        return None;
    }
    let idx = (offset / step).floor();
    Some((idx as u32).min(n - 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSpec {
    pub slot_minutes: u32,
}

impl Default for TimeSpec {
    fn default() -> Self {
        TimeSpec { slot_minutes: 15 }
    }
}

impl TimeSpec {
    pub fn new(slot_minutes: u32) -> Result<Self, GridError> {
        let ts = TimeSpec { slot_minutes };
        ts.check()?;
        Ok(ts)
    }

    pub fn check(&self) -> Result<(), GridError> {
        if self.slot_minutes == 0 || MINUTES_PER_DAY % self.slot_minutes != 0 {
            return Err(GridError::InvalidTimeSpec(format!(
                "slot_minutes must divide 1440, got {}",
                self.slot_minutes
            )));
        }
        Ok(())
    }

    pub fn slots_per_day(&self) -> u32 {
        MINUTES_PER_DAY / self.slot_minutes
    }

    pub fn slot_seconds(&self) -> u32 {
        self.slot_minutes * 60
    }

    /// Slot index of a second-of-day.
    pub fn discretize_time(&self, seconds_of_day: i64) -> Result<u32, GridError> {
        if !(0..SECONDS_PER_DAY as i64).contains(&seconds_of_day) {
            return Err(GridError::OutOfRange(seconds_of_day));
        }
        Ok((seconds_of_day / self.slot_seconds() as i64) as u32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid10() -> GridSpec {
        GridSpec::new(39.9, 116.3, 1.0, 10, 10).unwrap()
    }

    /// Independent oracle: scan every cell's bounding box.
    fn scan_cells(grid: &GridSpec, lat: f64, lon: f64) -> Option<u32> {
        let (h, w) = (grid.cell_lat_deg(), grid.cell_lon_deg());
        for r in 0..grid.n_rows {
            for c in 0..grid.n_cols {
                let south = grid.origin_lat + r as f64 * h;
                let west = grid.origin_lon + c as f64 * w;
                if lat >= south && lat < south + h && lon >= west && lon < west + w {
                    return Some(r * grid.n_cols + c + 1);
                }
            }
        }
        None
    }

    #[test]
    fn origin_is_first_cell() {
        let g = grid10();
        assert_eq!(g.discretize_location(g.origin_lat, g.origin_lon).unwrap(), 1);
    }

    #[test]
    fn one_cell_east_is_cell_two() {
        let g = grid10();
        let lon = g.origin_lon + g.cell_lon_deg();
        assert_eq!(g.discretize_location(g.origin_lat, lon).unwrap(), 2);
    }

    #[test]
    fn center_of_row2_col3_is_cell_24() {
        let g = grid10();
        let lat = g.origin_lat + 2.5 * g.cell_lat_deg();
        let lon = g.origin_lon + 3.5 * g.cell_lon_deg();
        assert_eq!(scan_cells(&g, lat, lon), Some(24));
        assert_eq!(g.discretize_location(lat, lon).unwrap(), 24);
    }

    #[test]
    fn outside_box_is_rejected() {
        let g = grid10();
        assert!(matches!(
            g.discretize_location(g.origin_lat - 0.001, g.origin_lon),
            Err(GridError::OutOfBounds { .. })
        ));
        let far_east = g.origin_lon + 10.5 * g.cell_lon_deg();
        assert!(g.discretize_location(g.origin_lat, far_east).is_err());
    }

    #[test]
    fn north_east_corner_belongs_to_last_cell() {
        let g = grid10();
        let lat = g.origin_lat + 10.0 * g.cell_lat_deg();
        let lon = g.origin_lon + 10.0 * g.cell_lon_deg();
        assert_eq!(g.discretize_location(lat, lon).unwrap(), 100);
    }

    #[test]
    fn discretize_agrees_with_box_scan() {
        let g = GridSpec::new(51.4, -0.2, 1.0, 7, 9).unwrap();
        for i in 0..70 {
            for j in 0..90 {
                let lat = g.origin_lat + (i as f64 + 0.37) * g.cell_lat_deg() / 10.0;
                let lon = g.origin_lon + (j as f64 + 0.61) * g.cell_lon_deg() / 10.0;
                assert_eq!(scan_cells(&g, lat, lon), Some(g.discretize_location(lat, lon).unwrap()));
            }
        }
    }

    #[test]
    fn time_slots() {
        let ts = TimeSpec::default();
        assert_eq!(ts.slots_per_day(), 96);
        assert_eq!(ts.discretize_time(0).unwrap(), 0);
        assert_eq!(ts.discretize_time(86_399).unwrap(), 95);
        assert_eq!(ts.discretize_time(34_200).unwrap(), 38);
        // slot boundaries around 09:30
        assert_eq!(ts.discretize_time(34_199).unwrap(), 37);
        assert_eq!(ts.discretize_time(35_099).unwrap(), 38);
        assert!(matches!(ts.discretize_time(86_400), Err(GridError::OutOfRange(_))));
        assert!(ts.discretize_time(-1).is_err());
    }

    #[test]
    fn time_spec_must_divide_day() {
        assert!(TimeSpec::new(7).is_err());
        assert!(TimeSpec::new(0).is_err());
        assert_eq!(TimeSpec::new(30).unwrap().slots_per_day(), 48);
    }

    #[test]
    fn centroid_of_first_cell() {
        let g = grid10();
        let (lat, lon) = g.cell_centroid(1).unwrap();
        assert!((lat - (g.origin_lat + 0.5 * g.cell_lat_deg())).abs() < 1e-12);
        assert!((lon - (g.origin_lon + 0.5 * g.cell_lon_deg())).abs() < 1e-12);
        assert!(matches!(g.cell_centroid(0), Err(GridError::InvalidCell(0))));
        assert!(g.cell_centroid(101).is_err());
    }

    #[test]
    fn centroid_roundtrip_5x5() {
        let g = GridSpec::new(40.0, -74.0, 1.0, 5, 5).unwrap();
        for cell in 1..=25 {
            let (lat, lon) = g.cell_centroid(cell).unwrap();
            assert_eq!(g.discretize_location(lat, lon).unwrap(), cell);
        }
    }

    #[test]
    fn adjacent_centroids_are_one_cell_apart() {
        let g = grid10();
        for row in 0..10 {
            let a = row * 10 + 4;
            let (la, oa) = g.cell_centroid(a).unwrap();
            let (lb, ob) = g.cell_centroid(a + 1).unwrap();
            let d = haversine_km(la, oa, lb, ob);
            assert!((d - 1.0).abs() < 1e-3, "row {row}: {d}");
        }
        let (la, oa) = g.cell_centroid(5).unwrap();
        let (lb, ob) = g.cell_centroid(15).unwrap();
        assert!((haversine_km(la, oa, lb, ob) - 1.0).abs() < 1e-3);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn centroid_inverts_discretize(rows in 1u32..30, cols in 1u32..30, lat in -60.0f64..60.0, lon in -170.0f64..170.0, km in 0.1f64..3.0) {
                let g = GridSpec::new(lat, lon, km, rows, cols).unwrap();
                for cell in 1..=g.n_cells() {
                    let (clat, clon) = g.cell_centroid(cell).unwrap();
                    prop_assert_eq!(g.discretize_location(clat, clon).unwrap(), cell);
                }
            }
        }
    }
}

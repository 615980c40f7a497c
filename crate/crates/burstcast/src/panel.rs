//! Spatio-temporal count panels: data model, CSV ingestion, log transform,
//! and the sparsity / quantile statistics the routing logic relies on.
//!
//! A panel is a dense 3-axis tensor of non-negative counts indexed by
//! (location, event code, time). Cells absent from the input file are
//! structural zeros. Panels are immutable after load and safe to share
//! across threads.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One spatial unit (e.g. an administrative region).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub id: i64,
    pub latitude: f64,
    pub longitude: f64,
    pub region_label: String,
}

impl Location {
    pub fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.latitude) {
            return Err(Error::Validation(format!(
                "location {}: latitude {} outside [-90, 90]",
                self.id, self.latitude
            )));
        }
        if !(-180.0..=180.0).contains(&self.longitude) {
            return Err(Error::Validation(format!(
                "location {}: longitude {} outside [-180, 180]",
                self.id, self.longitude
            )));
        }
        Ok(())
    }
}

/// Identifies one series inside a panel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SeriesKey {
    pub location_id: i64,
    pub event_code: i64,
}

impl fmt::Display for SeriesKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.location_id, self.event_code)
    }
}

/// Panel time resolution. Only affects labelling; time arithmetic is a plain
/// integer offset from `start_index`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeStep {
    Weekly,
    Daily,
}

/// Dense (location x event_code x time) count tensor plus its axis metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventPanel {
    pub locations: Vec<Location>,
    pub event_codes: Vec<i64>,
    /// Row-major counts, indexed `[loc][code][t]`.
    counts: Vec<u32>,
    pub time_step: TimeStep,
    pub start_index: i64,
    num_steps: usize,
}

impl EventPanel {
    /// Builds a validated panel from dense counts in `[loc][code][t]` order.
    pub fn new(
        locations: Vec<Location>,
        event_codes: Vec<i64>,
        counts: Vec<u32>,
        time_step: TimeStep,
        start_index: i64,
        num_steps: usize,
    ) -> Result<Self> {
        let expect = locations.len() * event_codes.len() * num_steps;
        if counts.len() != expect {
            return Err(Error::Shape(format!(
                "counts length {} does not match {} locations x {} codes x {} steps",
                counts.len(),
                locations.len(),
                event_codes.len(),
                num_steps
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for loc in &locations {
            loc.validate()?;
            if !seen.insert(loc.id) {
                return Err(Error::Validation(format!("duplicate location id {}", loc.id)));
            }
        }
        let mut codes_seen = std::collections::BTreeSet::new();
        for c in &event_codes {
            if !codes_seen.insert(*c) {
                return Err(Error::Validation(format!("duplicate event code {c}")));
            }
        }
        Ok(Self { locations, event_codes, counts, time_step, start_index, num_steps })
    }

    pub fn num_locations(&self) -> usize {
        self.locations.len()
    }

    pub fn num_codes(&self) -> usize {
        self.event_codes.len()
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    /// Last valid absolute time index.
    pub fn end_index(&self) -> i64 {
        self.start_index + self.num_steps as i64 - 1
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.locations.len(), self.event_codes.len(), self.num_steps)
    }

    pub fn num_series(&self) -> usize {
        self.locations.len() * self.event_codes.len()
    }

    /// Series keys in (location, code) axis order.
    pub fn series_keys(&self) -> Vec<SeriesKey> {
        let mut out = Vec::with_capacity(self.num_series());
        for loc in &self.locations {
            for code in &self.event_codes {
                out.push(SeriesKey { location_id: loc.id, event_code: *code });
            }
        }
        out
    }

    pub fn location_index(&self, id: i64) -> Option<usize> {
        self.locations.iter().position(|l| l.id == id)
    }

    pub fn code_index(&self, code: i64) -> Option<usize> {
        self.event_codes.iter().position(|c| *c == code)
    }

    pub fn location(&self, id: i64) -> Option<&Location> {
        self.locations.iter().find(|l| l.id == id)
    }

    fn flat(&self, loc_idx: usize, code_idx: usize, t_off: usize) -> usize {
        (loc_idx * self.event_codes.len() + code_idx) * self.num_steps + t_off
    }

    /// Count by axis offsets.
    pub fn count_at(&self, loc_idx: usize, code_idx: usize, t_off: usize) -> u32 {
        self.counts[self.flat(loc_idx, code_idx, t_off)]
    }

    /// Count for a series at an absolute time index.
    pub fn count(&self, key: SeriesKey, time_index: i64) -> Result<u32> {
        let li = self
            .location_index(key.location_id)
            .ok_or_else(|| Error::Validation(format!("unknown location id {}", key.location_id)))?;
        let ci = self
            .code_index(key.event_code)
            .ok_or_else(|| Error::Validation(format!("unknown event code {}", key.event_code)))?;
        let off = time_index - self.start_index;
        if off < 0 || off >= self.num_steps as i64 {
            return Err(Error::Validation(format!(
                "time index {time_index} outside [{}, {}]",
                self.start_index,
                self.end_index()
            )));
        }
        Ok(self.count_at(li, ci, off as usize))
    }

    /// Full history of one series as counts, in time order.
    pub fn series(&self, key: SeriesKey) -> Result<Vec<u32>> {
        let li = self
            .location_index(key.location_id)
            .ok_or_else(|| Error::Validation(format!("unknown location id {}", key.location_id)))?;
        let ci = self
            .code_index(key.event_code)
            .ok_or_else(|| Error::Validation(format!("unknown event code {}", key.event_code)))?;
        Ok(self.series_by_index(li, ci).to_vec())
    }

    pub fn series_by_index(&self, loc_idx: usize, code_idx: usize) -> &[u32] {
        let base = self.flat(loc_idx, code_idx, 0);
        &self.counts[base..base + self.num_steps]
    }

    /// Copy of the panel restricted to absolute time indices
    /// `[start_index, end_index]`; used to carve out a training range.
    pub fn truncated(&self, end_index: i64) -> Result<EventPanel> {
        if end_index < self.start_index || end_index > self.end_index() {
            return Err(Error::Validation(format!(
                "truncation end {end_index} outside [{}, {}]",
                self.start_index,
                self.end_index()
            )));
        }
        let steps = (end_index - self.start_index + 1) as usize;
        let mut counts = Vec::with_capacity(self.num_locations() * self.num_codes() * steps);
        for li in 0..self.num_locations() {
            for ci in 0..self.num_codes() {
                let series = self.series_by_index(li, ci);
                counts.extend_from_slice(&series[..steps]);
            }
        }
        EventPanel::new(
            self.locations.clone(),
            self.event_codes.clone(),
            counts,
            self.time_step,
            self.start_index,
            steps,
        )
    }

    /// Errors if any event code falls outside the 20-class vocabulary.
    /// Synthetic panels with free integer codes skip this check.
    pub fn validate_cameo(&self) -> Result<()> {
        for c in &self.event_codes {
            if cameo::name(*c).is_none() {
                return Err(Error::Validation(format!(
                    "event code {c} is not in the 20-code vocabulary"
                )));
            }
        }
        Ok(())
    }
}

/// Loads a panel from the CSV format
/// `location_id,lat,lon,event_code,time_index,count` (header required).
/// Missing cells are materialized as zeros.
pub fn load_panel(path: impl AsRef<Path>) -> Result<EventPanel> {
    let file = std::fs::File::open(path.as_ref())?;
    parse_panel_csv(BufReader::new(file))
}

pub fn parse_panel_csv(reader: impl BufRead) -> Result<EventPanel> {
    let mut lines = reader.lines().enumerate();
    let header = match lines.next() {
        Some((_, line)) => line?,
        None => return Err(Error::Parse { line: 1, msg: "empty file".into() }),
    };
    let expect_header = "location_id,lat,lon,event_code,time_index,count";
    if header.trim() != expect_header {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header `{expect_header}`, found `{}`", header.trim()),
        });
    }

    let mut locations: BTreeMap<i64, (f64, f64)> = BTreeMap::new();
    let mut cells: BTreeMap<(i64, i64, i64), u32> = BTreeMap::new();

    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 6 fields, found {}", fields.len()),
            });
        }
        let parse_int = |s: &str, what: &str| -> Result<i64> {
            s.trim().parse::<i64>().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("invalid {what}: `{s}`"),
            })
        };
        let parse_float = |s: &str, what: &str| -> Result<f64> {
            s.trim().parse::<f64>().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("invalid {what}: `{s}`"),
            })
        };
        let loc_id = parse_int(fields[0], "location_id")?;
        let lat = parse_float(fields[1], "lat")?;
        let lon = parse_float(fields[2], "lon")?;
        let code = parse_int(fields[3], "event_code")?;
        let t = parse_int(fields[4], "time_index")?;
        let count = parse_int(fields[5], "count")?;
        if count < 0 {
            return Err(Error::Validation(format!(
                "line {line_no}: negative count {count} for location {loc_id}, code {code}, t={t}"
            )));
        }
        if count > u32::MAX as i64 {
            return Err(Error::Validation(format!("line {line_no}: count {count} too large")));
        }

        if let Some(&(lat0, lon0)) = locations.get(&loc_id) {
            if lat0 != lat || lon0 != lon {
                return Err(Error::Validation(format!(
                    "line {line_no}: location {loc_id} re-declared with different coordinates"
                )));
            }
        } else {
            locations.insert(loc_id, (lat, lon));
        }

        if cells.insert((loc_id, code, t), count as u32).is_some() {
            return Err(Error::Validation(format!(
                "line {line_no}: duplicate cell (location {loc_id}, code {code}, t={t})"
            )));
        }
    }

    if cells.is_empty() {
        return Err(Error::Validation("panel file contains no data rows".into()));
    }

    let mut codes: Vec<i64> = cells.keys().map(|k| k.1).collect();
    codes.sort_unstable();
    codes.dedup();
    let t_min = cells.keys().map(|k| k.2).min().unwrap();
    let t_max = cells.keys().map(|k| k.2).max().unwrap();
    let num_steps = (t_max - t_min + 1) as usize;

    let locs: Vec<Location> = locations
        .iter()
        .map(|(&id, &(lat, lon))| Location {
            id,
            latitude: lat,
            longitude: lon,
            region_label: String::new(),
        })
        .collect();

    let mut counts = vec![0u32; locs.len() * codes.len() * num_steps];
    for ((loc_id, code, t), c) in &cells {
        let li = locs.iter().position(|l| l.id == *loc_id).unwrap();
        let ci = codes.iter().position(|x| x == code).unwrap();
        let off = (t - t_min) as usize;
        counts[(li * codes.len() + ci) * num_steps + off] = *c;
    }

    EventPanel::new(locs, codes, counts, TimeStep::Weekly, t_min, num_steps)
}

/// Writes a panel in the same CSV format `load_panel` reads. Every cell is
/// written (including zeros) so that load ∘ save is the identity.
pub fn save_panel(panel: &EventPanel, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    writeln!(f, "location_id,lat,lon,event_code,time_index,count")?;
    for (li, loc) in panel.locations.iter().enumerate() {
        for (ci, code) in panel.event_codes.iter().enumerate() {
            for off in 0..panel.num_steps() {
                writeln!(
                    f,
                    "{},{},{},{},{},{}",
                    loc.id,
                    loc.latitude,
                    loc.longitude,
                    code,
                    panel.start_index + off as i64,
                    panel.count_at(li, ci, off)
                )?;
            }
        }
    }
    Ok(())
}

/// `log(count + epsilon)`; with the default `epsilon = 1` zero counts map to
/// exactly 0 on the log scale.
pub fn log_transform(count: u32, epsilon: f64) -> f64 {
    debug_assert!(epsilon > 0.0);
    ((count as f64) + epsilon).ln()
}

/// Inverse of [`log_transform`] on the count scale, clamped at zero.
pub fn inverse_log_transform(log_value: f64, epsilon: f64) -> f64 {
    (log_value.exp() - epsilon).max(0.0)
}

/// Fraction of exact zeros in `window`.
pub fn sparsity_metric(window: &[u32]) -> Result<f64> {
    if window.is_empty() {
        return Err(Error::Domain("sparsity metric of an empty window".into()));
    }
    let zeros = window.iter().filter(|&&c| c == 0).count();
    Ok(zeros as f64 / window.len() as f64)
}

/// Order-statistic quantile with linear interpolation between closest ranks.
pub fn empirical_quantile(history: &[f64], tau: f64) -> Result<f64> {
    if history.is_empty() {
        return Err(Error::Domain("quantile of an empty history".into()));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Domain(format!("quantile level {tau} outside [0, 1]")));
    }
    let mut sorted = history.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite history value"));
    let n = sorted.len();
    if n == 1 {
        return Ok(sorted[0]);
    }
    let pos = tau * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// [`empirical_quantile`] over integer counts.
pub fn empirical_count_quantile(history: &[u32], tau: f64) -> Result<f64> {
    let as_f: Vec<f64> = history.iter().map(|&c| c as f64).collect();
    empirical_quantile(&as_f, tau)
}

/// The 20-class event-type vocabulary used by tagged panels.
pub mod cameo {
    pub const CODES: [(i64, &str); 20] = [
        (1, "Make Public Statement"),
        (2, "Appeal"),
        (3, "Express Intent to Cooperate"),
        (4, "Consult"),
        (5, "Engage in Diplomatic Cooperation"),
        (6, "Engage in Material Cooperation"),
        (7, "Provide Aid"),
        (8, "Yield"),
        (9, "Investigate"),
        (10, "Demand"),
        (11, "Disapprove"),
        (12, "Reject"),
        (13, "Threaten"),
        (14, "Protest"),
        (15, "Exhibit Military Posture"),
        (16, "Reduce Relations"),
        (17, "Coerce"),
        (18, "Assault"),
        (19, "Fight"),
        (20, "Engage in Unconventional Mass Violence"),
    ];

    pub fn name(code: i64) -> Option<&'static str> {
        CODES.iter().find(|(c, _)| *c == code).map(|(_, n)| *n)
    }
}

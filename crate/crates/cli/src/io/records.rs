//! Visual-field record files.
//!
//! Columns: `patient_id, eye, visit, years | date, location, sensitivity_db,
//! reliable`. Locations use the 54-point instrument numbering; the two
//! blind-spot points are dropped and the remaining 52 split into a superior
//! (1..=27 without 26) and an inferior (28..=54 without 35) hemifield of 26.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use chrono::NaiveDate;
use vfmodel_core::model::LOCATIONS_PER_HEMIFIELD;
use vfmodel_core::{Eye, IndividualData, Observation};

use super::{num, parse_num, read_table, write_table};
use crate::error::{CliError, Result};

pub const BLIND_SPOT: [u8; 2] = [26, 35];
pub const INSTRUMENT_LOCATIONS: u8 = 54;
const MAX_DB: f64 = 50.0;
const DAYS_PER_YEAR: f64 = 365.25;

/// (hemifield, location) of an instrument point, `None` for the blind spot.
pub fn map_location(index: u8) -> Option<(u8, u8)> {
    if BLIND_SPOT.contains(&index) || !(1..=INSTRUMENT_LOCATIONS).contains(&index) {
        return None;
    }
    if index <= 27 {
        Some((1, index - (index > 26) as u8))
    } else {
        let k = index - 27;
        Some((2, k - (index > 35) as u8))
    }
}

/// Instrument point of a (hemifield, location) slot.
pub fn instrument_index(hemifield: u8, location: u8) -> u8 {
    debug_assert!((1..=LOCATIONS_PER_HEMIFIELD).contains(&location));
    if hemifield == 1 {
        location + (location >= 26) as u8
    } else {
        let k = location + 27;
        k + (k >= 35) as u8
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ingested {
    pub data: Vec<IndividualData>,
    /// Rows of visual fields flagged unreliable.
    pub dropped_unreliable: usize,
    pub dropped_blind_spot: usize,
}

enum Time {
    Years(f64),
    Date(NaiveDate),
}

struct Row {
    line: u64,
    eye: Eye,
    visit: u32,
    time: Time,
    hemifield: u8,
    location: u8,
    db: f64,
}

fn parse_eye(s: &str) -> Option<Eye> {
    match s.to_ascii_uppercase().as_str() {
        "OD" | "R" | "RIGHT" => Some(Eye::Od),
        "OS" | "L" | "LEFT" => Some(Eye::Os),
        _ => None,
    }
}

fn parse_flag(s: &str) -> Option<bool> {
    match s.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "y" => Some(true),
        "0" | "false" | "no" | "n" => Some(false),
        _ => None,
    }
}

/// Reads a record file into one [`IndividualData`] per patient, ordered by id.
pub fn ingest(path: &Path) -> Result<Ingested> {
    let t = read_table(path)?;
    let col = |name: &str| {
        t.column(name)
            .ok_or_else(|| CliError::parse(path, 1, format!("missing column {name}")))
    };
    let (c_id, c_eye, c_visit, c_loc, c_db) = (
        col("patient_id")?,
        col("eye")?,
        col("visit")?,
        col("location")?,
        col("sensitivity_db")?,
    );
    let (c_years, c_date) = (t.column("years"), t.column("date"));
    if c_years.is_some() == c_date.is_some() {
        return Err(CliError::parse(
            path,
            1,
            "exactly one of the columns years, date is required",
        ));
    }
    let c_rel = t.column("reliable");

    let mut groups: BTreeMap<String, Vec<Row>> = BTreeMap::new();
    let mut seen = HashSet::new();
    let (mut unreliable, mut blind) = (0, 0);
    for (line, f) in &t.rows {
        let line = *line;
        let bad = |msg: String| CliError::parse(path, line, msg);
        if f.len() != t.header.len() {
            return Err(bad(format!(
                "expected {} fields, found {}",
                t.header.len(),
                f.len()
            )));
        }
        let id = f[c_id].clone();
        // Ids name files and manifest lists.
        if id.is_empty() || id.contains([',', '/', '\\']) || id.starts_with('.') {
            return Err(bad(format!("unusable patient_id {id:?}")));
        }
        let eye = parse_eye(&f[c_eye])
            .ok_or_else(|| bad(format!("eye must be OD or OS, got {:?}", f[c_eye])))?;
        let visit: u32 = f[c_visit].parse().ok().filter(|v| *v >= 1).ok_or_else(|| {
            bad(format!(
                "visit must be a positive integer, got {:?}",
                f[c_visit]
            ))
        })?;
        let index: u8 = f[c_loc]
            .parse()
            .ok()
            .filter(|l| (1..=INSTRUMENT_LOCATIONS).contains(l))
            .ok_or_else(|| bad(format!("location must be in 1..=54, got {:?}", f[c_loc])))?;
        let db = parse_num(path, line, &f[c_db])?;
        if !(0.0..=MAX_DB).contains(&db) {
            return Err(bad(format!("sensitivity {db} outside [0, 50] dB")));
        }
        let time = match (c_years, c_date) {
            (Some(c), _) => {
                let y = parse_num(path, line, &f[c])?;
                if !(y >= 0.0) {
                    return Err(bad(format!("years must be >= 0, got {y}")));
                }
                Time::Years(y)
            }
            (_, Some(c)) => Time::Date(
                NaiveDate::parse_from_str(&f[c], "%Y-%m-%d")
                    .map_err(|_| bad(format!("date must be YYYY-MM-DD, got {:?}", f[c])))?,
            ),
            _ => unreachable!(),
        };
        let reliable = match c_rel {
            Some(c) => parse_flag(&f[c])
                .ok_or_else(|| bad(format!("reliable must be 1 or 0, got {:?}", f[c])))?,
            None => true,
        };
        if !seen.insert((id.clone(), eye, visit, index)) {
            return Err(bad(format!(
                "duplicate reading for {id} {} visit {visit} location {index}",
                eye.label()
            )));
        }
        if !reliable {
            unreliable += 1;
            continue;
        }
        let Some((hemifield, location)) = map_location(index) else {
            blind += 1;
            continue;
        };
        groups.entry(id).or_default().push(Row {
            line,
            eye,
            visit,
            time,
            hemifield,
            location,
            db,
        });
    }

    let mut data = Vec::with_capacity(groups.len());
    for (i, (id, rows)) in groups.into_iter().enumerate() {
        let years: Vec<f64> = match rows[0].time {
            Time::Years(_) => {
                let ys: Vec<f64> = rows
                    .iter()
                    .map(|r| if let Time::Years(y) = r.time { y } else { 0.0 })
                    .collect();
                let first = ys.iter().copied().fold(f64::INFINITY, f64::min);
                ys.iter().map(|y| y - first).collect()
            }
            Time::Date(_) => {
                let ds: Vec<NaiveDate> = rows
                    .iter()
                    .map(|r| {
                        if let Time::Date(d) = r.time {
                            d
                        } else {
                            NaiveDate::MIN
                        }
                    })
                    .collect();
                let first = *ds.iter().min().unwrap();
                ds.iter()
                    .map(|d| (*d - first).num_days() as f64 / DAYS_PER_YEAR)
                    .collect()
            }
        };
        let mut obs = Vec::with_capacity(rows.len());
        for (r, y) in rows.iter().zip(years) {
            obs.push(
                Observation::from_reading(i, r.eye, r.hemifield, r.location, r.visit, y, r.db)
                    .map_err(|e| CliError::parse(path, r.line, e.to_string()))?,
            );
        }
        data.push(
            IndividualData::new(id, obs)
                .map_err(|e| CliError::Artifact(format!("{}: {e}", path.display())))?,
        );
    }
    Ok(Ingested {
        data,
        dropped_unreliable: unreliable,
        dropped_blind_spot: blind,
    })
}

pub const RECORD_HEADER: [&str; 7] = [
    "patient_id",
    "eye",
    "visit",
    "years",
    "location",
    "sensitivity_db",
    "reliable",
];

/// Writes observations in record-file form, all flagged reliable.
pub fn write_records(path: &Path, data: &[IndividualData]) -> Result<()> {
    let mut rows = Vec::new();
    for d in data {
        for o in &d.observations {
            rows.push(vec![
                d.individual_id.clone(),
                o.eye.label().to_string(),
                o.visit.to_string(),
                num(o.years),
                instrument_index(o.hemifield, o.location).to_string(),
                num(o.observed_db),
                "1".to_string(),
            ]);
        }
    }
    write_table(path, &RECORD_HEADER, &rows)
}

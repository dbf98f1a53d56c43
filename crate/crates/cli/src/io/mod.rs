//! Plain-text file formats: comma-separated tables with a header row and
//! flat `key = value` files. Numbers are written in their shortest
//! round-trip decimal form (at most 17 significant digits).

pub mod artifacts;
pub mod records;
pub mod truth;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{CliError, Result};

/// Lossless decimal text for `v`.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}

pub fn parse_num(path: &Path, line: u64, field: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| CliError::parse(path, line, format!("not a number: {field:?}")))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            create_dir(dir)?;
        }
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// Header and string rows of a comma-separated file.
pub struct Table {
    pub header: Vec<String>,
    /// (line number, fields)
    pub rows: Vec<(u64, Vec<String>)>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

pub fn read_table(path: &Path) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::csv(path, e))?;
    let header = rdr
        .headers()
        .map_err(|e| CliError::csv(path, e))?
        .iter()
        .map(String::from)
        .collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::csv(path, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        rows.push((line, rec.iter().map(String::from).collect()));
    }
    Ok(Table { header, rows })
}

/// Reads a numeric table and checks its header against `expected`.
pub fn read_numeric(path: &Path, expected: &[String]) -> Result<Vec<Vec<f64>>> {
    let t = read_table(path)?;
    if t.header != expected {
        return Err(CliError::parse(
            path,
            1,
            format!("expected columns {}", expected.join(",")),
        ));
    }
    t.rows
        .iter()
        .map(|(line, fields)| fields.iter().map(|f| parse_num(path, *line, f)).collect())
        .collect()
}

pub fn write_table<S: AsRef<str>>(path: &Path, header: &[S], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    let head: Vec<&str> = header.iter().map(|h| h.as_ref()).collect();
    out.push_str(&head.join(","));
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    write_text(path, &out)
}

pub fn write_numeric<S: AsRef<str>>(path: &Path, header: &[S], rows: &[Vec<f64>]) -> Result<()> {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| r.iter().map(|&v| num(v)).collect())
        .collect();
    write_table(path, header, &rows)
}

/// Ordered `key = value` pairs; blank lines and `#` comments are skipped.
pub fn read_key_values(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = read_text(path)?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::parse(path, i as u64 + 1, "expected key = value"))?;
        if out
            .insert(k.trim().to_string(), v.trim().to_string())
            .is_some()
        {
            return Err(CliError::parse(
                path,
                i as u64 + 1,
                format!("duplicate key {}", k.trim()),
            ));
        }
    }
    Ok(out)
}

pub fn write_key_values(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(v);
        out.push('\n');
    }
    write_text(path, &out)
}

//! CSV and metadata files stamped with the config hash and master seed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::CliError;

/// One CSV field.
pub enum Cell {
    Num(f64),
    Int(i64),
    Text(String),
    Empty,
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl Cell {
    fn render(&self, out: &mut String) {
        match self {
            // 17 significant digits round-trip every double
            Cell::Num(v) => write!(out, "{v:.16e}").unwrap(),
            Cell::Int(v) => write!(out, "{v}").unwrap(),
            Cell::Text(s) => out.push_str(s),
            Cell::Empty => {}
        }
    }
}

pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Table { header: header.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    fn render(&self, stamp: &str) -> String {
        let mut out = String::new();
        out.push_str(stamp);
        out.push('\n');
        out.push_str(&self.header.join(","));
        out.push('\n');
        for row in &self.rows {
            for (i, c) in row.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                c.render(&mut out);
            }
            out.push('\n');
        }
        out
    }
}

/// Numbered column names such as `x1, x2` or `z11, z12`.
pub fn columns(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

pub fn matrix_columns(prefix: &str, rows: usize, cols: usize) -> Vec<String> {
    (1..=rows).flat_map(|r| (1..=cols).map(move |c| format!("{prefix}{r}{c}"))).collect()
}

pub fn nums(values: &[f64]) -> Vec<Cell> {
    values.iter().map(|&v| Cell::Num(v)).collect()
}

/// Lowercase hex SHA-256 of the canonical JSON form of the effective config.
pub fn config_hash(config: &Value) -> String {
    let digest = Sha256::digest(config.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Output directory plus the provenance every file carries.
pub struct Sink {
    dir: PathBuf,
    hash: String,
    seed: u64,
    config: Value,
}

impl Sink {
    pub fn new(dir: &Path, config: Value, seed: u64) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Sink { dir: dir.to_path_buf(), hash: config_hash(&config), seed, config })
    }

    pub fn write_csv(&self, name: &str, table: &Table) -> Result<PathBuf, CliError> {
        let path = self.dir.join(format!("{name}.csv"));
        let stamp = format!("# config_hash={} seed={}", self.hash, self.seed);
        fs::write(&path, table.render(&stamp)).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    /// `meta.json`: provenance, the effective config and a command summary.
    pub fn write_meta(&self, command: &str, files: &[PathBuf], summary: Value) -> Result<(), CliError> {
        let names: Vec<String> =
            files.iter().filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned())).collect();
        let meta = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "config_hash": self.hash,
            "seed": self.seed,
            "files": names,
            "config": self.config,
            "summary": summary,
        });
        let path = self.dir.join("meta.json");
        let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip_through_the_csv_format() {
        let mut t = Table::new(["a", "b", "c"]);
        let v = 0.1f64 + 0.2;
        t.push(vec![Cell::Num(v), Cell::Int(3), Cell::Empty]);
        let text = t.render("# stamp");
        let line = text.lines().nth(2).unwrap();
        let parsed: f64 = line.split(',').next().unwrap().parse().unwrap();
        assert_eq!(parsed.to_bits(), v.to_bits());
        assert!(line.ends_with(",3,"));
    }

    #[test]
    fn hash_ignores_key_order() {
        let a: Value = serde_json::from_str(r#"{"x":1,"y":{"b":2,"a":3}}"#).unwrap();
        let b: Value = serde_json::from_str(r#"{"y":{"a":3,"b":2},"x":1}"#).unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
    }
}

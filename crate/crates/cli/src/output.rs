//! Result files: `results.json` (deterministic for a given configuration
//! and seed), `manifest.json` (versions, seeds, timings) and CSV tables.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::error::{CliError, CliResult};
use crate::tasks::Table;

pub const RESULTS_FILE: &str = "results.json";
pub const MANIFEST_FILE: &str = "manifest.json";

fn to_pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("JSON values always serialize");
    s.push('\n');
    s
}

fn write(path: &Path, contents: &[u8]) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

pub fn write_json(dir: &Path, name: &str, v: &Value) -> CliResult<PathBuf> {
    let path = dir.join(name);
    write(&path, to_pretty(v).as_bytes())?;
    Ok(path)
}

pub fn write_table(dir: &Path, table: &Table) -> CliResult<PathBuf> {
    let path = dir.join(format!("{}.csv", table.name));
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_io = |e: csv::Error| CliError::io(&path, std::io::Error::other(e));
    w.write_record(&table.header).map_err(to_io)?;
    for row in &table.rows {
        w.write_record(row).map_err(to_io)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::io(&path, std::io::Error::other(e.to_string())))?;
    write(&path, &bytes)?;
    Ok(path)
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

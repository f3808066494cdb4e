//! Run directories: `<outdir>/<command>/<label>/{manifest.json, *.csv, report.json}`.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::ExperimentConfig;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// A CSV file held in memory until the run finishes.
#[derive(Debug, Clone, Default)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_bytes(&self) -> io::Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.into_inner().map_err(|e| io::Error::other(e.to_string()))
    }
}

/// Shortest round-trip decimal form.
pub fn num(v: f64) -> String {
    format!("{v}")
}

pub fn int(v: usize) -> String {
    v.to_string()
}

/// `x_1, …, x_n` style column names.
pub fn indexed(prefix: &str, count: usize) -> Vec<String> {
    (1..=count).map(|i| format!("{prefix}_{i}")).collect()
}

/// `manifest_version` is the key the config loader uses to recognise a
/// manifest.
#[derive(Debug, Serialize)]
struct Manifest<'a> {
    manifest_version: u32,
    command: &'a str,
    label: &'a str,
    code_version: &'a str,
    model: &'a str,
    seed: u64,
    dt: f64,
    n: usize,
    m: usize,
    files: Vec<String>,
    config: ExperimentConfig,
}

pub struct RunHeaderInfo<'a> {
    pub command: &'a str,
    pub model: &'a str,
    pub n: usize,
    pub m: usize,
}

pub fn run_dir(outdir: &Path, command: &str, label: &str) -> PathBuf {
    outdir.join(command).join(label)
}

/// Write the CSVs, the report and the manifest. Returns the directory.
pub fn write_run(
    outdir: &Path,
    info: &RunHeaderInfo<'_>,
    cfg: &ExperimentConfig,
    csvs: &[(String, CsvTable)],
    report: &serde_json::Value,
) -> io::Result<PathBuf> {
    let dir = run_dir(outdir, info.command, &cfg.label);
    fs::create_dir_all(&dir)?;
    let mut files = Vec::new();
    for (name, table) in csvs {
        fs::write(dir.join(name), table.to_bytes()?)?;
        files.push(name.clone());
    }
    fs::write(dir.join("report.json"), to_pretty(report)?)?;
    files.push("report.json".into());
    let mut embedded = cfg.clone();
    embedded.output_dir = None;
    let manifest = Manifest {
        manifest_version: 1,
        command: info.command,
        label: &cfg.label,
        code_version: CODE_VERSION,
        model: info.model,
        seed: cfg.seeds.master,
        dt: cfg.grid().dt(),
        n: info.n,
        m: info.m,
        files,
        config: embedded,
    };
    let value = serde_json::to_value(&manifest).map_err(io::Error::other)?;
    fs::write(dir.join("manifest.json"), to_pretty(&value)?)?;
    Ok(dir)
}

pub fn to_pretty(v: &serde_json::Value) -> io::Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(v).map_err(io::Error::other)?;
    out.push(b'\n');
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_quotes_and_header() {
        let mut t = CsvTable::new(["expr", "v_1"]);
        t.push(vec!["[s1,K(s1)]".into(), num(0.5)]);
        let text = String::from_utf8(t.to_bytes().unwrap()).unwrap();
        assert_eq!(text, "expr,v_1\r\n\"[s1,K(s1)]\",0.5\r\n");
    }

    #[test]
    fn numbers_round_trip() {
        for v in [0.1, -1e-300, 12345.678, 1.0 / 3.0] {
            assert_eq!(num(v).parse::<f64>().unwrap(), v);
        }
    }
}

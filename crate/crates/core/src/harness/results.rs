//! Run summaries as JSON lines and accuracy curves as CSV.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RunRecord;
use crate::error::{Error, Result};

/// One line of a results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultLine {
    pub config_hash: String,
    pub task: String,
    pub arch: String,
    pub seed: u64,
    pub lr: f64,
    pub score: f64,
    pub diverged: bool,
    pub wallclock_s: f64,
    /// Curve CSV path, relative to the results file's directory.
    pub curve_file: String,
}

impl ResultLine {
    pub fn from_record(record: &RunRecord, curve_file: impl Into<String>) -> Self {
        ResultLine {
            config_hash: record.config_hash.clone(),
            task: record.task.name().to_string(),
            arch: record.arch.name().to_string(),
            seed: record.seed,
            lr: record.lr,
            score: record.score,
            diverged: record.diverged,
            wallclock_s: record.wallclock_s,
            curve_file: curve_file.into(),
        }
    }
}

pub fn append_result(path: &Path, line: &ResultLine) -> Result<()> {
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(file, "{}", serde_json::to_string(line)?)?;
    Ok(())
}

pub fn parse_results(text: &str) -> Result<Vec<ResultLine>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::InvalidInput(format!("results line {}: {e}", i + 1))))
        .collect()
}

pub fn read_results(path: &Path) -> Result<Vec<ResultLine>> {
    parse_results(&std::fs::read_to_string(path)?)
}

pub fn write_curve(path: &Path, points: impl IntoIterator<Item = (usize, f64)>) -> Result<()> {
    let mut text = String::from("length,accuracy\n");
    for (len, acc) in points {
        text.push_str(&format!("{len},{acc}\n"));
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_curve(path: &Path) -> Result<Vec<(usize, f64)>> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    match lines.next().transpose()? {
        Some(h) if h.trim() == "length,accuracy" => {}
        _ => return Err(Error::InvalidInput(format!("{}: missing length,accuracy header", path.display()))),
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::InvalidInput(format!("{} row {}: {line}", path.display(), i + 1));
        let (len, acc) = line.split_once(',').ok_or_else(bad)?;
        out.push((len.trim().parse().map_err(|_| bad())?, acc.trim().parse().map_err(|_| bad())?));
    }
    Ok(out)
}

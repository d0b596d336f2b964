//! Score tables from results files.

use std::collections::BTreeMap;
use std::path::Path;

use super::results::ResultLine;
use super::sweep::mean_std;

/// Scores at or above this count as successful generalization.
pub const SUCCESS_THRESHOLD: f64 = 90.0;

/// Aggregate of all runs for one task and architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub task: String,
    pub arch: String,
    pub runs: usize,
    pub diverged: usize,
    /// Best score over non-diverged runs.
    pub best: Option<f64>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Some run's curve file is missing.
    pub incomplete: bool,
}

/// Groups lines by (task, arch). `curve_exists` decides whether a line's
/// curve file is present.
pub fn rows(lines: &[ResultLine], curve_exists: impl Fn(&str) -> bool) -> Vec<Row> {
    let mut groups: BTreeMap<(&str, &str), Vec<&ResultLine>> = BTreeMap::new();
    for line in lines {
        groups.entry((&line.task, &line.arch)).or_default().push(line);
    }
    groups
        .into_iter()
        .map(|((task, arch), runs)| {
            let scores: Vec<f64> = runs.iter().filter(|r| !r.diverged).map(|r| r.score).collect();
            let best = scores.iter().copied().reduce(f64::max);
            let (mean, std) = match mean_std(&scores) {
                Some((m, s)) => (Some(m), Some(s)),
                None => (None, None),
            };
            Row {
                task: task.to_string(),
                arch: arch.to_string(),
                runs: runs.len(),
                diverged: runs.len() - scores.len(),
                best,
                mean,
                std,
                incomplete: runs.iter().any(|r| r.curve_file.is_empty() || !curve_exists(&r.curve_file)),
            }
        })
        .collect()
}

pub const HEADER: &str = "| task | arch | runs | best | mean ± std | status |\n|---|---|---|---|---|---|\n";

/// Markdown table; best scores at or above the threshold are bold.
pub fn render(rows: &[Row]) -> String {
    let mut out = String::from(HEADER);
    for r in rows {
        let best = match r.best {
            Some(b) if b >= SUCCESS_THRESHOLD => format!("**{b:.1}**"),
            Some(b) => format!("{b:.1}"),
            None => "-".into(),
        };
        let spread = match (r.mean, r.std) {
            (Some(m), Some(s)) => format!("{m:.1} ± {s:.1}"),
            _ => "-".into(),
        };
        let mut status = Vec::new();
        if r.incomplete {
            status.push("incomplete".to_string());
        }
        if r.diverged > 0 {
            status.push(format!("{} diverged", r.diverged));
        }
        let status = if status.is_empty() { "ok".to_string() } else { status.join(", ") };
        out.push_str(&format!("| {} | {} | {} | {best} | {spread} | {status} |\n", r.task, r.arch, r.runs));
    }
    out
}

/// Table for a results file, resolving curve paths against its directory.
pub fn report_file(path: &Path) -> crate::Result<String> {
    let lines = super::results::read_results(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(render(&rows(&lines, |f| base.join(f).is_file())))
}

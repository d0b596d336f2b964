use std::fmt::Write as _;
use std::path::Path;

use super::{MemorySnapshot, Trace, TraceStep};
use crate::error::{Error, Result};

fn header(fixed: &[&str], prefix: &str, n: usize) -> String {
    let mut cols: Vec<String> = fixed.iter().map(|s| s.to_string()).collect();
    cols.extend((0..n).map(|i| format!("{prefix}{i}")));
    cols.join(",")
}

fn push_values(line: &mut String, values: &[f64]) {
    for v in values {
        write!(line, ",{v}").expect("writing to a string");
    }
}

/// Writes `states.csv` (token, hidden vector and logits per step),
/// `actions.csv` (one row per step and memory), `memory.csv` (one row per
/// step, memory and slot) and `layers.csv` (Transformer activations) into
/// `dir`, which is created if needed.
pub fn export_trace(trace: &Trace, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let first = trace.steps.first();
    let hidden = first.map_or(0, |s| s.hidden.len());
    let classes = first.map_or(0, |s| s.logits.len());
    let actions = first.and_then(|s| s.actions.first()).map_or(0, Vec::len);
    let width = first.and_then(|s| s.memory.first()).and_then(|m| m.cells.first()).map_or(0, Vec::len);
    let layer_width = first.and_then(|s| s.layers.first()).map_or(0, Vec::len);

    let mut states = header(&["step", "token"], "h", hidden);
    if classes > 0 {
        states.push_str(&header(&[""], "logit", classes));
    }
    states.push('\n');
    let mut acts = header(&["step", "memory"], "p", actions) + "\n";
    let mut mem = header(&["step", "memory", "slot", "head"], "v", width) + "\n";
    let mut layers = header(&["step", "layer"], "d", layer_width) + "\n";
    for (t, s) in trace.steps.iter().enumerate() {
        let mut line = format!("{t},{}", s.token);
        push_values(&mut line, &s.hidden);
        push_values(&mut line, &s.logits);
        states.push_str(&line);
        states.push('\n');
        for (k, a) in s.actions.iter().enumerate() {
            let mut line = format!("{t},{k}");
            push_values(&mut line, a);
            acts.push_str(&line);
            acts.push('\n');
        }
        for (k, m) in s.memory.iter().enumerate() {
            for (slot, cell) in m.cells.iter().enumerate() {
                let head = m.head.as_ref().map_or(String::new(), |h| h[slot].to_string());
                let mut line = format!("{t},{k},{slot},{head}");
                push_values(&mut line, cell);
                mem.push_str(&line);
                mem.push('\n');
            }
        }
        for (l, values) in s.layers.iter().enumerate() {
            let mut line = format!("{t},{l}");
            push_values(&mut line, values);
            layers.push_str(&line);
            layers.push('\n');
        }
    }
    std::fs::write(dir.join("states.csv"), states)?;
    std::fs::write(dir.join("actions.csv"), acts)?;
    std::fs::write(dir.join("memory.csv"), mem)?;
    std::fs::write(dir.join("layers.csv"), layers)?;
    Ok(())
}

struct Table {
    columns: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let columns: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::InvalidInput(format!("{}: empty file", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    if let Some(bad) = rows.iter().position(|r| r.len() != columns.len()) {
        return Err(Error::InvalidInput(format!("{} row {}: wrong column count", path.display(), bad + 1)));
    }
    Ok(Table { columns, rows })
}

fn num<V: std::str::FromStr>(s: &str) -> Result<V> {
    s.parse().map_err(|_| Error::InvalidInput(format!("bad number '{s}' in trace file")))
}

fn nums(cells: &[String]) -> Result<Vec<f64>> {
    cells.iter().map(|c| num(c)).collect()
}

/// Reads a bundle written by [`export_trace`].
pub fn import_trace(dir: &Path) -> Result<Trace> {
    let states = read_table(&dir.join("states.csv"))?;
    let hidden = states.columns.iter().filter(|c| c.starts_with('h')).count();
    let mut steps = Vec::with_capacity(states.rows.len());
    for (t, row) in states.rows.iter().enumerate() {
        if num::<usize>(&row[0])? != t {
            return Err(Error::InvalidInput(format!("states.csv: step {t} out of order")));
        }
        steps.push(TraceStep {
            token: num(&row[1])?,
            hidden: nums(&row[2..2 + hidden])?,
            logits: nums(&row[2 + hidden..])?,
            actions: Vec::new(),
            memory: Vec::new(),
            layers: Vec::new(),
        });
    }
    let total = steps.len();
    let step_of = |row: &[String]| -> Result<usize> {
        let t: usize = num(&row[0])?;
        if t >= total {
            return Err(Error::InvalidInput(format!("trace row refers to missing step {t}")));
        }
        Ok(t)
    };
    for row in read_table(&dir.join("actions.csv"))?.rows {
        let t = step_of(&row)?;
        steps[t].actions.push(nums(&row[2..])?);
    }
    for row in read_table(&dir.join("layers.csv"))?.rows {
        let t = step_of(&row)?;
        steps[t].layers.push(nums(&row[2..])?);
    }
    for row in read_table(&dir.join("memory.csv"))?.rows {
        let t = step_of(&row)?;
        let k: usize = num(&row[1])?;
        let memory = &mut steps[t].memory;
        if k == memory.len() {
            memory.push(MemorySnapshot { cells: Vec::new(), head: if row[3].is_empty() { None } else { Some(Vec::new()) } });
        }
        let snap = memory.get_mut(k).ok_or_else(|| Error::InvalidInput("memory rows out of order".into()))?;
        snap.cells.push(nums(&row[4..])?);
        if let Some(head) = snap.head.as_mut() {
            head.push(num(&row[3])?);
        }
    }
    Ok(Trace { steps })
}

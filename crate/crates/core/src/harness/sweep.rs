use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::train::{train, RunRecord};
use crate::error::{Error, Result};
use crate::models::{Arch, CompTokens, PosEnc};

/// Environment variable capping sweep parallelism.
pub const WORKERS_ENV: &str = "CHOMSKY_BENCH_WORKERS";

/// Worker count: available cores, capped by [`WORKERS_ENV`] when set.
pub fn workers_from_env() -> usize {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var(WORKERS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(cap) if cap > 0 => cap.min(cores),
        _ => cores,
    }
}

/// Values to sweep. Empty architecture-specific lists keep the base
/// config's value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub seeds: Vec<u64>,
    pub lrs: Vec<f64>,
    pub pos_encs: Vec<PosEnc>,
    pub comp_tokens: Vec<CompTokens>,
    pub n_tapes: Vec<usize>,
}

impl SweepGrid {
    /// Exactly the base configuration.
    pub fn single(config: &TrainConfig) -> Self {
        SweepGrid { seeds: vec![config.seed], lrs: vec![config.lr], pos_encs: vec![], comp_tokens: vec![], n_tapes: vec![] }
    }

    /// Ten seeds, three learning rates, plus the architecture's own axes.
    pub fn paper(arch: Arch) -> Self {
        let mut grid =
            SweepGrid { seeds: (0..10).collect(), lrs: vec![1e-4, 3e-4, 5e-4], pos_encs: vec![], comp_tokens: vec![], n_tapes: vec![] };
        match arch {
            Arch::Transformer => grid.pos_encs = PosEnc::ALL.to_vec(),
            Arch::TapeRnn => {
                grid.comp_tokens = CompTokens::ALL.to_vec();
                grid.n_tapes = vec![1, 4];
            }
            _ => {}
        }
        grid
    }
}

/// Every combination of `grid` applied to `base`, seeds varying fastest.
pub fn sweep_configs(base: &TrainConfig, grid: &SweepGrid) -> Result<Vec<TrainConfig>> {
    if grid.seeds.is_empty() || grid.lrs.is_empty() {
        return Err(Error::Config("sweep needs at least one seed and one learning rate".into()));
    }
    let pos_encs = or_base(&grid.pos_encs, base.model.pos_enc);
    let comps = or_base(&grid.comp_tokens, base.model.comp_tokens);
    let tapes = or_base(&grid.n_tapes, base.model.n_tapes);
    let mut out = Vec::new();
    for &lr in &grid.lrs {
        for &pos_enc in &pos_encs {
            for &comp in &comps {
                for &n_tapes in &tapes {
                    for &seed in &grid.seeds {
                        let mut c = base.clone();
                        c.lr = lr;
                        c.seed = seed;
                        c.model.pos_enc = pos_enc;
                        c.model.comp_tokens = comp;
                        c.model.n_tapes = n_tapes;
                        c.validate()?;
                        out.push(c);
                    }
                }
            }
        }
    }
    Ok(out)
}

fn or_base<V: Clone>(values: &[V], base: V) -> Vec<V> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

/// Statistics over the seeds of one grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub label: String,
    pub runs: usize,
    pub diverged: usize,
    pub best: Option<f64>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOutcome {
    pub configs: Vec<TrainConfig>,
    /// Aligned with `configs`.
    pub records: Vec<RunRecord>,
    pub cells: Vec<CellSummary>,
    /// Index of the highest-scoring non-diverged run.
    pub best: Option<usize>,
}

impl SweepOutcome {
    pub fn best_record(&self) -> Option<&RunRecord> {
        self.best.map(|i| &self.records[i])
    }
}

/// Mean and population standard deviation.
pub(crate) fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

fn cell_label(c: &TrainConfig) -> String {
    let mut label = format!("lr={}", c.lr);
    match c.model.arch {
        Arch::Transformer => label.push_str(&format!(" pos_enc={}", c.model.pos_enc)),
        Arch::TapeRnn => label.push_str(&format!(" comp_tokens={} n_tapes={}", c.model.comp_tokens, c.model.n_tapes)),
        _ => {}
    }
    label
}

/// Per-cell statistics in first-appearance order. Diverged runs are
/// counted but excluded from best, mean and std.
pub fn summarize(configs: &[TrainConfig], records: &[RunRecord]) -> Vec<CellSummary> {
    let mut order: Vec<String> = Vec::new();
    let mut cells: Vec<Vec<&RunRecord>> = Vec::new();
    for (c, r) in configs.iter().zip(records) {
        let label = cell_label(c);
        match order.iter().position(|l| *l == label) {
            Some(i) => cells[i].push(r),
            None => {
                order.push(label);
                cells.push(vec![r]);
            }
        }
    }
    order
        .into_iter()
        .zip(cells)
        .map(|(label, runs)| {
            let scores: Vec<f64> = runs.iter().filter(|r| !r.diverged).map(|r| r.score).collect();
            let stats = mean_std(&scores);
            CellSummary {
                label,
                runs: runs.len(),
                diverged: runs.len() - scores.len(),
                best: scores.iter().copied().reduce(f64::max),
                mean: stats.map(|s| s.0),
                std: stats.map(|s| s.1),
            }
        })
        .collect()
}

/// Trains every grid combination on up to `workers` threads. Workers share
/// only the configs; `on_record` is called from the finishing worker, once
/// per run.
pub fn sweep(
    base: &TrainConfig,
    grid: &SweepGrid,
    workers: usize,
    on_record: &(dyn Fn(&TrainConfig, &RunRecord) -> Result<()> + Sync),
) -> Result<SweepOutcome> {
    let configs = sweep_configs(base, grid)?;
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<RunRecord>>>> = Mutex::new((0..configs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, configs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(config) = configs.get(i) else { break };
                let outcome = train(config).and_then(|(_, record)| on_record(config, &record).map(|()| record));
                slots.lock().expect("no worker panicked")[i] = Some(outcome);
            });
        }
    });
    let records = slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every run finished"))
        .collect::<Result<Vec<_>>>()?;
    let best = records
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.diverged)
        .fold(None::<(usize, f64)>, |acc, (i, r)| match acc {
            Some((_, s)) if s >= r.score => acc,
            _ => Some((i, r.score)),
        })
        .map(|(i, _)| i);
    let cells = summarize(&configs, &records);
    Ok(SweepOutcome { configs, records, cells, best })
}

//! Per-step recordings of a model's internal state, PCA over recorded
//! states, and CSV export for external plotting.

mod export;
mod pca;

pub use export::{export_trace, import_trace};
pub use pca::{count_clusters, diameter, jacobi_eigen, pca, state_clusters, Pca};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::harness::batch_from_samples;
use crate::models::{Arch, Model, SeqBatch};
use crate::scalar::Scalar;
use crate::tasks::{self, TaskId, TaskSample};

/// Memory contents after one step. Stack snapshots list rows from the top;
/// tape snapshots list cells with the head distribution alongside.
#[derive(Clone, Debug, PartialEq)]
pub struct MemorySnapshot {
    pub cells: Vec<Vec<f64>>,
    pub head: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceStep {
    pub token: usize,
    /// Controller state, or the last Transformer layer at this position.
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
    /// One action distribution per memory.
    pub actions: Vec<Vec<f64>>,
    pub memory: Vec<MemorySnapshot>,
    /// Transformer only: the embedding and each block's output.
    pub layers: Vec<Vec<f64>>,
}

/// One entry per unrolled step of a single sequence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub steps: Vec<TraceStep>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Hidden vectors as PCA input.
    pub fn states(&self) -> Vec<Vec<f64>> {
        self.steps.iter().map(|s| s.hidden.clone()).collect()
    }
}

/// Records `input` laid out as in training (with computation and empty
/// tokens, or teacher-forced feedback for autoregressive models). The
/// model is only read.
pub fn record_trace<T: Scalar>(model: &Model<T>, task: TaskId, input: &[usize]) -> Result<Trace> {
    let target = tasks::ground_truth(task, input)?;
    let sample = TaskSample { task, length: input.len(), input: input.to_vec(), target };
    let seq = if model.vocab.autoregressive {
        let v = &model.vocab;
        let mut row = input.to_vec();
        row.push(v.empty());
        row.extend(sample.target.iter().map(|&y| v.feedback(y)));
        SeqBatch { tokens: vec![row], jumps: vec![input.len()], outputs: vec![] }
    } else {
        batch_from_samples(vec![sample], &model.vocab, model.config.comp_tokens).seq
    };
    record_sequence(model, &seq)
}

/// Records the first sequence of `seq`.
pub fn record_sequence<T: Scalar>(model: &Model<T>, seq: &SeqBatch) -> Result<Trace> {
    if seq.len() != 1 {
        return Err(Error::InvalidInput("traces record exactly one sequence".into()));
    }
    let mut g = Graph::inference();
    let out = model.unroll(&mut g, seq, None, true, true)?;
    let t = seq.steps();
    let row = |tensor: &Tensor<T>, r: usize| tensor.row(r).iter().map(|x| x.to_f64_lossy()).collect::<Vec<f64>>();
    let logits = g.value(out.logits.expect("requested all logits")).clone();
    let transformer = model.config.arch == Arch::Transformer;
    let mut steps = Vec::with_capacity(t);
    for p in 0..t {
        let (hidden, layers) = if transformer {
            let layers: Vec<Vec<f64>> = out.hidden.iter().map(|&h| row(g.value(h), p)).collect();
            (layers.last().cloned().unwrap_or_default(), layers)
        } else {
            (row(g.value(out.hidden[p]), 0), Vec::new())
        };
        let actions = out.actions.get(p).map_or(Vec::new(), |a| a.iter().map(|&v| row(g.value(v), 0)).collect());
        let memory = out.memory.get(p).map_or(Vec::new(), |m| snapshots(&g, m));
        steps.push(TraceStep { token: seq.tokens[0][p], hidden, logits: row(&logits, p), actions, memory, layers });
    }
    pad_stacks(&mut steps);
    Ok(Trace { steps })
}

fn snapshots<T: Scalar>(g: &Graph<T>, vars: &[crate::autodiff::Var]) -> Vec<MemorySnapshot> {
    let as_rows = |v: crate::autodiff::Var| {
        let t = g.value(v);
        let s = t.shape();
        t.data().chunks(s[2]).map(|c| c.iter().map(|x| x.to_f64_lossy()).collect()).collect::<Vec<Vec<f64>>>()
    };
    // A stack is one `[1×R×C]` tensor; a tape is a cells/head pair.
    let is_tape = vars.len() >= 2 && g.value(vars[1]).rank() == 2;
    if is_tape {
        vars.chunks(2)
            .map(|pair| MemorySnapshot {
                cells: as_rows(pair[0]),
                head: Some(g.value(pair[1]).data().iter().map(|x| x.to_f64_lossy()).collect()),
            })
            .collect()
    } else {
        vars.iter().map(|&v| MemorySnapshot { cells: as_rows(v), head: None }).collect()
    }
}

/// Stacks grow one row per step; pad earlier snapshots with the zero rows
/// they implicitly hold so every snapshot has the same shape.
fn pad_stacks(steps: &mut [TraceStep]) {
    let n_mem = steps.first().map_or(0, |s| s.memory.len());
    for k in 0..n_mem {
        let rows = steps.iter().map(|s| s.memory[k].cells.len()).max().unwrap_or(0);
        for s in steps.iter_mut() {
            let snap = &mut s.memory[k];
            if snap.head.is_none() {
                let width = snap.cells.first().map_or(0, Vec::len);
                snap.cells.resize(rows, vec![0.0; width]);
            }
        }
    }
}

#[cfg(test)]
mod tests;

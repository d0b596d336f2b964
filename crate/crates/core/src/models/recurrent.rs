use rand::Rng;

use super::{glorot, memory_sizes, Controller, MemoryKind, ModelConfig, SeqBatch, Unrolled};
use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;
use crate::memory::{STACK_ACTIONS, TAPE_ACTIONS};
use crate::scalar::Scalar;

/// `h' = tanh(h·W_h + x·W_x + b)` on row-major batches.
pub fn rnn_step<T: Scalar>(g: &mut Graph<T>, h: Var, x: Var, w_h: Var, w_x: Var, b: Var) -> Result<Var> {
    let xw = g.matmul(x, w_x)?;
    rnn_cell(g, xw, h, w_h, b)
}

/// One LSTM step with gates packed as `[i, f, g, o]` along the columns of
/// `W_x`, `W_h` and `b`. Returns `(h', c')`.
pub fn lstm_step<T: Scalar>(
    g: &mut Graph<T>,
    h: Var,
    c: Var,
    x: Var,
    w_h: Var,
    w_x: Var,
    b: Var,
) -> Result<(Var, Var)> {
    let xw = g.matmul(x, w_x)?;
    lstm_cell(g, xw, h, c, w_h, b)
}

fn rnn_cell<T: Scalar>(g: &mut Graph<T>, xw: Var, h: Var, w_h: Var, b: Var) -> Result<Var> {
    let hw = g.matmul(h, w_h)?;
    let pre = g.add(xw, hw)?;
    let pre = g.add_bias(pre, b)?;
    Ok(g.tanh(pre))
}

fn lstm_cell<T: Scalar>(g: &mut Graph<T>, xw: Var, h: Var, c: Var, w_h: Var, b: Var) -> Result<(Var, Var)> {
    let hidden = g.shape(h)[1];
    let hw = g.matmul(h, w_h)?;
    let pre = g.add(xw, hw)?;
    let pre = g.add_bias(pre, b)?;
    let gate = |g: &mut Graph<T>, k: usize| g.slice_last(pre, k * hidden, hidden);
    let i = gate(g, 0)?;
    let i = g.sigmoid(i);
    let f = gate(g, 1)?;
    let f = g.sigmoid(f);
    let cand = gate(g, 2)?;
    let cand = g.tanh(cand);
    let o = gate(g, 3)?;
    let o = g.sigmoid(o);
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_next = g.add(keep, write)?;
    let squashed = g.tanh(c_next);
    let h_next = g.mul(o, squashed)?;
    Ok((h_next, c_next))
}

/// Action and value heads of one attached memory.
#[derive(Clone, Debug)]
pub(crate) struct MemoryHead {
    w_a: ParamId,
    b_a: ParamId,
    w_v: ParamId,
    b_v: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct RecurrentParams {
    controller: Controller,
    memory: MemoryKind,
    /// Input projection, indexed by token: `[V×G]`.
    w_x: ParamId,
    w_h: ParamId,
    b: ParamId,
    /// Projection of the memory read: `[R×G]`.
    w_r: Option<ParamId>,
    heads: Vec<MemoryHead>,
}

impl RecurrentParams {
    pub(crate) fn init<T: Scalar, R: Rng + ?Sized>(
        config: &ModelConfig,
        vocab: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let controller = config.arch.controller().expect("recurrent architecture");
        let memory = config.arch.memory();
        let h = config.hidden;
        let gates = match controller {
            Controller::Rnn => h,
            Controller::Lstm => 4 * h,
        };
        let mut bias = Tensor::zeros(&[gates]);
        if controller == Controller::Lstm {
            bias.data_mut()[h..2 * h].fill(T::one());
        }
        let (n_mem, actions) = match memory {
            MemoryKind::None => (0, 0),
            MemoryKind::Stack => (1, STACK_ACTIONS),
            MemoryKind::Tape => (config.n_tapes, TAPE_ACTIONS),
        };
        let read = n_mem * config.cell_size;
        let w_x = store.insert("controller.w_x", glorot(rng, vocab, gates))?;
        let w_h = store.insert("controller.w_h", glorot(rng, h, gates))?;
        let b = store.insert("controller.b", bias)?;
        let w_r = if read > 0 { Some(store.insert("controller.w_r", glorot(rng, read, gates))?) } else { None };
        let mut heads = Vec::with_capacity(n_mem);
        for k in 0..n_mem {
            heads.push(MemoryHead {
                w_a: store.insert(format!("memory{k}.w_action"), glorot(rng, h, actions))?,
                b_a: store.insert(format!("memory{k}.b_action"), Tensor::zeros(&[actions]))?,
                w_v: store.insert(format!("memory{k}.w_value"), glorot(rng, h, config.cell_size))?,
                b_v: store.insert(format!("memory{k}.b_value"), Tensor::zeros(&[config.cell_size]))?,
            });
        }
        Ok(RecurrentParams { controller, memory, w_x, w_h, b, w_r, heads })
    }

    pub(crate) fn unroll<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        config: &ModelConfig,
        batch: &SeqBatch,
        keep_history: bool,
    ) -> Result<Unrolled> {
        let (bsz, steps) = (batch.len(), batch.steps());
        let (depth, n_cells) = memory_sizes(steps);
        let cell = config.cell_size;
        let mut h = g.constant(Tensor::zeros(&[bsz, config.hidden]));
        let mut c = g.constant(Tensor::zeros(&[bsz, config.hidden]));
        let mut memory: Vec<Var> = match self.memory {
            MemoryKind::None => Vec::new(),
            MemoryKind::Stack => vec![g.constant(Tensor::zeros(&[bsz, 1, cell]))],
            MemoryKind::Tape => {
                let mut head = Tensor::zeros(&[bsz, n_cells]);
                for b in 0..bsz {
                    head.data_mut()[b * n_cells] = T::one();
                }
                let mut vars = Vec::new();
                for _ in 0..self.heads.len() {
                    vars.push(g.constant(Tensor::zeros(&[bsz, n_cells, cell])));
                    vars.push(g.constant(head.clone()));
                }
                vars
            }
        };
        let w_x = g.param(store, self.w_x);
        let w_h = g.param(store, self.w_h);
        let bias = g.param(store, self.b);
        let w_r = self.w_r.map(|id| g.param(store, id));
        let heads: Vec<[Var; 4]> = self
            .heads
            .iter()
            .map(|m| [g.param(store, m.w_a), g.param(store, m.b_a), g.param(store, m.w_v), g.param(store, m.b_v)])
            .collect();

        let mut out = Unrolled::default();
        let mut tokens = vec![0; bsz];
        for t in 0..steps {
            for (slot, row) in tokens.iter_mut().zip(&batch.tokens) {
                *slot = row[t];
            }
            let mut xw = g.embedding(w_x, &tokens)?;
            if let Some(w_r) = w_r {
                let read = self.read(g, &memory, cell)?;
                let rw = g.matmul(read, w_r)?;
                xw = g.add(xw, rw)?;
            }
            match self.controller {
                Controller::Rnn => h = rnn_cell(g, xw, h, w_h, bias)?,
                Controller::Lstm => (h, c) = lstm_cell(g, xw, h, c, w_h, bias)?,
            }
            let mut actions = Vec::with_capacity(heads.len());
            let mut next = Vec::with_capacity(memory.len());
            for (k, &[w_a, b_a, w_v, b_v]) in heads.iter().enumerate() {
                let za = g.matmul(h, w_a)?;
                let za = g.add_bias(za, b_a)?;
                let a = g.softmax(za);
                let zv = g.matmul(h, w_v)?;
                let zv = g.add_bias(zv, b_v)?;
                let v = g.tanh(zv);
                match self.memory {
                    MemoryKind::Stack => next.push(g.stack_update(memory[0], a, v, depth)?),
                    MemoryKind::Tape => {
                        let (cells, head) = (memory[2 * k], memory[2 * k + 1]);
                        next.push(g.tape_write(cells, head, a, v)?);
                        next.push(g.tape_move(head, a, &batch.jumps)?);
                    }
                    MemoryKind::None => unreachable!("heads imply memory"),
                }
                actions.push(a);
            }
            if !next.is_empty() {
                let previous = std::mem::replace(&mut memory, next);
                if keep_history {
                    out.memory.push(memory.clone());
                    out.actions.push(actions);
                } else {
                    for v in previous {
                        g.release(v);
                    }
                }
            } else if keep_history {
                out.actions.push(Vec::new());
                out.memory.push(Vec::new());
            }
            out.hidden.push(h);
        }
        Ok(out)
    }

    /// Stack top, or the concatenated tape reads.
    fn read<T: Scalar>(&self, g: &mut Graph<T>, memory: &[Var], cell: usize) -> Result<Var> {
        match self.memory {
            MemoryKind::Stack => {
                let s = g.shape(memory[0]).to_vec();
                let flat = g.reshape(memory[0], &[s[0], s[1] * s[2]])?;
                g.slice_last(flat, 0, cell)
            }
            MemoryKind::Tape => {
                let reads = memory
                    .chunks(2)
                    .map(|pair| g.tape_read(pair[0], pair[1]))
                    .collect::<Result<Vec<_>>>()?;
                if reads.len() == 1 {
                    Ok(reads[0])
                } else {
                    g.concat_last(&reads)
                }
            }
            MemoryKind::None => unreachable!("read without memory"),
        }
    }
}

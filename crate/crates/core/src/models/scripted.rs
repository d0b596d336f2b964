//! A hand-written Tape-RNN policy for `duplicate_string`.
//!
//! The controller is a three-state machine; all memory traffic goes through
//! the same graph primitives the trained Tape-RNN uses, with one-hot
//! actions. Two tapes receive the input; after one jump back, the first is
//! read out, and once it reads an empty cell the second one is. A single
//! tape cannot do this without an idle step between the copies, since its
//! head only moves by one cell or by the input length.

use super::memory_sizes;
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::memory::{one_hot, JUMP_LEFT, TAPE_ACTIONS, WRITE_RIGHT, WRITE_STAY};

const WIDTH: usize = 2;

fn encode(symbol: usize) -> Vec<f64> {
    let mut v = vec![0.0; WIDTH];
    v[symbol] = 1.0;
    v
}

fn decode(read: &[f64]) -> Option<usize> {
    read.iter().position(|&v| v > 0.5)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Phase {
    Input,
    Jumped,
    FirstCopy,
    SecondCopy,
}

/// Runs the schedule on `input` (symbols 0/1) followed by `comp ≥ 1`
/// computation steps and `2ℓ` output steps; returns the emitted symbols.
pub fn duplicate_string(input: &[usize], comp: usize) -> Result<Vec<usize>> {
    if input.is_empty() || comp == 0 {
        return Err(Error::InvalidInput("need a nonempty input and at least one computation step".into()));
    }
    if let Some(&s) = input.iter().find(|&&s| s >= WIDTH) {
        return Err(Error::InvalidInput(format!("symbol {s} is not binary")));
    }
    let len = input.len();
    let steps = len + comp + 2 * len;
    let (_, n_cells) = memory_sizes(steps);
    let mut g = Graph::<f64>::inference();
    let mut head = Tensor::zeros(&[1, n_cells]);
    head.data_mut()[0] = 1.0;
    let mut tapes: Vec<(Var, Var)> =
        (0..2).map(|_| (g.constant(Tensor::zeros(&[1, n_cells, WIDTH])), g.constant(head.clone()))).collect();

    let mut phase = Phase::Input;
    let mut out = Vec::with_capacity(2 * len);
    for t in 0..steps {
        let reads: Vec<Vec<f64>> = tapes
            .iter()
            .map(|&(cells, head)| g.tape_read(cells, head).map(|r| g.value(r).data().to_vec()))
            .collect::<Result<_>>()?;
        // (action, value) per tape; rewriting the read value leaves a cell
        // unchanged.
        let plan: [(usize, Vec<f64>); 2] = if t < len {
            let v = encode(input[t]);
            [(WRITE_RIGHT, v.clone()), (WRITE_RIGHT, v)]
        } else if t < len + comp {
            if phase == Phase::Input {
                phase = Phase::Jumped;
                [(JUMP_LEFT, reads[0].clone()), (JUMP_LEFT, reads[1].clone())]
            } else {
                [(WRITE_STAY, reads[0].clone()), (WRITE_STAY, reads[1].clone())]
            }
        } else {
            if phase == Phase::Jumped {
                phase = Phase::FirstCopy;
            }
            if phase == Phase::FirstCopy && decode(&reads[0]).is_none() {
                phase = Phase::SecondCopy;
            }
            let active = usize::from(phase == Phase::SecondCopy);
            out.push(decode(&reads[active]).unwrap_or(0));
            let mut plan = [(WRITE_STAY, reads[0].clone()), (WRITE_STAY, reads[1].clone())];
            plan[active].0 = WRITE_RIGHT;
            plan
        };
        for (tape, (action, value)) in tapes.iter_mut().zip(plan) {
            let a = g.constant(Tensor::new(vec![1, TAPE_ACTIONS], one_hot(action, TAPE_ACTIONS))?);
            let v = g.constant(Tensor::new(vec![1, WIDTH], value)?);
            let cells = g.tape_write(tape.0, tape.1, a, v)?;
            let moved = g.tape_move(tape.1, a, &[len])?;
            g.release(tape.0);
            g.release(tape.1);
            *tape = (cells, moved);
        }
    }
    Ok(out)
}

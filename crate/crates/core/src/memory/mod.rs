//! Differentiable stack and tape memories.
//!
//! [`DiffStack`] and [`DiffTape`] are plain values for stepping a single
//! memory outside a graph (tracing, scripted schedules, tests). Models use
//! the batched graph primitives built on the same [`kernels`].

pub mod kernels;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use kernels::{
    JUMP_LEFT, JUMP_RIGHT, NOOP, POP, PUSH, STACK_ACTIONS, TAPE_ACTIONS, WRITE_LEFT, WRITE_RIGHT, WRITE_STAY,
};

/// Width of a memory cell.
pub const CELL_SIZE: usize = 8;
pub const TRAIN_STACK_DEPTH: usize = 128;
pub const TRAIN_TAPE_CELLS: usize = 256;

/// A superposed stack of `depth × cell` values; row 0 is the top.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffStack<T> {
    cells: Tensor<T>,
}

impl<T: Scalar> DiffStack<T> {
    pub fn new(depth: usize, cell: usize) -> Self {
        DiffStack { cells: Tensor::zeros(&[depth, cell]) }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Ok(DiffStack { cells: Tensor::from_rows(rows)? })
    }

    pub fn depth(&self) -> usize {
        self.cells.shape()[0]
    }

    pub fn cell_size(&self) -> usize {
        self.cells.shape()[1]
    }

    pub fn cells(&self) -> &Tensor<T> {
        &self.cells
    }

    /// The top row.
    pub fn read(&self) -> &[T] {
        self.cells.row(0)
    }

    /// One push/pop/no-op superposition with `actions` in
    /// `[PUSH, POP, NOOP]` order.
    pub fn update(&self, actions: &[T], value: &[T]) -> Result<Self> {
        if actions.len() != STACK_ACTIONS || value.len() != self.cell_size() {
            return Err(Error::shape("stack_update", format!("{} actions, value of {}", actions.len(), value.len())));
        }
        let mut out = Tensor::zeros(self.cells.shape());
        kernels::stack_update(self.cells.data(), actions, value, self.cell_size(), out.data_mut());
        Ok(DiffStack { cells: out })
    }

    /// Adds zero rows at the bottom.
    pub fn grow(&self, depth: usize) -> Result<Self> {
        if depth < self.depth() {
            return Err(Error::InvalidInput(format!("cannot shrink stack from {} to {depth}", self.depth())));
        }
        let mut data = self.cells.data().to_vec();
        data.resize(depth * self.cell_size(), T::zero());
        Ok(DiffStack { cells: Tensor::new(vec![depth, self.cell_size()], data)? })
    }
}

/// A circular tape of `n × cell` values with a distribution over head
/// positions.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffTape<T> {
    cells: Tensor<T>,
    head: Vec<T>,
}

impl<T: Scalar> DiffTape<T> {
    /// Zero cells with the head on cell 0.
    pub fn new(n_cells: usize, cell: usize) -> Self {
        let mut head = vec![T::zero(); n_cells];
        head[0] = T::one();
        DiffTape { cells: Tensor::zeros(&[n_cells, cell]), head }
    }

    pub fn from_parts(cells: Tensor<T>, head: Vec<T>) -> Result<Self> {
        if cells.rank() != 2 || cells.shape()[0] != head.len() {
            return Err(Error::shape("tape", format!("cells {:?}, head of {}", cells.shape(), head.len())));
        }
        Ok(DiffTape { cells, head })
    }

    pub fn len(&self) -> usize {
        self.head.len()
    }

    pub fn is_empty(&self) -> bool {
        self.head.is_empty()
    }

    pub fn cell_size(&self) -> usize {
        self.cells.shape()[1]
    }

    pub fn cells(&self) -> &Tensor<T> {
        &self.cells
    }

    pub fn head(&self) -> &[T] {
        &self.head
    }

    /// Expected cell under the head.
    pub fn read(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.cell_size()];
        kernels::tape_read(self.cells.data(), &self.head, self.cell_size(), &mut out);
        out
    }

    /// Writes `value` with the total write mass of `actions`, then moves the
    /// head; jumps cover `jump` cells.
    pub fn update(&self, actions: &[T], value: &[T], jump: usize) -> Result<Self> {
        if actions.len() != TAPE_ACTIONS || value.len() != self.cell_size() {
            return Err(Error::shape("tape_update", format!("{} actions, value of {}", actions.len(), value.len())));
        }
        let mut cells = Tensor::zeros(self.cells.shape());
        kernels::tape_write(self.cells.data(), &self.head, actions, value, self.cell_size(), cells.data_mut());
        let mut head = vec![T::zero(); self.len()];
        kernels::tape_move(&self.head, actions, jump, &mut head);
        Ok(DiffTape { cells, head })
    }

    /// Inserts zero cells opposite the most likely head position, so cells
    /// within half a tape of the head keep their circular distance to it.
    pub fn grow(&self, n_cells: usize) -> Result<Self> {
        let n = self.len();
        if n_cells < n {
            return Err(Error::InvalidInput(format!("cannot shrink tape from {n} to {n_cells}")));
        }
        let extra = n_cells - n;
        if extra == 0 {
            return Ok(self.clone());
        }
        let mode = self
            .head
            .iter()
            .enumerate()
            .fold(0, |best, (i, &h)| if h > self.head[best] { i } else { best });
        let at = (mode + n.div_ceil(2)) % n;
        let at = if at == 0 { n } else { at };
        let c = self.cell_size();
        let mut data = Vec::with_capacity(n_cells * c);
        data.extend_from_slice(&self.cells.data()[..at * c]);
        data.resize((at + extra) * c, T::zero());
        data.extend_from_slice(&self.cells.data()[at * c..]);
        let mut head = Vec::with_capacity(n_cells);
        head.extend_from_slice(&self.head[..at]);
        head.resize(at + extra, T::zero());
        head.extend_from_slice(&self.head[at..]);
        Ok(DiffTape { cells: Tensor::new(vec![n_cells, c], data)?, head })
    }
}

/// One-hot action vector of length `n` selecting `action`.
pub fn one_hot<T: Scalar>(action: usize, n: usize) -> Vec<T> {
    let mut v = vec![T::zero(); n];
    v[action] = T::one();
    v
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn simplex(raw: &[f64]) -> Vec<f64> {
        let total: f64 = raw.iter().sum();
        raw.iter().map(|r| r / total).collect()
    }

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12)
    }

    proptest! {
        #[test]
        fn stack_update_is_linear_in_actions(
            cells in prop::collection::vec(-1.0..1.0f64, 12),
            raw in prop::collection::vec(0.01..1.0f64, 3),
            value in prop::collection::vec(-1.0..1.0f64, 3),
        ) {
            let rows: Vec<Vec<f64>> = cells.chunks(3).map(<[f64]>::to_vec).collect();
            let s = DiffStack::from_rows(&rows).unwrap();
            let p = simplex(&raw);
            let soft = s.update(&p, &value).unwrap();
            let mut mix = vec![0.0; 12];
            for (a, &w) in p.iter().enumerate() {
                let hard = s.update(&one_hot(a, STACK_ACTIONS), &value).unwrap();
                for (m, h) in mix.iter_mut().zip(hard.cells().data()) {
                    *m += w * h;
                }
            }
            prop_assert!(close(soft.cells().data(), &mix));
        }

        #[test]
        fn tape_update_is_linear_in_actions(
            cells in prop::collection::vec(-1.0..1.0f64, 10),
            head_raw in prop::collection::vec(0.01..1.0f64, 5),
            raw in prop::collection::vec(0.01..1.0f64, 5),
            value in prop::collection::vec(-1.0..1.0f64, 2),
            jump in 1usize..4,
        ) {
            let t = DiffTape::from_parts(Tensor::new(vec![5, 2], cells).unwrap(), simplex(&head_raw)).unwrap();
            let p = simplex(&raw);
            let soft = t.update(&p, &value, jump).unwrap();
            let (mut cells_mix, mut head_mix) = (vec![0.0; 10], vec![0.0; 5]);
            for (a, &w) in p.iter().enumerate() {
                let hard = t.update(&one_hot(a, TAPE_ACTIONS), &value, jump).unwrap();
                for (m, h) in cells_mix.iter_mut().zip(hard.cells().data()) {
                    *m += w * h;
                }
                for (m, h) in head_mix.iter_mut().zip(hard.head()) {
                    *m += w * h;
                }
            }
            prop_assert!(close(soft.cells().data(), &cells_mix));
            prop_assert!(close(soft.head(), &head_mix));
            prop_assert!((soft.head().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn one_hot_trajectories_match_discrete_machines(seed in any::<u64>()) {
            let (stack, tape) = crate::verify::discrete_limit_error(4, seed);
            prop_assert!(stack <= 1e-12 && tape <= 1e-12);
        }
    }
}

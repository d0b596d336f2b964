//! Per-sequence forward and backward rules of the soft stack and tape.
//!
//! Slices are row-major: a stack or tape holds `rows × cell` values.

use crate::scalar::Scalar;

pub const STACK_ACTIONS: usize = 3;
pub const PUSH: usize = 0;
pub const POP: usize = 1;
pub const NOOP: usize = 2;

pub const TAPE_ACTIONS: usize = 5;
pub const WRITE_LEFT: usize = 0;
pub const WRITE_RIGHT: usize = 1;
pub const WRITE_STAY: usize = 2;
pub const JUMP_LEFT: usize = 3;
pub const JUMP_RIGHT: usize = 4;

/// Signed head displacement of each tape action for jump distance `jump`.
pub fn tape_shifts(jump: usize) -> [isize; TAPE_ACTIONS] {
    let j = jump as isize;
    [-1, 1, 0, -j, j]
}

/// Rows of a stack after one update, given `rows` live rows before it.
pub fn stack_rows_after(rows: usize, depth: usize) -> usize {
    (rows + 1).min(depth)
}

/// `out[i] = push·in[i-1] + pop·in[i+1] + noop·in[i]` with `in[-1] = value`
/// and zeros below the live rows. `out` holds `out_rows × cell` values.
pub fn stack_update<T: Scalar>(
    stack: &[T],
    actions: &[T],
    value: &[T],
    cell: usize,
    out: &mut [T],
) {
    let rows = stack.len() / cell;
    let out_rows = out.len() / cell;
    let (push, pop, noop) = (actions[PUSH], actions[POP], actions[NOOP]);
    for i in 0..out_rows {
        let dst = &mut out[i * cell..(i + 1) * cell];
        for k in 0..cell {
            let above = if i == 0 { value[k] } else if i - 1 < rows { stack[(i - 1) * cell + k] } else { T::zero() };
            let below = if i + 1 < rows { stack[(i + 1) * cell + k] } else { T::zero() };
            let here = if i < rows { stack[i * cell + k] } else { T::zero() };
            dst[k] = push * above + pop * below + noop * here;
        }
    }
}

/// Accumulates the gradients of [`stack_update`] into the `d_*` buffers.
#[allow(clippy::too_many_arguments)]
pub fn stack_update_backward<T: Scalar>(
    stack: &[T],
    actions: &[T],
    value: &[T],
    cell: usize,
    d_out: &[T],
    d_stack: Option<&mut [T]>,
    d_actions: Option<&mut [T]>,
    d_value: Option<&mut [T]>,
) {
    let rows = stack.len() / cell;
    let out_rows = d_out.len() / cell;
    let (push, pop, noop) = (actions[PUSH], actions[POP], actions[NOOP]);
    if let Some(d_actions) = d_actions {
        let (mut dp, mut dq, mut dn) = (T::zero(), T::zero(), T::zero());
        for i in 0..out_rows {
            for k in 0..cell {
                let g = d_out[i * cell + k];
                let above = if i == 0 { value[k] } else if i - 1 < rows { stack[(i - 1) * cell + k] } else { T::zero() };
                let below = if i + 1 < rows { stack[(i + 1) * cell + k] } else { T::zero() };
                let here = if i < rows { stack[i * cell + k] } else { T::zero() };
                dp += g * above;
                dq += g * below;
                dn += g * here;
            }
        }
        d_actions[PUSH] += dp;
        d_actions[POP] += dq;
        d_actions[NOOP] += dn;
    }
    if let Some(d_value) = d_value {
        if out_rows > 0 {
            for k in 0..cell {
                d_value[k] += push * d_out[k];
            }
        }
    }
    if let Some(d_stack) = d_stack {
        for j in 0..rows {
            for k in 0..cell {
                let mut acc = T::zero();
                if j + 1 < out_rows {
                    acc += push * d_out[(j + 1) * cell + k];
                }
                if j >= 1 && j - 1 < out_rows {
                    acc += pop * d_out[(j - 1) * cell + k];
                }
                if j < out_rows {
                    acc += noop * d_out[j * cell + k];
                }
                d_stack[j * cell + k] += acc;
            }
        }
    }
}

fn wrap(index: isize, n: usize) -> usize {
    index.rem_euclid(n as isize) as usize
}

/// Blends `value` into the cells under the head with total write mass
/// `w = a_wl + a_wr + a_ws`: `cells'[c] = (1 - w·head[c])·cells[c] + w·head[c]·value`.
pub fn tape_write<T: Scalar>(cells: &[T], head: &[T], actions: &[T], value: &[T], cell: usize, out: &mut [T]) {
    let write = actions[WRITE_LEFT] + actions[WRITE_RIGHT] + actions[WRITE_STAY];
    for (c, &h) in head.iter().enumerate() {
        let mass = write * h;
        for k in 0..cell {
            let old = cells[c * cell + k];
            out[c * cell + k] = old + mass * (value[k] - old);
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn tape_write_backward<T: Scalar>(
    cells: &[T],
    head: &[T],
    actions: &[T],
    value: &[T],
    cell: usize,
    d_out: &[T],
    mut d_cells: Option<&mut [T]>,
    mut d_head: Option<&mut [T]>,
    d_actions: Option<&mut [T]>,
    mut d_value: Option<&mut [T]>,
) {
    let write = actions[WRITE_LEFT] + actions[WRITE_RIGHT] + actions[WRITE_STAY];
    let mut d_write = T::zero();
    for (c, &h) in head.iter().enumerate() {
        let mut dot = T::zero();
        for k in 0..cell {
            let g = d_out[c * cell + k];
            let old = cells[c * cell + k];
            dot += g * (value[k] - old);
            if let Some(dc) = d_cells.as_deref_mut() {
                dc[c * cell + k] += g * (T::one() - write * h);
            }
            if let Some(dv) = d_value.as_deref_mut() {
                dv[k] += g * write * h;
            }
        }
        d_write += h * dot;
        if let Some(dh) = d_head.as_deref_mut() {
            dh[c] += write * dot;
        }
    }
    if let Some(da) = d_actions {
        da[WRITE_LEFT] += d_write;
        da[WRITE_RIGHT] += d_write;
        da[WRITE_STAY] += d_write;
    }
}

/// Moves the head by the action-weighted mixture of circular shifts:
/// `head'[c] = Σ_a act[a]·head[c - shift_a]`.
pub fn tape_move<T: Scalar>(head: &[T], actions: &[T], jump: usize, out: &mut [T]) {
    let n = head.len();
    let shifts = tape_shifts(jump);
    for (c, o) in out.iter_mut().enumerate() {
        let mut acc = T::zero();
        for (a, &d) in shifts.iter().enumerate() {
            acc += actions[a] * head[wrap(c as isize - d, n)];
        }
        *o = acc;
    }
}

pub fn tape_move_backward<T: Scalar>(
    head: &[T],
    actions: &[T],
    jump: usize,
    d_out: &[T],
    d_head: Option<&mut [T]>,
    d_actions: Option<&mut [T]>,
) {
    let n = head.len();
    let shifts = tape_shifts(jump);
    if let Some(dh) = d_head {
        // head[j] feeds head'[j + shift_a].
        for (j, dst) in dh.iter_mut().enumerate() {
            let mut acc = T::zero();
            for (a, &d) in shifts.iter().enumerate() {
                acc += actions[a] * d_out[wrap(j as isize + d, n)];
            }
            *dst += acc;
        }
    }
    if let Some(da) = d_actions {
        for (a, &d) in shifts.iter().enumerate() {
            let mut acc = T::zero();
            for (c, &g) in d_out.iter().enumerate() {
                acc += g * head[wrap(c as isize - d, n)];
            }
            da[a] += acc;
        }
    }
}

/// Head-weighted sum of cells.
pub fn tape_read<T: Scalar>(cells: &[T], head: &[T], cell: usize, out: &mut [T]) {
    out.iter_mut().for_each(|o| *o = T::zero());
    for (c, &h) in head.iter().enumerate() {
        if h == T::zero() {
            continue;
        }
        for k in 0..cell {
            out[k] += h * cells[c * cell + k];
        }
    }
}

pub fn tape_read_backward<T: Scalar>(
    cells: &[T],
    head: &[T],
    cell: usize,
    d_out: &[T],
    d_cells: Option<&mut [T]>,
    d_head: Option<&mut [T]>,
) {
    if let Some(dc) = d_cells {
        for (c, &h) in head.iter().enumerate() {
            for k in 0..cell {
                dc[c * cell + k] += h * d_out[k];
            }
        }
    }
    if let Some(dh) = d_head {
        for c in 0..head.len() {
            let mut acc = T::zero();
            for k in 0..cell {
                acc += cells[c * cell + k] * d_out[k];
            }
            dh[c] += acc;
        }
    }
}

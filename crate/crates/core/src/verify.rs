//! Independent reference implementations used to cross-check the library:
//! a second solver for every task and discrete stack and tape machines.
//!
//! Nothing here shares code with the paths it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::grad_check;
use crate::error::Result;
use crate::harness::checkpoint;
use crate::memory::{self, DiffStack, DiffTape};
use crate::models::{scripted, Arch, CompTokens, Model, ModelConfig, PosEnc, SeqBatch};
use crate::tasks::{self, TaskId};

/// Operator-precedence evaluation mod 5 with explicit value and operator
/// stacks. Returns `None` on malformed input.
fn shunting_yard(tokens: &[usize], z: Option<i64>) -> Option<i64> {
    fn prec(op: usize) -> u8 {
        if op == 7 {
            2
        } else {
            1
        }
    }
    fn apply(values: &mut Vec<i64>, op: usize) -> Option<()> {
        let b = values.pop()?;
        let a = values.pop()?;
        values.push(
            match op {
                5 => a + b,
                6 => a - b,
                7 => a * b,
                _ => return None,
            }
            .rem_euclid(5),
        );
        Some(())
    }
    const OPEN: usize = 8;
    let mut values: Vec<i64> = Vec::new();
    let mut ops: Vec<usize> = Vec::new();
    let mut expect_operand = true;
    let mut prev: Option<usize> = None;
    for &t in tokens {
        match t {
            0..=4 | 10 if expect_operand => {
                values.push(if t == 10 { z? } else { t as i64 });
                expect_operand = false;
            }
            6 if expect_operand => {
                // Unary minus at the start of a level: 0 - (...).
                if !matches!(prev, None | Some(OPEN)) {
                    return None;
                }
                values.push(0);
                ops.push(6);
            }
            5..=7 if !expect_operand => {
                while let Some(&top) = ops.last() {
                    if top != OPEN && prec(top) >= prec(t) {
                        apply(&mut values, ops.pop()?)?;
                    } else {
                        break;
                    }
                }
                ops.push(t);
                expect_operand = true;
            }
            OPEN if expect_operand => ops.push(OPEN),
            9 if !expect_operand => {
                loop {
                    let op = ops.pop()?;
                    if op == OPEN {
                        break;
                    }
                    apply(&mut values, op)?;
                }
            }
            _ => return None,
        }
        prev = Some(t);
    }
    if expect_operand {
        return None;
    }
    while let Some(op) = ops.pop() {
        if op == OPEN {
            return None;
        }
        apply(&mut values, op)?;
    }
    (values.len() == 1).then(|| values[0])
}

fn bits_value(bits: &[usize]) -> u128 {
    bits.iter().rev().fold(0u128, |acc, &b| (acc << 1) | b as u128)
}

fn value_bits(mut v: u128) -> Vec<usize> {
    let mut out = vec![(v & 1) as usize];
    v >>= 1;
    while v > 0 {
        out.push((v & 1) as usize);
        v >>= 1;
    }
    out
}

fn isqrt_u128(v: u128) -> u128 {
    let mut r = (v as f64).sqrt() as u128;
    while r * r > v {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= v {
        r += 1;
    }
    r
}

/// Target computed without the library's task code. Inputs must be well
/// formed; arithmetic operands must fit in 128 bits.
pub fn oracle_target(task: TaskId, input: &[usize]) -> Option<Vec<usize>> {
    use TaskId::*;
    Some(match task {
        EvenPairs => {
            let changes = input.windows(2).filter(|w| w[0] != w[1]).count();
            vec![usize::from(changes % 2 == 0)]
        }
        ParityCheck => {
            let mut state = 1usize;
            for &t in input {
                if t == 1 {
                    state ^= 1;
                }
            }
            vec![state]
        }
        CycleNavigation => {
            let steps: i64 = input.iter().map(|&t| [0i64, 1, -1][t]).sum();
            vec![steps.rem_euclid(5) as usize]
        }
        ModArithSimple | ModArithBrackets => vec![shunting_yard(input, None)? as usize],
        SolveEquation => {
            let (expr, rest) = input.split_at(input.len().checked_sub(2)?);
            let rhs = rest[1] as i64;
            let hits: Vec<usize> = (0..5).filter(|&z| shunting_yard(expr, Some(z)) == Some(rhs)).map(|z| z as usize).collect();
            if hits.len() != 1 {
                return None;
            }
            hits
        }
        StackManipulation => {
            // Top-first string; a pop removes the first character.
            let split = input.iter().position(|&t| t >= 2).unwrap_or(input.len());
            let mut top_first: std::collections::VecDeque<usize> = input[..split].iter().rev().copied().collect();
            for &a in &input[split..] {
                match a {
                    2 => {
                        top_first.pop_front();
                    }
                    3 => top_first.push_front(0),
                    4 => top_first.push_front(1),
                    _ => return None,
                }
            }
            top_first.into_iter().collect()
        }
        ReverseString => {
            let n = input.len();
            (0..n).map(|i| input[n - 1 - i]).collect()
        }
        DuplicateString => input.iter().chain(input).copied().collect(),
        MissingDuplicate => {
            let half = input.len() / 2;
            let (left, right) = input.split_at(half);
            let i = (0..half).find(|&i| left[i] == 2 || right[i] == 2)?;
            vec![left[i].min(right[i])]
        }
        OddsFirst => {
            let odd_positions = input.iter().enumerate().filter(|(i, _)| i % 2 == 0).map(|(_, &t)| t);
            let even_positions = input.iter().enumerate().filter(|(i, _)| i % 2 == 1).map(|(_, &t)| t);
            odd_positions.chain(even_positions).collect()
        }
        BinaryAddition | BinaryMultiplication => {
            let at = input.iter().position(|&t| t == 2)?;
            let (a, b) = (bits_value(&input[..at]), bits_value(&input[at + 1..]));
            value_bits(if task == BinaryAddition { a + b } else { a.checked_mul(b)? })
        }
        ComputeSqrt => value_bits(isqrt_u128(bits_value(input))),
        BucketSort => {
            let mut counts = [0usize; 5];
            for &t in input {
                counts[t] += 1;
            }
            counts.iter().enumerate().flat_map(|(s, &c)| std::iter::repeat_n(s, c)).collect()
        }
    })
}

/// Result of comparing the task library against [`oracle_target`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OracleReport {
    pub task: TaskId,
    pub samples: usize,
    pub mismatches: usize,
    pub first_mismatch: Option<Vec<usize>>,
}

/// Draws `samples` inputs with lengths uniform in `1..=max_len` and counts
/// disagreements between [`tasks::ground_truth`] and the oracle.
pub fn oracle_equivalence(task: TaskId, samples: usize, max_len: usize, seed: u64) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = OracleReport { task, samples, mismatches: 0, first_mismatch: None };
    for _ in 0..samples {
        let len = rng.gen_range(1..=max_len);
        let input = tasks::sample_input(task, &mut rng, len);
        let ours = tasks::ground_truth(task, &input).ok();
        if ours.is_none() || ours != oracle_target(task, &input) {
            report.mismatches += 1;
            report.first_mismatch.get_or_insert(input);
        }
    }
    report
}

/// Reference stack: a list of rows, top first, truncated at `depth`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteStack {
    pub depth: usize,
    pub rows: Vec<Vec<f64>>,
}

impl DiscreteStack {
    pub fn new(depth: usize) -> Self {
        DiscreteStack { depth, rows: Vec::new() }
    }

    pub fn apply(&mut self, action: usize, value: &[f64]) {
        match action {
            memory::PUSH => {
                self.rows.insert(0, value.to_vec());
                self.rows.truncate(self.depth);
            }
            memory::POP => {
                if !self.rows.is_empty() {
                    self.rows.remove(0);
                }
            }
            _ => {}
        }
    }

    /// Rows padded with zeros to `depth`, flattened.
    pub fn dense(&self, cell: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.depth * cell];
        for (i, row) in self.rows.iter().enumerate() {
            out[i * cell..(i + 1) * cell].copy_from_slice(row);
        }
        out
    }
}

/// Reference tape: integer head on a circular array of cells.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteTape {
    pub cells: Vec<Vec<f64>>,
    pub head: usize,
}

impl DiscreteTape {
    pub fn new(n: usize, cell: usize) -> Self {
        DiscreteTape { cells: vec![vec![0.0; cell]; n], head: 0 }
    }

    pub fn apply(&mut self, action: usize, value: &[f64], jump: usize) {
        let n = self.cells.len();
        if matches!(action, memory::WRITE_LEFT | memory::WRITE_RIGHT | memory::WRITE_STAY) {
            self.cells[self.head] = value.to_vec();
        }
        self.head = match action {
            memory::WRITE_LEFT => (self.head + n - 1) % n,
            memory::WRITE_RIGHT => (self.head + 1) % n,
            memory::JUMP_LEFT => (self.head + n - jump % n) % n,
            memory::JUMP_RIGHT => (self.head + jump) % n,
            _ => self.head,
        };
    }

    pub fn read(&self) -> &[f64] {
        &self.cells[self.head]
    }
}

/// Largest elementwise difference between soft memories driven by one-hot
/// actions and the discrete machines, over `trajectories` random runs of
/// length at most 32 on memories of at most 16 rows.
pub fn discrete_limit_error(trajectories: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = memory::CELL_SIZE;
    let (mut stack_err, mut tape_err) = (0.0f64, 0.0f64);
    for _ in 0..trajectories {
        let steps = rng.gen_range(1..=32);
        let size = rng.gen_range(1..=16);
        let jump = rng.gen_range(1..=16);
        let mut soft_stack = DiffStack::<f64>::new(size, cell);
        let mut hard_stack = DiscreteStack::new(size);
        let mut soft_tape = DiffTape::<f64>::new(size, cell);
        let mut hard_tape = DiscreteTape::new(size, cell);
        for _ in 0..steps {
            let value: Vec<f64> = (0..cell).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a = rng.gen_range(0..memory::STACK_ACTIONS);
            soft_stack = soft_stack.update(&memory::one_hot(a, memory::STACK_ACTIONS), &value).expect("shapes agree");
            hard_stack.apply(a, &value);
            for (x, y) in soft_stack.cells().data().iter().zip(hard_stack.dense(cell)) {
                stack_err = stack_err.max((x - y).abs());
            }

            let a = rng.gen_range(0..memory::TAPE_ACTIONS);
            soft_tape =
                soft_tape.update(&memory::one_hot(a, memory::TAPE_ACTIONS), &value, jump).expect("shapes agree");
            hard_tape.apply(a, &value, jump);
            for (c, row) in hard_tape.cells.iter().enumerate() {
                for (x, y) in soft_tape.cells().row(c).iter().zip(row) {
                    tape_err = tape_err.max((x - y).abs());
                }
                let expected = if c == hard_tape.head { 1.0 } else { 0.0 };
                tape_err = tape_err.max((soft_tape.head()[c] - expected).abs());
            }
            for (x, y) in soft_tape.read().iter().zip(hard_tape.read()) {
                tape_err = tape_err.max((x - y).abs());
            }
        }
    }
    (stack_err, tape_err)
}

/// Every architecture at toy width, including multi-tape computation
/// steps, each positional encoding and a causal Transformer.
pub fn toy_model_configs() -> Vec<ModelConfig> {
    let mut out: Vec<ModelConfig> =
        [Arch::Rnn, Arch::Lstm, Arch::StackRnn, Arch::StackLstm, Arch::TapeRnn].into_iter().map(ModelConfig::tiny).collect();
    out.push(ModelConfig { n_tapes: 2, comp_tokens: CompTokens::Len, ..ModelConfig::tiny(Arch::TapeRnn) });
    for pos_enc in PosEnc::ALL {
        out.push(ModelConfig { pos_enc, ..ModelConfig::tiny(Arch::Transformer) });
    }
    out.push(ModelConfig { causal: true, pos_enc: PosEnc::Alibi, ..ModelConfig::tiny(Arch::Transformer) });
    out
}

/// Largest relative error between backprop and central differences
/// (step 1e-4) for the loss of a fresh f64 model on two reverse_string
/// sequences of length 2, at most 6 steps.
pub fn model_gradient_error(config: &ModelConfig, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = Model::<f64>::new(config.clone(), &TaskId::ReverseString.spec(), &mut rng)?;
    let comp = if m.vocab.computation { vec![m.vocab.computation(); 2] } else { Vec::new() };
    let empty = m.vocab.empty();
    let tokens: Vec<Vec<usize>> = [[0, 1], [1, 1]]
        .iter()
        .map(|x| x.iter().copied().chain(comp.iter().copied()).chain([empty, empty]).collect())
        .collect();
    let t = tokens[0].len();
    let batch = SeqBatch { tokens, jumps: vec![2, 2], outputs: vec![(0, t - 2), (0, t - 1), (1, t - 2), (1, t - 1)] };
    let mut store = m.params.clone();
    let report = grad_check(&mut store, 1e-4, |g, s| {
        let logits = m.forward_with(s, g, &batch, None)?;
        g.cross_entropy(logits, &[1, 0, 1, 1], &[1.0; 4])
    })?;
    Ok(report.max_relative_error)
}

/// Largest deviation between "permute the input, then run" and "run, then
/// permute the outputs" for a non-causal Transformer, over `trials` random
/// shuffles of random length-`len` inputs. Zero up to rounding exactly when
/// `pos_enc` is `None`.
pub fn permutation_equivariance_error(pos_enc: PosEnc, trials: usize, len: usize, seed: u64) -> Result<f64> {
    use crate::autodiff::Graph;
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = ModelConfig { pos_enc, causal: false, ..ModelConfig::tiny(Arch::Transformer) };
    let m = Model::<f64>::new(config, &TaskId::BucketSort.spec(), &mut rng)?;
    let vocab = m.vocab.input_size();
    let logits = |tokens: Vec<usize>| -> Result<Vec<Vec<f64>>> {
        let batch = SeqBatch { tokens: vec![tokens], jumps: vec![len], outputs: vec![] };
        let mut g = Graph::inference();
        let out = m.unroll(&mut g, &batch, None, false, true)?;
        let v = g.value(out.logits.expect("requested all logits"));
        Ok(v.data().chunks(v.shape()[1]).map(<[f64]>::to_vec).collect())
    };
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..vocab)).collect();
        let mut perm: Vec<usize> = (0..len).collect();
        perm.shuffle(&mut rng);
        let base = logits(tokens.clone())?;
        let shuffled = logits(perm.iter().map(|&i| tokens[i]).collect())?;
        for (p, &i) in perm.iter().enumerate() {
            for (a, b) in shuffled[p].iter().zip(&base[i]) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(worst)
}

/// Lengths in `1..=max_len` at which the scripted Tape-RNN schedule fails
/// to emit `ww` on random binary inputs.
pub fn scripted_duplicate_failures(max_len: usize, per_length: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for len in 1..=max_len {
        let ok = (0..per_length).all(|_| {
            let input: Vec<usize> = (0..len).map(|_| rng.gen_range(0..2)).collect();
            scripted::duplicate_string(&input, len).ok() == Some([input.clone(), input].concat())
        });
        if !ok {
            failures.push(len);
        }
    }
    failures
}

/// Writes a checkpoint of a fresh model, reads it back, writes again and
/// compares the bytes. `corrupt_magic` damages the first file first.
pub fn checkpoint_round_trip(corrupt_magic: bool) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = Model::<f32>::new(ModelConfig::tiny(Arch::StackLstm), &TaskId::ReverseString.spec(), &mut rng)?;
    let mut first = checkpoint::to_bytes(&model.params);
    if corrupt_magic {
        first[0] ^= 0xff;
    }
    let entries = match checkpoint::read(first.as_slice()) {
        Ok(e) => e,
        Err(_) => return Ok(false),
    };
    let mut second = Vec::new();
    checkpoint::write(&mut second, &entries)?;
    Ok(second == first)
}

/// One line of a self-test report.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Options for [`selftest`].
#[derive(Clone, Copy, Debug, Default)]
pub struct SelftestOptions {
    /// Damage the checkpoint before re-reading it (negative control).
    pub corrupt_checkpoint: bool,
}

/// Gradient checks for every toy architecture, 1000 oracle samples per
/// task, the discrete limit of both memories, the scripted duplicate
/// schedule and a checkpoint round trip. Fully deterministic.
pub fn selftest(options: SelftestOptions) -> Vec<Check> {
    let mut checks = Vec::new();
    let mut check = |name: String, passed: bool, detail: String| checks.push(Check { name, passed, detail });
    for config in toy_model_configs() {
        let label = format!("gradient {} pos_enc={} tapes={} causal={}", config.arch, config.pos_enc, config.n_tapes, config.causal);
        match model_gradient_error(&config, 3) {
            Ok(err) => check(label, err <= 1e-4, format!("max relative error {err:.2e}")),
            Err(e) => check(label, false, e.to_string()),
        }
    }
    for task in TaskId::ALL {
        let r = oracle_equivalence(task, 1000, 100, 17);
        check(format!("oracle {task}"), r.mismatches == 0, format!("{} mismatches in {}", r.mismatches, r.samples));
    }
    let (stack, tape) = discrete_limit_error(1000, 5);
    check("discrete stack".into(), stack <= 1e-12, format!("max error {stack:.1e}"));
    check("discrete tape".into(), tape <= 1e-12, format!("max error {tape:.1e}"));
    match permutation_equivariance_error(PosEnc::None, 20, 9, 4) {
        Ok(err) => check("transformer permutation equivariance".into(), err <= 1e-5, format!("max deviation {err:.1e}")),
        Err(e) => check("transformer permutation equivariance".into(), false, e.to_string()),
    }
    let failures = scripted_duplicate_failures(64, 2, 9);
    check("scripted duplicate".into(), failures.is_empty(), format!("failing lengths {failures:?}"));
    match checkpoint_round_trip(options.corrupt_checkpoint) {
        Ok(same) => check("checkpoint round trip".into(), same, if same { "byte-identical" } else { "mismatch or unreadable" }.into()),
        Err(e) => check("checkpoint round trip".into(), false, e.to_string()),
    }
    checks
}

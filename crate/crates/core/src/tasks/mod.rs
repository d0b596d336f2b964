//! The fifteen transduction tasks: samplers, exact targets and metadata.
//!
//! Inputs and targets are integer token codes. Each task fixes its own
//! coding; the symbol tables in [`TaskSpec`] give the readable form.

pub mod bits;
pub mod modexpr;
pub mod stack_program;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use modexpr::{ExprToken, MODULUS};
use stack_program::StackOp;

pub use bits::{add_bits, isqrt_bits, mul_bits};
pub use modexpr::{eval_mod_expr, sample_mod_expression, solve_equation_target};
pub use stack_program::exec_stack_program;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    Regular,
    DeterministicContextFree,
    ContextSensitive,
}

impl Level {
    pub fn short(self) -> &'static str {
        match self {
            Level::Regular => "R",
            Level::DeterministicContextFree => "DCF",
            Level::ContextSensitive => "CS",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    EvenPairs,
    ModArithSimple,
    ParityCheck,
    CycleNavigation,
    StackManipulation,
    ReverseString,
    ModArithBrackets,
    SolveEquation,
    DuplicateString,
    MissingDuplicate,
    OddsFirst,
    BinaryAddition,
    BinaryMultiplication,
    ComputeSqrt,
    BucketSort,
}

/// Static description of a task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub id: TaskId,
    pub level: Level,
    pub input_symbols: &'static [&'static str],
    pub output_symbols: &'static [&'static str],
    /// Accuracy of uniform guessing as conventionally reported.
    pub baseline: f64,
    /// Reference input/output pair, written as in the task catalogue.
    pub example: (&'static str, &'static str),
}

impl TaskSpec {
    pub fn input_vocab(&self) -> usize {
        self.input_symbols.len()
    }

    pub fn output_vocab(&self) -> usize {
        self.output_symbols.len()
    }

    /// Renders input tokens; multi-character symbols are space separated.
    pub fn render_input(&self, tokens: &[usize]) -> String {
        render(self.input_symbols, tokens)
    }

    pub fn render_output(&self, tokens: &[usize]) -> String {
        render(self.output_symbols, tokens)
    }

    /// Inverse of [`TaskSpec::render_input`].
    pub fn parse_input(&self, text: &str) -> Result<Vec<usize>> {
        parse(self.input_symbols, text)
    }

    pub fn parse_output(&self, text: &str) -> Result<Vec<usize>> {
        parse(self.output_symbols, text)
    }
}

fn render(symbols: &[&str], tokens: &[usize]) -> String {
    let strs: Vec<&str> = tokens.iter().map(|&t| symbols.get(t).copied().unwrap_or("?")).collect();
    if strs.iter().all(|s| s.chars().count() == 1) {
        strs.concat()
    } else {
        strs.join(" ")
    }
}

fn parse(symbols: &[&str], text: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        if let Some(i) = symbols.iter().position(|s| *s == chunk) {
            out.push(i);
            continue;
        }
        for c in chunk.chars() {
            let i = symbols
                .iter()
                .position(|s| s.chars().eq(std::iter::once(c)))
                .ok_or_else(|| Error::InvalidInput(format!("unknown symbol {c:?}")))?;
            out.push(i);
        }
    }
    Ok(out)
}

const BINARY: &[&str] = &["a", "b"];
const BITS: &[&str] = &["0", "1"];
const RESIDUES: &[&str] = &["0", "1", "2", "3", "4"];
const FLAT_EXPR: &[&str] = &["0", "1", "2", "3", "4", "+", "-", "*"];
const BRACKET_EXPR: &[&str] = &["0", "1", "2", "3", "4", "+", "-", "*", "(", ")"];
const EQUATION: &[&str] = &["0", "1", "2", "3", "4", "+", "-", "*", "(", ")", "z", "="];

pub const SYMBOL_A: usize = 0;
pub const SYMBOL_B: usize = 1;
/// Stack-program input codes after the two symbols.
pub const POP: usize = 2;
pub const PUSH_A: usize = 3;
pub const PUSH_B: usize = 4;
/// Hidden position marker of the missing-duplicate task.
pub const PLACEHOLDER: usize = 2;
/// Operator token between the two operands of binary arithmetic.
pub const OPERATOR: usize = 2;

impl TaskId {
    pub const ALL: [TaskId; 15] = [
        TaskId::EvenPairs,
        TaskId::ModArithSimple,
        TaskId::ParityCheck,
        TaskId::CycleNavigation,
        TaskId::StackManipulation,
        TaskId::ReverseString,
        TaskId::ModArithBrackets,
        TaskId::SolveEquation,
        TaskId::DuplicateString,
        TaskId::MissingDuplicate,
        TaskId::OddsFirst,
        TaskId::BinaryAddition,
        TaskId::BinaryMultiplication,
        TaskId::ComputeSqrt,
        TaskId::BucketSort,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::EvenPairs => "even_pairs",
            TaskId::ModArithSimple => "mod_arith_simple",
            TaskId::ParityCheck => "parity_check",
            TaskId::CycleNavigation => "cycle_navigation",
            TaskId::StackManipulation => "stack_manipulation",
            TaskId::ReverseString => "reverse_string",
            TaskId::ModArithBrackets => "mod_arith_brackets",
            TaskId::SolveEquation => "solve_equation",
            TaskId::DuplicateString => "duplicate_string",
            TaskId::MissingDuplicate => "missing_duplicate",
            TaskId::OddsFirst => "odds_first",
            TaskId::BinaryAddition => "binary_addition",
            TaskId::BinaryMultiplication => "binary_multiplication",
            TaskId::ComputeSqrt => "compute_sqrt",
            TaskId::BucketSort => "bucket_sort",
        }
    }

    pub fn level(self) -> Level {
        use TaskId::*;
        match self {
            EvenPairs | ModArithSimple | ParityCheck | CycleNavigation => Level::Regular,
            StackManipulation | ReverseString | ModArithBrackets | SolveEquation => {
                Level::DeterministicContextFree
            }
            _ => Level::ContextSensitive,
        }
    }

    pub fn spec(self) -> TaskSpec {
        use TaskId::*;
        let (input_symbols, output_symbols, example): (&'static [&'static str], &'static [&'static str], _) =
            match self {
                EvenPairs => (BINARY, BINARY, ("aabba", "b")),
                ModArithSimple => (FLAT_EXPR, RESIDUES, ("1+2-4", "4")),
                ParityCheck => (BINARY, BINARY, ("aaabba", "b")),
                CycleNavigation => (&["0", "1", "2"], RESIDUES, ("011210", "2")),
                StackManipulation => (
                    &["a", "b", "POP", "PUSH_a", "PUSH_b"],
                    BINARY,
                    ("a b b a a POP PUSH_a POP", "abba"),
                ),
                ReverseString => (BINARY, BINARY, ("aabba", "abbaa")),
                ModArithBrackets => (BRACKET_EXPR, RESIDUES, ("-(1-2)*(4-3*(-2))", "0")),
                SolveEquation => (EQUATION, RESIDUES, ("-(z-2)*(4-3*(-2))=0", "1")),
                DuplicateString => (BINARY, BINARY, ("abaab", "abaababaab")),
                MissingDuplicate => (&["0", "1", "_"], BITS, ("100110_1", "0")),
                OddsFirst => (BINARY, BINARY, ("aaabaa", "aaaaba")),
                BinaryAddition => (&["0", "1", "+"], BITS, ("10010+101", "10111")),
                BinaryMultiplication => (&["0", "1", "*"], BITS, ("10010*101", "1001000")),
                ComputeSqrt => (BITS, BITS, ("100010", "110")),
                BucketSort => (RESIDUES, RESIDUES, ("421302214", "011222344")),
            };
        let baseline = match self {
            CycleNavigation | BucketSort | ModArithSimple | ModArithBrackets => 0.2,
            _ => 0.5,
        };
        TaskSpec { id: self, level: self.level(), input_symbols, output_symbols, baseline, example }
    }

    /// Length actually generated for a requested length `len`. For
    /// `solve_equation` this counts the expression only; the input carries
    /// two more tokens (`=` and the right-hand side).
    pub fn adjusted_length(self, len: usize) -> usize {
        let len = len.max(1);
        match self {
            TaskId::ModArithSimple => modexpr::feasible_length(len, false),
            TaskId::MissingDuplicate => (len + len % 2).max(2),
            TaskId::BinaryAddition | TaskId::BinaryMultiplication => len.max(3),
            _ => len,
        }
    }

    /// Whether each target has exactly one token.
    pub fn is_classification(self) -> bool {
        use TaskId::*;
        matches!(
            self,
            EvenPairs | ModArithSimple | ParityCheck | CycleNavigation | ModArithBrackets | SolveEquation | MissingDuplicate
        )
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskId::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| {
            let names: Vec<&str> = TaskId::ALL.iter().map(|t| t.name()).collect();
            Error::Config(format!("unknown task {s:?}; valid tasks: {}", names.join(", ")))
        })
    }
}

/// An input with its target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSample {
    pub task: TaskId,
    /// Requested length before adjustment.
    pub length: usize,
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

impl TaskSample {
    pub fn output_len(&self) -> usize {
        self.target.len()
    }
}

fn uniform_tokens<R: Rng + ?Sized>(rng: &mut R, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.gen_range(0..vocab)).collect()
}

/// A uniformly random valid input for `task` of length
/// [`TaskId::adjusted_length`]`(len)`.
pub fn sample_input<R: Rng + ?Sized>(task: TaskId, rng: &mut R, len: usize) -> Vec<usize> {
    use TaskId::*;
    let len = task.adjusted_length(len);
    match task {
        EvenPairs | ParityCheck | ReverseString | DuplicateString | OddsFirst => uniform_tokens(rng, len, 2),
        ComputeSqrt => uniform_tokens(rng, len, 2),
        CycleNavigation => uniform_tokens(rng, len, 3),
        BucketSort => uniform_tokens(rng, len, 5),
        ModArithSimple | ModArithBrackets => {
            sample_mod_expression(rng, len, task == ModArithBrackets, false).iter().map(|t| t.code()).collect()
        }
        SolveEquation => sample_equation(rng, len),
        StackManipulation => sample_stack_program(rng, len),
        MissingDuplicate => {
            let half = uniform_tokens(rng, len / 2, 2);
            let mut out = [half.as_slice(), half.as_slice()].concat();
            let hide = rng.gen_range(0..len);
            out[hide] = PLACEHOLDER;
            out
        }
        BinaryAddition | BinaryMultiplication => {
            let left = rng.gen_range(1..=len - 2);
            let mut out = uniform_tokens(rng, left, 2);
            out.push(OPERATOR);
            out.extend(uniform_tokens(rng, len - 1 - left, 2));
            out
        }
    }
}

fn sample_equation<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<usize> {
    loop {
        let expr = sample_mod_expression(rng, len, true, true);
        let z = rng.gen_range(0..MODULUS);
        let rhs = eval_mod_expr(&expr, Some(z)).expect("sampled expressions are well formed");
        if solve_equation_target(&expr, rhs).ok() == Some(z) {
            let mut out: Vec<usize> = expr.iter().map(|t| t.code()).collect();
            out.push(ExprToken::Equals.code());
            out.push(rhs as usize);
            return out;
        }
    }
}

fn sample_stack_program<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<usize> {
    loop {
        let initial = rng.gen_range(1..=len);
        let mut out = uniform_tokens(rng, initial, 2);
        out.extend((initial..len).map(|_| [POP, PUSH_A, PUSH_B][rng.gen_range(0..3)]));
        let depth = out.iter().fold(0usize, |d, &t| match t {
            POP => d.saturating_sub(1),
            _ => d + 1,
        });
        if depth > 0 {
            return out;
        }
    }
}

fn bad(task: TaskId, reason: impl Into<String>) -> Error {
    Error::malformed(task.name(), reason)
}

fn check_vocab(task: TaskId, input: &[usize]) -> Result<()> {
    let vocab = task.spec().input_vocab();
    if let Some(&t) = input.iter().find(|&&t| t >= vocab) {
        return Err(bad(task, format!("token {t} outside the {vocab}-symbol alphabet")));
    }
    if input.is_empty() {
        return Err(bad(task, "empty input"));
    }
    Ok(())
}

fn expr_tokens(task: TaskId, input: &[usize], allowed: usize) -> Result<Vec<ExprToken>> {
    input
        .iter()
        .map(|&c| {
            if c >= allowed {
                return Err(bad(task, format!("token {c} not allowed in this expression")));
            }
            ExprToken::from_code(c).ok_or_else(|| bad(task, format!("unknown token {c}")))
        })
        .collect()
}

fn as_bits(input: &[usize]) -> Vec<u8> {
    input.iter().map(|&t| t as u8).collect()
}

fn from_bits(bits: Vec<u8>) -> Vec<usize> {
    bits.into_iter().map(usize::from).collect()
}

/// The exact target of `input`.
pub fn ground_truth(task: TaskId, input: &[usize]) -> Result<Vec<usize>> {
    use TaskId::*;
    check_vocab(task, input)?;
    Ok(match task {
        EvenPairs => vec![usize::from(input[0] == input[input.len() - 1])],
        ParityCheck => vec![usize::from(input.iter().filter(|&&t| t == SYMBOL_B).count() % 2 == 0)],
        CycleNavigation => {
            let pos = input.iter().fold(0usize, |p, &m| match m {
                1 => (p + 1) % 5,
                2 => (p + 4) % 5,
                _ => p,
            });
            vec![pos]
        }
        ModArithSimple | ModArithBrackets => {
            let allowed = if task == ModArithSimple { 8 } else { 10 };
            let expr = expr_tokens(task, input, allowed)?;
            vec![eval_mod_expr(&expr, None)? as usize]
        }
        SolveEquation => {
            let n = input.len();
            if n < 3 || input[n - 2] != ExprToken::Equals.code() || input[n - 1] >= MODULUS as usize {
                return Err(bad(task, "expected `expression = residue`"));
            }
            let expr = expr_tokens(task, &input[..n - 2], ExprToken::Equals.code())?;
            vec![solve_equation_target(&expr, input[n - 1] as u8)? as usize]
        }
        StackManipulation => {
            let split = input.iter().position(|&t| t >= POP).unwrap_or(input.len());
            let initial: Vec<u8> = input[..split].iter().map(|&t| t as u8).collect();
            let ops = input[split..]
                .iter()
                .map(|&t| match t {
                    POP => Ok(StackOp::Pop),
                    PUSH_A => Ok(StackOp::Push(0)),
                    PUSH_B => Ok(StackOp::Push(1)),
                    other => Err(bad(task, format!("symbol {other} after the first action"))),
                })
                .collect::<Result<Vec<_>>>()?;
            let out = exec_stack_program(&initial, &ops);
            if out.is_empty() {
                return Err(bad(task, "program leaves an empty stack"));
            }
            out.into_iter().map(usize::from).collect()
        }
        ReverseString => input.iter().rev().copied().collect(),
        DuplicateString => [input, input].concat(),
        MissingDuplicate => {
            let n = input.len();
            let holes: Vec<usize> = (0..n).filter(|&i| input[i] == PLACEHOLDER).collect();
            if n % 2 != 0 || holes.len() != 1 {
                return Err(bad(task, "expected an even-length string with one placeholder"));
            }
            let half = n / 2;
            let hole = holes[0];
            let twin = if hole < half { hole + half } else { hole - half };
            for i in 0..half {
                if i != hole % half && input[i] != input[i + half] {
                    return Err(bad(task, "halves differ outside the placeholder"));
                }
            }
            vec![input[twin]]
        }
        OddsFirst => input.iter().step_by(2).chain(input.iter().skip(1).step_by(2)).copied().collect(),
        BinaryAddition | BinaryMultiplication => {
            let ops: Vec<usize> = (0..input.len()).filter(|&i| input[i] == OPERATOR).collect();
            let &[at] = ops.as_slice() else {
                return Err(bad(task, "expected exactly one operator"));
            };
            if at == 0 || at + 1 == input.len() {
                return Err(bad(task, "empty operand"));
            }
            let (a, b) = (as_bits(&input[..at]), as_bits(&input[at + 1..]));
            from_bits(if task == BinaryAddition { add_bits(&a, &b) } else { mul_bits(&a, &b) })
        }
        ComputeSqrt => from_bits(isqrt_bits(&as_bits(input))),
        BucketSort => {
            let mut out = input.to_vec();
            out.sort_unstable();
            out
        }
    })
}

/// Samples an input of requested length `len` together with its target.
pub fn sample<R: Rng + ?Sized>(task: TaskId, rng: &mut R, len: usize) -> TaskSample {
    let input = sample_input(task, rng, len);
    let target = ground_truth(task, &input).expect("sampled inputs are well formed");
    TaskSample { task, length: len, input, target }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn truth(task: TaskId, text: &str) -> String {
        let spec = task.spec();
        let out = ground_truth(task, &spec.parse_input(text).unwrap()).unwrap();
        spec.render_output(&out)
    }

    #[test]
    fn catalogue_examples() {
        assert_eq!(truth(TaskId::EvenPairs, "aabba"), "b");
        assert_eq!(truth(TaskId::ParityCheck, "aaabba"), "b");
        assert_eq!(truth(TaskId::CycleNavigation, "011210"), "2");
        assert_eq!(truth(TaskId::ReverseString, "aabba"), "abbaa");
        assert_eq!(truth(TaskId::DuplicateString, "abaab"), "abaababaab");
        assert_eq!(truth(TaskId::MissingDuplicate, "100110_1"), "0");
        assert_eq!(truth(TaskId::OddsFirst, "aaabaa"), "aaaaba");
        assert_eq!(truth(TaskId::BucketSort, "421302214"), "011222344");
        assert_eq!(truth(TaskId::StackManipulation, "a b b a a POP PUSH_a POP"), "abba");
        assert_eq!(truth(TaskId::ModArithSimple, "1+2-4"), "4");
        assert_eq!(truth(TaskId::ModArithBrackets, "-(1-2)*(4-3*(-2))"), "0");
    }

    #[test]
    fn missing_duplicate_accepts_placeholder_code_in_text() {
        // The catalogue writes the hidden position as the digit 2.
        let input = vec![1, 0, 0, 1, 1, 0, PLACEHOLDER, 1];
        assert_eq!(ground_truth(TaskId::MissingDuplicate, &input).unwrap(), vec![0]);
    }

    #[test]
    fn levels_match_catalogue() {
        let count = |l| TaskId::ALL.iter().filter(|t| t.level() == l).count();
        assert_eq!(count(Level::Regular), 4);
        assert_eq!(count(Level::DeterministicContextFree), 4);
        assert_eq!(count(Level::ContextSensitive), 7);
        let fifth: Vec<_> = TaskId::ALL.iter().filter(|t| t.spec().baseline == 0.2).map(|t| t.name()).collect();
        assert_eq!(fifth, ["mod_arith_simple", "cycle_navigation", "mod_arith_brackets", "bucket_sort"]);
    }

    #[test]
    fn names_round_trip_and_unknown_lists_all() {
        for t in TaskId::ALL {
            assert_eq!(t.name().parse::<TaskId>().unwrap(), t);
        }
        let err = "nosuch".parse::<TaskId>().unwrap_err().to_string();
        assert!(TaskId::ALL.iter().all(|t| err.contains(t.name())));
    }

    #[test]
    fn length_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = sample(TaskId::ParityCheck, &mut rng, 6);
        assert_eq!(s.input.len(), 6);
        let s = sample(TaskId::ModArithSimple, &mut rng, 6);
        assert_eq!(s.input.len(), 7);
        assert!(s.input.iter().enumerate().all(|(i, &t)| (t < 5) == (i % 2 == 0)));
        let s = sample(TaskId::DuplicateString, &mut rng, 5);
        assert_eq!((s.input.len(), s.target.len()), (5, 10));
        assert_eq!(sample(TaskId::BinaryAddition, &mut rng, 1).input.len(), 3);
        assert_eq!(sample(TaskId::MissingDuplicate, &mut rng, 1).input.len(), 2);
        assert_eq!(sample(TaskId::SolveEquation, &mut rng, 4).input.len(), 6);
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        assert!(ground_truth(TaskId::ModArithBrackets, &[8, 1, 5, 2]).is_err());
        assert!(ground_truth(TaskId::ModArithSimple, &[8, 1, 9]).is_err());
        assert!(ground_truth(TaskId::BinaryAddition, &[1, 1]).is_err());
        assert!(ground_truth(TaskId::BinaryAddition, &[2, 1]).is_err());
        assert!(ground_truth(TaskId::MissingDuplicate, &[0, 1]).is_err());
        assert!(ground_truth(TaskId::ReverseString, &[]).is_err());
        assert!(ground_truth(TaskId::ParityCheck, &[3]).is_err());
        assert!(ground_truth(TaskId::StackManipulation, &[0, POP]).is_err());
        assert!(ground_truth(TaskId::SolveEquation, &[10, 11]).is_err());
    }

    #[test]
    fn solve_equation_samples_have_unique_solutions() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for len in 1..30 {
            let s = sample(TaskId::SolveEquation, &mut rng, len);
            assert_eq!(s.input.len(), len + 2);
            assert_eq!(s.input.iter().filter(|&&t| t == 10).count(), 1);
        }
    }
}

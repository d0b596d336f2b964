//! Modular arithmetic expressions over residues mod 5.
//!
//! Grammar (one bracket level):
//!
//! ```text
//! level   := ['-'] operand (op operand)*
//! operand := digit | 'z' | '(' level ')'
//! op      := '+' | '-' | '*'
//! ```
//!
//! Evaluation uses the usual precedence: `*` binds tighter than `+`/`-`,
//! operators of equal precedence associate to the left, and a leading `-`
//! negates the first operand of its level.

use rand::Rng;

use crate::error::{Error, Result};

pub const MODULUS: u8 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ExprToken {
    Digit(u8),
    Plus,
    Minus,
    Times,
    Open,
    Close,
    Var,
    Equals,
}

impl ExprToken {
    /// Integer code: digits 0..=4, then `+ - * ( ) z =` as 5..=11.
    pub fn code(self) -> usize {
        match self {
            ExprToken::Digit(d) => d as usize,
            ExprToken::Plus => 5,
            ExprToken::Minus => 6,
            ExprToken::Times => 7,
            ExprToken::Open => 8,
            ExprToken::Close => 9,
            ExprToken::Var => 10,
            ExprToken::Equals => 11,
        }
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Some(match code {
            0..=4 => ExprToken::Digit(code as u8),
            5 => ExprToken::Plus,
            6 => ExprToken::Minus,
            7 => ExprToken::Times,
            8 => ExprToken::Open,
            9 => ExprToken::Close,
            10 => ExprToken::Var,
            11 => ExprToken::Equals,
            _ => return None,
        })
    }

    pub fn symbol(self) -> char {
        match self {
            ExprToken::Digit(d) => char::from(b'0' + d),
            ExprToken::Plus => '+',
            ExprToken::Minus => '-',
            ExprToken::Times => '*',
            ExprToken::Open => '(',
            ExprToken::Close => ')',
            ExprToken::Var => 'z',
            ExprToken::Equals => '=',
        }
    }

    pub fn from_symbol(c: char) -> Option<Self> {
        Some(match c {
            '0'..='4' => ExprToken::Digit(c as u8 - b'0'),
            '+' => ExprToken::Plus,
            '-' | '−' => ExprToken::Minus,
            '*' | '·' => ExprToken::Times,
            '(' => ExprToken::Open,
            ')' => ExprToken::Close,
            'z' | 'x' => ExprToken::Var,
            '=' => ExprToken::Equals,
            _ => return None,
        })
    }
}

/// Parses a compact textual expression such as `-(1-2)*(4-3*(-2))`.
pub fn parse_expr(text: &str) -> Result<Vec<ExprToken>> {
    text.chars()
        .filter(|c| !c.is_whitespace())
        .map(|c| ExprToken::from_symbol(c).ok_or_else(|| Error::InvalidInput(format!("unknown symbol {c:?}"))))
        .collect()
}

pub fn render_expr(tokens: &[ExprToken]) -> String {
    tokens.iter().map(|t| t.symbol()).collect()
}

struct Evaluator<'a> {
    tokens: &'a [ExprToken],
    pos: usize,
    z: Option<u8>,
}

fn malformed(reason: impl Into<String>) -> Error {
    Error::malformed("modular expression", reason)
}

impl Evaluator<'_> {
    fn peek(&self) -> Option<ExprToken> {
        self.tokens.get(self.pos).copied()
    }

    fn level(&mut self) -> Result<i64> {
        let negate = if self.peek() == Some(ExprToken::Minus) {
            self.pos += 1;
            true
        } else {
            false
        };
        let mut acc = self.product()?;
        if negate {
            acc = -acc;
        }
        loop {
            match self.peek() {
                Some(ExprToken::Plus) => {
                    self.pos += 1;
                    acc += self.product()?;
                }
                Some(ExprToken::Minus) => {
                    self.pos += 1;
                    acc -= self.product()?;
                }
                _ => return Ok(acc.rem_euclid(MODULUS as i64)),
            }
        }
    }

    fn product(&mut self) -> Result<i64> {
        let mut acc = self.operand()?;
        while self.peek() == Some(ExprToken::Times) {
            self.pos += 1;
            acc = (acc * self.operand()?).rem_euclid(MODULUS as i64);
        }
        Ok(acc)
    }

    fn operand(&mut self) -> Result<i64> {
        let tok = self.peek().ok_or_else(|| malformed("expression ends where an operand is expected"))?;
        self.pos += 1;
        match tok {
            ExprToken::Digit(d) if d < MODULUS => Ok(d as i64),
            ExprToken::Var => self
                .z
                .map(i64::from)
                .ok_or_else(|| malformed("variable present but no value supplied")),
            ExprToken::Open => {
                let v = self.level()?;
                if self.peek() != Some(ExprToken::Close) {
                    return Err(malformed(format!("unbalanced bracket at position {}", self.pos)));
                }
                self.pos += 1;
                Ok(v)
            }
            other => Err(malformed(format!("unexpected {:?} at position {}", other.symbol(), self.pos - 1))),
        }
    }
}

/// Value of an expression mod 5. `z` must be supplied iff the expression
/// contains the variable.
pub fn eval_mod_expr(tokens: &[ExprToken], z: Option<u8>) -> Result<u8> {
    let has_var = tokens.contains(&ExprToken::Var);
    if has_var != z.is_some() {
        return Err(malformed(if has_var { "variable without a value" } else { "value without a variable" }));
    }
    if let Some(z) = z {
        if z >= MODULUS {
            return Err(Error::InvalidInput(format!("z = {z} is not a residue mod {MODULUS}")));
        }
    }
    let mut ev = Evaluator { tokens, pos: 0, z };
    let v = ev.level()?;
    if ev.pos != tokens.len() {
        return Err(malformed(format!("trailing tokens from position {}", ev.pos)));
    }
    Ok(v as u8)
}

/// All residues `z` for which `expr(z) ≡ rhs`.
pub fn solutions(expr: &[ExprToken], rhs: u8) -> Result<Vec<u8>> {
    if expr.iter().filter(|&&t| t == ExprToken::Var).count() != 1 {
        return Err(malformed("equation needs exactly one variable"));
    }
    let mut out = Vec::new();
    for z in 0..MODULUS {
        if eval_mod_expr(expr, Some(z))? == rhs % MODULUS {
            out.push(z);
        }
    }
    Ok(out)
}

/// The unique residue solving `expr(z) ≡ rhs`; zero or several solutions
/// are reported as ambiguous.
pub fn solve_equation_target(expr: &[ExprToken], rhs: u8) -> Result<u8> {
    match solutions(expr, rhs)?.as_slice() {
        [z] => Ok(*z),
        many => Err(Error::InvalidInput(format!("ambiguous equation: {} solutions", many.len()))),
    }
}

fn random_op<R: Rng + ?Sized>(rng: &mut R) -> ExprToken {
    [ExprToken::Plus, ExprToken::Minus, ExprToken::Times][rng.gen_range(0..3)]
}

fn random_digit<R: Rng + ?Sized>(rng: &mut R) -> ExprToken {
    ExprToken::Digit(rng.gen_range(0..MODULUS))
}

/// Lengths reachable by `operand (op operand)*`.
fn operands_feasible(len: usize) -> bool {
    len == 1 || len >= 3
}

/// Length after adjustment: flat expressions need odd lengths, bracketed
/// ones reach every length.
pub fn feasible_length(len: usize, with_brackets: bool) -> usize {
    let len = len.max(1);
    if with_brackets || len % 2 == 1 {
        len
    } else {
        len + 1
    }
}

/// Samples a well-formed expression of exactly `feasible_length(len)`
/// tokens. With `with_variable`, one uniformly chosen digit becomes `z`.
pub fn sample_mod_expression<R: Rng + ?Sized>(
    rng: &mut R,
    len: usize,
    with_brackets: bool,
    with_variable: bool,
) -> Vec<ExprToken> {
    let len = feasible_length(len, with_brackets);
    let mut out = Vec::with_capacity(len);
    if with_brackets {
        sample_level(rng, len, &mut out);
    } else {
        out.push(random_digit(rng));
        while out.len() < len {
            out.push(random_op(rng));
            out.push(random_digit(rng));
        }
    }
    debug_assert_eq!(out.len(), len);
    if with_variable {
        let digits: Vec<usize> = (0..out.len()).filter(|&i| matches!(out[i], ExprToken::Digit(_))).collect();
        let pick = digits[rng.gen_range(0..digits.len())];
        out[pick] = ExprToken::Var;
    }
    out
}

fn sample_level<R: Rng + ?Sized>(rng: &mut R, len: usize, out: &mut Vec<ExprToken>) {
    let plain = operands_feasible(len);
    let negated = len >= 2 && operands_feasible(len - 1);
    let use_minus = match (plain, negated) {
        (true, true) => rng.gen_bool(0.5),
        (false, true) => true,
        _ => false,
    };
    let mut budget = len;
    if use_minus {
        out.push(ExprToken::Minus);
        budget -= 1;
    }
    sample_operands(rng, budget, out);
}

fn sample_operands<R: Rng + ?Sized>(rng: &mut R, mut budget: usize, out: &mut Vec<ExprToken>) {
    loop {
        // Operand lengths that leave a remainder of 0 or of at least 2.
        let rest_ok = |t: usize| budget == t || (budget >= t + 2 && operands_feasible(budget - t - 1));
        let digit_ok = rest_ok(1);
        let bracket_lengths: Vec<usize> = (3..=budget).filter(|&t| rest_ok(t)).collect();
        let use_bracket = match (digit_ok, bracket_lengths.is_empty()) {
            (true, false) => rng.gen_bool(0.5),
            (false, false) => true,
            _ => false,
        };
        let taken = if use_bracket {
            let t = bracket_lengths[rng.gen_range(0..bracket_lengths.len())];
            out.push(ExprToken::Open);
            sample_level(rng, t - 2, out);
            out.push(ExprToken::Close);
            t
        } else {
            out.push(random_digit(rng));
            1
        };
        budget -= taken;
        if budget == 0 {
            return;
        }
        out.push(random_op(rng));
        budget -= 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eval(text: &str) -> u8 {
        eval_mod_expr(&parse_expr(text).unwrap(), None).unwrap()
    }

    #[test]
    fn worked_examples() {
        assert_eq!(eval("1+2-4"), 4);
        assert_eq!(eval("3"), 3);
        assert_eq!(eval("-(1-2)*(4-3*(-2))"), 0);
        assert_eq!(eval("1+2*3"), 2);
    }

    #[test]
    fn malformed_expressions_are_rejected() {
        for bad in ["(1+2", "1+", "+1", "1 2", "()", "1)", "--1"] {
            assert!(eval_mod_expr(&parse_expr(bad).unwrap(), None).is_err(), "{bad}");
        }
        let with_z = parse_expr("z+1").unwrap();
        assert!(eval_mod_expr(&with_z, None).is_err());
    }

    #[test]
    fn equation_targets() {
        assert_eq!(solve_equation_target(&parse_expr("z").unwrap(), 3).unwrap(), 3);
        assert_eq!(solve_equation_target(&parse_expr("z+1").unwrap(), 0).unwrap(), 4);
        let doc = parse_expr("-(z-2)*(4-3*(-2))").unwrap();
        assert_eq!(eval_mod_expr(&doc, Some(1)).unwrap(), 0);
        assert_eq!(solutions(&doc, 0).unwrap().len(), 5);
        assert!(solve_equation_target(&doc, 0).is_err());
    }

    #[test]
    fn short_lengths_have_forced_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let one = sample_mod_expression(&mut rng, 1, false, false);
        assert!(matches!(one.as_slice(), [ExprToken::Digit(_)]));
        let three = sample_mod_expression(&mut rng, 3, false, false);
        assert!(matches!(
            three.as_slice(),
            [ExprToken::Digit(_), ExprToken::Plus | ExprToken::Minus | ExprToken::Times, ExprToken::Digit(_)]
        ));
        assert_eq!(sample_mod_expression(&mut rng, 6, false, false).len(), 7);
    }

    #[test]
    fn sampled_expressions_parse() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for i in 0..10_000 {
            let len = rng.gen_range(1..=60);
            let brackets = i % 2 == 0;
            let e = sample_mod_expression(&mut rng, len, brackets, false);
            assert_eq!(e.len(), feasible_length(len, brackets));
            eval_mod_expr(&e, None).unwrap_or_else(|err| panic!("{}: {err}", render_expr(&e)));
        }
    }
}

/// One instruction of a stack program over the symbols `a` (0) and `b` (1).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StackOp {
    Push(u8),
    Pop,
}

/// Runs `ops` on a stack initialised bottom-to-top from `initial` and
/// returns the final content top-to-bottom. Pops on an empty stack do
/// nothing.
pub fn exec_stack_program(initial: &[u8], ops: &[StackOp]) -> Vec<u8> {
    let mut stack = initial.to_vec();
    for op in ops {
        match *op {
            StackOp::Push(s) => stack.push(s),
            StackOp::Pop => {
                stack.pop();
            }
        }
    }
    stack.reverse();
    stack
}

#[cfg(test)]
mod tests {
    use super::*;
    use StackOp::*;

    #[test]
    fn worked_example() {
        assert_eq!(exec_stack_program(&[0, 1, 1, 0, 0], &[Pop, Push(0), Pop]), vec![0, 1, 1, 0]);
    }

    #[test]
    fn no_actions_reads_top_first() {
        assert_eq!(exec_stack_program(&[0, 1], &[]), vec![1, 0]);
    }

    #[test]
    fn pop_on_empty_is_ignored() {
        assert_eq!(exec_stack_program(&[], &[Pop, Push(1)]), vec![1]);
    }
}

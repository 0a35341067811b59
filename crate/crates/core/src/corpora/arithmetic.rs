use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArithOp {
    Add,
    Sub,
    Mul,
}

impl ArithOp {
    pub const ALL: [ArithOp; 3] = [ArithOp::Add, ArithOp::Sub, ArithOp::Mul];

    pub fn symbol(self) -> char {
        match self {
            ArithOp::Add => '+',
            ArithOp::Sub => '-',
            ArithOp::Mul => '*',
        }
    }

    pub fn apply(self, a: i64, b: i64) -> i64 {
        match self {
            ArithOp::Add => a + b,
            ArithOp::Sub => a - b,
            ArithOp::Mul => a * b,
        }
    }
}

/// `(a op b) op c` or `a op (b op c)` over single-digit operands.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArithmeticExample {
    pub operands: [i64; 3],
    pub ops: [ArithOp; 2],
    pub group_left: bool,
    pub answer: i64,
}

pub const ARITH_PREFIX: &str = "Question: What is ";
pub const ARITH_SUFFIX: &str = "? Answer:";

impl ArithmeticExample {
    pub fn new(operands: [i64; 3], ops: [ArithOp; 2], group_left: bool) -> Self {
        let [a, b, c] = operands;
        let answer = if group_left {
            ops[1].apply(ops[0].apply(a, b), c)
        } else {
            ops[0].apply(a, ops[1].apply(b, c))
        };
        Self { operands, ops, group_left, answer }
    }

    pub fn expr(&self) -> String {
        let [a, b, c] = self.operands;
        let (o1, o2) = (self.ops[0].symbol(), self.ops[1].symbol());
        if self.group_left {
            format!("({a} {o1} {b}) {o2} {c}")
        } else {
            format!("{a} {o1} ({b} {o2} {c})")
        }
    }

    /// Inverse of [`ArithmeticExample::expr`].
    pub fn from_expr(text: &str) -> Option<Self> {
        let t: Vec<char> = text.chars().filter(|c| !c.is_whitespace()).collect();
        let digit = |c: char| c.to_digit(10).map(i64::from);
        let op = |c: char| ArithOp::ALL.into_iter().find(|o| o.symbol() == c);
        match t.as_slice() {
            ['(', a, o1, b, ')', o2, c] => Some(Self::new([digit(*a)?, digit(*b)?, digit(*c)?], [op(*o1)?, op(*o2)?], true)),
            [a, o1, '(', b, o2, c, ')'] => Some(Self::new([digit(*a)?, digit(*b)?, digit(*c)?], [op(*o1)?, op(*o2)?], false)),
            _ => None,
        }
    }

    /// Recovers the example from its prompt text.
    pub fn from_prompt(prompt: &str) -> Option<Self> {
        Self::from_expr(prompt.strip_prefix(ARITH_PREFIX)?.strip_suffix(ARITH_SUFFIX)?)
    }

    pub fn prompt(&self) -> String {
        format!("{ARITH_PREFIX}{}{ARITH_SUFFIX}", self.expr())
    }

    /// The grouped sub-expression and its value.
    pub fn inner(&self) -> (String, i64) {
        let [a, b, c] = self.operands;
        if self.group_left {
            (format!("{a} {} {b}", self.ops[0].symbol()), self.ops[0].apply(a, b))
        } else {
            (format!("{b} {} {c}", self.ops[1].symbol()), self.ops[1].apply(b, c))
        }
    }

    pub fn response(&self) -> String {
        self.answer.to_string()
    }

    /// A reference-style answer with free-form wording around the digit.
    pub fn annotated_response(&self, rng: &mut impl Rng) -> String {
        let (inner, inner_val) = self.inner();
        let ans = self.answer;
        let expr = self.expr();
        match rng.gen_range(0..6) {
            0 => format!("{ans}."),
            1 => format!("{ans}, because {expr} = {ans}."),
            2 => format!("{ans} since {inner} = {inner_val}."),
            3 => format!("The answer is {ans}."),
            4 => format!("First {inner} = {inner_val}, so the result is {ans}."),
            _ => format!("{ans}"),
        }
    }
}

/// `n` problems whose answer is a single digit 0–9, deterministic per seed.
pub fn gen_arithmetic(seed: u64, n: usize) -> Vec<ArithmeticExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let operands = [rng.gen_range(0..10), rng.gen_range(0..10), rng.gen_range(0..10)];
        let ops = [*ArithOp::ALL.choose(&mut rng).unwrap(), *ArithOp::ALL.choose(&mut rng).unwrap()];
        let ex = ArithmeticExample::new(operands, ops, rng.gen_bool(0.5));
        if (0..=9).contains(&ex.answer) {
            out.push(ex);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        let ex = ArithmeticExample::new([7, 5, 6], [ArithOp::Add, ArithOp::Sub], true);
        assert_eq!(ex.expr(), "(7 + 5) - 6");
        assert_eq!(ex.prompt(), "Question: What is (7 + 5) - 6? Answer:");
        assert_eq!(ex.answer, 6);
        assert_eq!(ArithmeticExample::new([0, 0, 0], [ArithOp::Add, ArithOp::Add], false).answer, 0);
    }

    #[test]
    fn deterministic_and_in_range() {
        let a = gen_arithmetic(9, 300);
        assert_eq!(a, gen_arithmetic(9, 300));
        assert_ne!(a, gen_arithmetic(10, 300));
        assert!(a.iter().all(|e| (0..=9).contains(&e.answer) && e.operands.iter().all(|o| (0..=9).contains(o))));
    }
}

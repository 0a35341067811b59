use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::minilang::{execute, BinOp, Expr, Let, Program, TestCase};

/// A described program with executable test cases.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiniLangTask {
    pub description: String,
    pub reference: String,
    pub tests: Vec<TestCase>,
}

pub const TASK_PREFIX: &str = "Task: ";
pub const TASK_SUFFIX: &str = "\nCode:\n";

const INPUT_NAMES: [&str; 6] = ["a", "b", "c", "n", "m", "k"];
const TEMP_NAMES: [&str; 3] = ["t", "s", "r"];
const N_TESTS: usize = 3;

impl MiniLangTask {
    pub fn prompt(&self) -> String {
        format!("{TASK_PREFIX}{}{TASK_SUFFIX}", self.description)
    }

    /// The reference program with random cosmetic spacing; still equivalent.
    pub fn annotated_response(&self, rng: &mut impl Rng) -> String {
        let mut out = String::new();
        for ch in self.reference.chars() {
            match ch {
                '+' | '-' | '*' if rng.gen_bool(0.5) => {
                    out.push(' ');
                    out.push(ch);
                    out.push(' ');
                }
                _ => out.push(ch),
            }
        }
        if rng.gen_bool(0.3) {
            out.push(';');
        }
        out
    }
}

fn op_word(op: BinOp) -> &'static str {
    match op {
        BinOp::Add => "plus",
        BinOp::Sub => "minus",
        BinOp::Mul => "times",
    }
}

/// Verbal rendering: operators become words, grouping stays explicit.
pub fn describe_expr(e: &Expr) -> String {
    match e {
        Expr::Int(v) => v.to_string(),
        Expr::Var(v) => v.clone(),
        Expr::Group(inner) => format!("({})", describe_expr(inner)),
        Expr::Bin(op, l, r) => format!("{} {} {}", describe_expr(l), op_word(*op), describe_expr(r)),
    }
}

pub fn describe_program(p: &Program) -> String {
    let mut parts: Vec<String> = p.lets.iter().map(|l| format!("let {} be {}", l.name, describe_expr(&l.value))).collect();
    parts.push(format!("return {}", describe_expr(&p.ret)));
    parts.join("; ")
}

fn leaf(vars: &[&str], rng: &mut ChaCha8Rng) -> Expr {
    if !vars.is_empty() && rng.gen_bool(0.75) {
        Expr::var(vars.choose(rng).unwrap())
    } else {
        Expr::Int(rng.gen_range(0..10))
    }
}

fn wrap(e: Expr) -> Expr {
    match e {
        Expr::Bin(..) => Expr::group(e),
        other => other,
    }
}

fn gen_expr(vars: &[&str], depth: usize, rng: &mut ChaCha8Rng) -> Expr {
    if depth == 0 || rng.gen_bool(0.3) {
        return leaf(vars, rng);
    }
    let op = *[BinOp::Add, BinOp::Sub, BinOp::Mul].choose(rng).unwrap();
    let l = gen_expr(vars, depth - 1, rng);
    let r = gen_expr(vars, depth - 1, rng);
    Expr::bin(op, wrap(l), wrap(r))
}

/// Builds the task for a reference program, drawing test bindings from `rng`.
pub fn task_for_program(program: &Program, rng: &mut impl Rng) -> MiniLangTask {
    let inputs = program.inputs();
    let tests = (0..N_TESTS)
        .map(|_| {
            let bindings: BTreeMap<String, i64> = inputs.iter().map(|v| (v.clone(), rng.gen_range(0..10))).collect();
            let expected = execute(program, &bindings).expect("generated programs bind every input");
            TestCase { bindings, expected }
        })
        .collect();
    MiniLangTask { description: describe_program(program), reference: program.to_string(), tests }
}

/// `n` tasks, deterministic per seed. Programs use up to three inputs, an
/// optional `let`, and at most two levels of operators.
pub fn gen_minilang_tasks(seed: u64, n: usize) -> Vec<MiniLangTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let n_vars = *[0usize, 1, 1, 2, 2, 2, 3, 3, 3, 3].choose(&mut rng).unwrap();
            let mut names = INPUT_NAMES.to_vec();
            names.shuffle(&mut rng);
            let vars: Vec<&str> = names[..n_vars].to_vec();
            let program = if rng.gen_bool(0.4) {
                let temp = *TEMP_NAMES.choose(&mut rng).unwrap();
                let value = gen_expr(&vars, 1 + rng.gen_range(0..2), &mut rng);
                let mut scope = vars.clone();
                scope.push(temp);
                let ret = gen_expr(&scope, 1, &mut rng);
                Program { lets: vec![Let { name: temp.to_string(), value }], ret }
            } else {
                Program { lets: vec![], ret: gen_expr(&vars, 2, &mut rng) }
            };
            task_for_program(&program, &mut rng)
        })
        .collect()
}

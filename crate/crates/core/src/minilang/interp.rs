use std::collections::{BTreeMap, HashMap};

use super::ast::{BinOp, Expr, Program};

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum RuntimeError {
    #[error("undefined variable `{0}`")]
    UndefinedVariable(String),
    #[error("integer overflow")]
    Overflow,
}

/// Runs the program with the given input bindings and returns the value of
/// its `return` expression.
pub fn execute(program: &Program, bindings: &BTreeMap<String, i64>) -> Result<i64, RuntimeError> {
    let mut env: HashMap<&str, i64> = bindings.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    for l in &program.lets {
        let v = eval(&l.value, &env)?;
        env.insert(l.name.as_str(), v);
    }
    eval(&program.ret, &env)
}

pub fn eval(expr: &Expr, env: &HashMap<&str, i64>) -> Result<i64, RuntimeError> {
    match expr {
        Expr::Int(v) => Ok(*v),
        Expr::Var(name) => env.get(name.as_str()).copied().ok_or_else(|| RuntimeError::UndefinedVariable(name.clone())),
        Expr::Group(e) => eval(e, env),
        Expr::Bin(op, l, r) => {
            let (a, b) = (eval(l, env)?, eval(r, env)?);
            match op {
                BinOp::Add => a.checked_add(b),
                BinOp::Sub => a.checked_sub(b),
                BinOp::Mul => a.checked_mul(b),
            }
            .ok_or(RuntimeError::Overflow)
        }
    }
}

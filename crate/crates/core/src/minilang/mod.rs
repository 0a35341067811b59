//! A tiny let/return expression language used to execute generated programs
//! and bucket failures by interpreter outcome.

mod ast;
mod interp;
mod lexer;
mod parser;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use ast::{BinOp, Expr, Let, Program};
pub use interp::{eval, execute, RuntimeError};
pub use lexer::{lex, LexError, Spanned, Tok};
pub use parser::{paren_violation, parse, ParseError, ParseErrorKind};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub bindings: BTreeMap<String, i64>,
    pub expected: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntaxOutcome {
    Pass,
    AssertionFail,
    UnbalancedParen,
    UndefinedVariable,
    OtherSyntax,
}

impl SyntaxOutcome {
    pub const ALL: [SyntaxOutcome; 5] = [
        SyntaxOutcome::Pass,
        SyntaxOutcome::AssertionFail,
        SyntaxOutcome::UnbalancedParen,
        SyntaxOutcome::UndefinedVariable,
        SyntaxOutcome::OtherSyntax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SyntaxOutcome::Pass => "pass",
            SyntaxOutcome::AssertionFail => "assertion_fail",
            SyntaxOutcome::UnbalancedParen => "unbalanced_paren",
            SyntaxOutcome::UndefinedVariable => "undefined_variable",
            SyntaxOutcome::OtherSyntax => "other_syntax",
        }
    }
}

/// Parses program text end to end.
pub fn parse_program(text: &str) -> Result<Program, SyntaxOutcome> {
    let tokens = lex(text).map_err(|_| SyntaxOutcome::OtherSyntax)?;
    parse(&tokens).map_err(|e| match e.kind {
        ParseErrorKind::UnbalancedParen => SyntaxOutcome::UnbalancedParen,
        ParseErrorKind::Syntax => SyntaxOutcome::OtherSyntax,
    })
}

/// Removes a surrounding markdown code fence. `None` means the fence is malformed.
pub fn strip_code_fence(text: &str) -> Option<&str> {
    let trimmed = text.trim();
    let Some(rest) = trimmed.strip_prefix("```") else {
        return Some(text);
    };
    let (_tag, body) = rest.split_once('\n')?;
    let body = body.trim_end().strip_suffix("```")?;
    if body.contains("```") {
        return None;
    }
    Some(body)
}

/// Buckets a generated program by what happens when it is parsed and run
/// against `tests`. Lex and parse errors win over runtime errors, and runtime
/// errors over wrong answers.
pub fn classify(generated: &str, tests: &[TestCase]) -> SyntaxOutcome {
    let Some(code) = strip_code_fence(generated) else {
        return SyntaxOutcome::OtherSyntax;
    };
    let program = match parse_program(code) {
        Ok(p) => p,
        Err(outcome) => return outcome,
    };
    let mut all_pass = true;
    for case in tests {
        match execute(&program, &case.bindings) {
            Ok(v) => all_pass &= v == case.expected,
            Err(RuntimeError::UndefinedVariable(_)) => return SyntaxOutcome::UndefinedVariable,
            Err(RuntimeError::Overflow) => return SyntaxOutcome::OtherSyntax,
        }
    }
    if all_pass {
        SyntaxOutcome::Pass
    } else {
        SyntaxOutcome::AssertionFail
    }
}

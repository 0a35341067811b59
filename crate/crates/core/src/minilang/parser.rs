//! Recursive-descent parser:
//!
//! ```text
//! program := { "let" IDENT "=" expr ";" } "return" expr [";"]
//! expr    := term { ("+" | "-") term }
//! term    := factor { "*" factor }
//! factor  := INT | IDENT | "(" expr ")"
//! ```

use super::ast::{BinOp, Expr, Let, Program};
use super::lexer::{Spanned, Tok};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParseErrorKind {
    UnbalancedParen,
    Syntax,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("{message} (at token {index})")]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub index: usize,
    pub message: String,
}

/// Index of the first paren-depth violation: a `)` taking depth below zero,
/// or the end of input while a `(` is still open.
pub fn paren_violation(tokens: &[Spanned]) -> Option<usize> {
    let mut depth: i64 = 0;
    for (i, t) in tokens.iter().enumerate() {
        match t.tok {
            Tok::LParen => depth += 1,
            Tok::RParen => {
                depth -= 1;
                if depth < 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    (depth != 0).then_some(tokens.len())
}

/// Parses a token stream. Paren-depth violations are reported before any
/// other syntax error.
pub fn parse(tokens: &[Spanned]) -> Result<Program, ParseError> {
    if let Some(index) = paren_violation(tokens) {
        return Err(ParseError {
            kind: ParseErrorKind::UnbalancedParen,
            index,
            message: "unbalanced parentheses".into(),
        });
    }
    let mut p = Parser { tokens, at: 0 };
    p.program()
}

struct Parser<'a> {
    tokens: &'a [Spanned],
    at: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.at).map(|t| &t.tok)
    }

    fn fail<T>(&self, expected: &str) -> Result<T, ParseError> {
        let found = match self.peek() {
            Some(t) => format!("`{t}`"),
            None => "end of input".to_string(),
        };
        Err(ParseError { kind: ParseErrorKind::Syntax, index: self.at, message: format!("expected {expected}, found {found}") })
    }

    fn eat(&mut self, tok: &Tok) -> bool {
        if self.peek() == Some(tok) {
            self.at += 1;
            true
        } else {
            false
        }
    }

    fn program(&mut self) -> Result<Program, ParseError> {
        let mut lets = Vec::new();
        while self.eat(&Tok::Let) {
            let name = match self.peek() {
                Some(Tok::Ident(n)) => n.clone(),
                _ => return self.fail("a variable name"),
            };
            self.at += 1;
            if !self.eat(&Tok::Assign) {
                return self.fail("`=`");
            }
            let value = self.expr()?;
            if !self.eat(&Tok::Semi) {
                return self.fail("`;`");
            }
            lets.push(Let { name, value });
        }
        if !self.eat(&Tok::Return) {
            return self.fail("`let` or `return`");
        }
        let ret = self.expr()?;
        self.eat(&Tok::Semi);
        if self.peek().is_some() {
            return self.fail("end of program");
        }
        Ok(Program { lets, ret })
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Some(Tok::Plus) => BinOp::Add,
                Some(Tok::Minus) => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.at += 1;
            let rhs = self.term()?;
            lhs = Expr::bin(op, lhs, rhs);
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.factor()?;
        while self.eat(&Tok::Star) {
            let rhs = self.factor()?;
            lhs = Expr::bin(BinOp::Mul, lhs, rhs);
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<Expr, ParseError> {
        match self.peek().cloned() {
            Some(Tok::Int(v)) => {
                self.at += 1;
                Ok(Expr::Int(v))
            }
            Some(Tok::Ident(n)) => {
                self.at += 1;
                Ok(Expr::Var(n))
            }
            Some(Tok::LParen) => {
                self.at += 1;
                let inner = self.expr()?;
                if !self.eat(&Tok::RParen) {
                    return self.fail("`)`");
                }
                Ok(Expr::group(inner))
            }
            _ => self.fail("an operand"),
        }
    }
}

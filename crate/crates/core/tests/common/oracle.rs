//! Reference implementations written without the library, used as oracles.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use prunelab::minilang::{SyntaxOutcome, TestCase};

#[derive(Clone, Debug, PartialEq)]
enum T {
    Num(i64),
    Word(String),
    Sym(char),
}

fn tokens(src: &str) -> Option<Vec<T>> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if matches!(c, ' ' | '\t' | '\n' | '\r') {
            i += 1;
        } else if "+-*()=;".contains(c) {
            out.push(T::Sym(c));
            i += 1;
        } else if c.is_ascii_digit() {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            let s: String = chars[start..i].iter().collect();
            out.push(T::Num(s.parse::<i64>().ok()?));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(T::Word(chars[start..i].iter().collect()));
        } else {
            return None;
        }
    }
    Some(out)
}

/// Depth-counter check: never below zero, zero at the end.
pub fn parens_balanced(toks: &[char]) -> bool {
    let mut depth = 0i64;
    for &c in toks {
        if c == '(' {
            depth += 1;
        } else if c == ')' {
            depth -= 1;
            if depth < 0 {
                return false;
            }
        }
    }
    depth == 0
}

enum Fail {
    Syntax,
    Undefined,
    Overflow,
}

struct P<'a> {
    t: &'a [T],
    i: usize,
    env: Option<HashMap<String, i64>>,
}

impl P<'_> {
    fn sym(&mut self, c: char) -> bool {
        if self.t.get(self.i) == Some(&T::Sym(c)) {
            self.i += 1;
            true
        } else {
            false
        }
    }
    fn word(&self) -> Option<&str> {
        match self.t.get(self.i) {
            Some(T::Word(w)) => Some(w),
            _ => None,
        }
    }
    // Evaluation errors are deferred so that a later syntax error still wins.
    fn expr(&mut self) -> Result<Result<i64, Fail>, Fail> {
        let mut acc = self.term()?;
        loop {
            let op = if self.sym('+') {
                '+'
            } else if self.sym('-') {
                '-'
            } else {
                return Ok(acc);
            };
            let rhs = self.term()?;
            acc = combine(acc, rhs, op);
        }
    }
    fn term(&mut self) -> Result<Result<i64, Fail>, Fail> {
        let mut acc = self.factor()?;
        while self.sym('*') {
            let rhs = self.factor()?;
            acc = combine(acc, rhs, '*');
        }
        Ok(acc)
    }
    fn factor(&mut self) -> Result<Result<i64, Fail>, Fail> {
        match self.t.get(self.i).cloned() {
            Some(T::Num(v)) => {
                self.i += 1;
                Ok(Ok(v))
            }
            Some(T::Word(w)) if w != "let" && w != "return" => {
                self.i += 1;
                Ok(match &self.env {
                    Some(env) => env.get(&w).copied().ok_or(Fail::Undefined),
                    None => Ok(0),
                })
            }
            Some(T::Sym('(')) => {
                self.i += 1;
                let v = self.expr()?;
                if !self.sym(')') {
                    return Err(Fail::Syntax);
                }
                Ok(v)
            }
            _ => Err(Fail::Syntax),
        }
    }
    fn program(&mut self) -> Result<Result<i64, Fail>, Fail> {
        let mut pending: Result<(), Fail> = Ok(());
        while self.word() == Some("let") {
            self.i += 1;
            let name = match self.word() {
                Some(w) if w != "let" && w != "return" => w.to_string(),
                _ => return Err(Fail::Syntax),
            };
            self.i += 1;
            if !self.sym('=') {
                return Err(Fail::Syntax);
            }
            let v = self.expr()?;
            if !self.sym(';') {
                return Err(Fail::Syntax);
            }
            match (v, &mut pending) {
                (Ok(v), Ok(())) => {
                    if let Some(env) = &mut self.env {
                        env.insert(name, v);
                    }
                }
                (Err(e), p @ Ok(())) => *p = Err(e),
                _ => {}
            }
        }
        if self.word() != Some("return") {
            return Err(Fail::Syntax);
        }
        self.i += 1;
        let v = self.expr()?;
        self.sym(';');
        if self.i != self.t.len() {
            return Err(Fail::Syntax);
        }
        Ok(match pending {
            Err(e) => Err(e),
            Ok(()) => v,
        })
    }
}

fn combine(a: Result<i64, Fail>, b: Result<i64, Fail>, op: char) -> Result<i64, Fail> {
    let (a, b) = (a?, b?);
    match op {
        '+' => a.checked_add(b),
        '-' => a.checked_sub(b),
        _ => a.checked_mul(b),
    }
    .ok_or(Fail::Overflow)
}

fn unfence(text: &str) -> Option<String> {
    let t = text.trim();
    if !t.starts_with("```") {
        return Some(text.to_string());
    }
    let rest = &t[3..];
    let nl = rest.find('\n')?;
    let body = rest[nl + 1..].trim_end();
    if !body.ends_with("```") {
        return None;
    }
    let body = &body[..body.len() - 3];
    if body.contains("```") {
        return None;
    }
    Some(body.to_string())
}

/// Independent classifier with the same outcome taxonomy.
pub fn classify_oracle(text: &str, tests: &[TestCase]) -> SyntaxOutcome {
    let Some(code) = unfence(text) else { return SyntaxOutcome::OtherSyntax };
    let Some(toks) = tokens(&code) else { return SyntaxOutcome::OtherSyntax };
    let syms: Vec<char> = toks.iter().filter_map(|t| if let T::Sym(c) = t { Some(*c) } else { None }).collect();
    if !parens_balanced(&syms) {
        return SyntaxOutcome::UnbalancedParen;
    }
    if (P { t: &toks, i: 0, env: None }).program().is_err() {
        return SyntaxOutcome::OtherSyntax;
    }
    let mut ok = true;
    for case in tests {
        let env: HashMap<String, i64> = case.bindings.iter().map(|(k, v)| (k.clone(), *v)).collect();
        match (P { t: &toks, i: 0, env: Some(env) }).program() {
            Ok(Ok(v)) => ok &= v == case.expected,
            Ok(Err(Fail::Undefined)) => return SyntaxOutcome::UndefinedVariable,
            Ok(Err(_)) => return SyntaxOutcome::OtherSyntax,
            Err(_) => unreachable!("syntax already checked"),
        }
    }
    if ok {
        SyntaxOutcome::Pass
    } else {
        SyntaxOutcome::AssertionFail
    }
}

/// Evaluates a program text under bindings, or `None` on any failure.
pub fn run_program(text: &str, bindings: &BTreeMap<String, i64>) -> Option<i64> {
    let toks = tokens(text)?;
    let env = bindings.iter().map(|(k, v)| (k.clone(), *v)).collect();
    (P { t: &toks, i: 0, env: Some(env) }).program().ok()?.ok()
}

/// Evaluates an arithmetic expression over single digits, `+ - *` and parens.
pub fn eval_arith(expr: &str) -> Option<i64> {
    run_program(&format!("return {expr}"), &BTreeMap::new())
}

/// Fraction of 4-grams in a response that repeat an earlier 4-gram of the
/// same response, counted by brute force.
pub fn rep4_oracle(response: &[usize]) -> f64 {
    let grams: Vec<&[usize]> = response.windows(4).collect();
    let mut repeats = 0;
    for i in 0..grams.len() {
        if (0..i).any(|j| grams[j] == grams[i]) {
            repeats += 1;
        }
    }
    repeats as f64 / grams.len() as f64
}

fn ngrams(s: &[usize], n: usize) -> Vec<&[usize]> {
    if s.len() < n {
        vec![]
    } else {
        s.windows(n).collect()
    }
}

/// Textbook sentence BLEU-4: uniform weights, a zero match count smoothed to
/// `1/(total+1)` (so an order with no n-grams contributes 1), brevity penalty
/// to the closest reference.
pub fn bleu4_oracle(hyp: &[usize], refs: &[&[usize]]) -> f64 {
    if hyp.is_empty() {
        return 0.0;
    }
    let mut log_p = 0.0;
    for n in 1..=4 {
        let hg = ngrams(hyp, n);
        let total = hg.len();
        let mut distinct: Vec<&[usize]> = hg.clone();
        distinct.sort();
        distinct.dedup();
        let mut clipped = 0usize;
        for g in distinct {
            let count = hg.iter().filter(|x| **x == g).count();
            let max_ref = refs.iter().map(|r| ngrams(r, n).iter().filter(|x| **x == g).count()).max().unwrap_or(0);
            clipped += count.min(max_ref);
        }
        let p = if clipped == 0 { 1.0 / (total as f64 + 1.0) } else { clipped as f64 / total as f64 };
        log_p += p.ln() / 4.0;
    }
    let c = hyp.len() as f64;
    let mut best = refs[0].len();
    for r in refs {
        let (d, bd) = ((r.len() as f64 - c).abs(), (best as f64 - c).abs());
        if d < bd || (d == bd && r.len() < best) {
            best = r.len();
        }
    }
    let r = best as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * log_p.exp()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

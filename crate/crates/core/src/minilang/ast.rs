use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
}

impl BinOp {
    pub fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Expr {
    Int(i64),
    Var(String),
    Group(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn bin(op: BinOp, l: Expr, r: Expr) -> Self {
        Expr::Bin(op, Box::new(l), Box::new(r))
    }

    pub fn group(e: Expr) -> Self {
        Expr::Group(Box::new(e))
    }

    pub fn var(name: &str) -> Self {
        Expr::Var(name.to_string())
    }

    /// Names referenced anywhere in the expression, in first-use order.
    pub fn free_vars(&self, out: &mut Vec<String>) {
        match self {
            Expr::Int(_) => {}
            Expr::Var(v) => {
                if !out.contains(v) {
                    out.push(v.clone());
                }
            }
            Expr::Group(e) => e.free_vars(out),
            Expr::Bin(_, l, r) => {
                l.free_vars(out);
                r.free_vars(out);
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Int(v) => write!(f, "{v}"),
            Expr::Var(v) => f.write_str(v),
            Expr::Group(e) => write!(f, "({e})"),
            Expr::Bin(op, l, r) => write!(f, "{l}{}{r}", op.symbol()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Let {
    pub name: String,
    pub value: Expr,
}

/// Zero or more `let` statements followed by a `return`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Program {
    pub lets: Vec<Let>,
    pub ret: Expr,
}

impl fmt::Display for Program {
    /// Canonical rendering, e.g. `let t = a+b; return t*c`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.lets {
            write!(f, "let {} = {}; ", l.name, l.value)?;
        }
        write!(f, "return {}", self.ret)
    }
}

impl Program {
    /// Variables the program reads before defining them.
    pub fn inputs(&self) -> Vec<String> {
        let mut defined: Vec<String> = Vec::new();
        let mut out = Vec::new();
        let mut note = |e: &Expr, defined: &Vec<String>| {
            let mut vs = Vec::new();
            e.free_vars(&mut vs);
            for v in vs {
                if !defined.contains(&v) && !out.contains(&v) {
                    out.push(v);
                }
            }
        };
        for l in &self.lets {
            note(&l.value, &defined);
            defined.push(l.name.clone());
        }
        note(&self.ret, &defined);
        out
    }
}

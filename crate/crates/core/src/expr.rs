//! Closed-form scalar and matrix expressions over chart coordinates.
//!
//! Grammar (whitespace insensitive):
//!
//! ```text
//! expr   := term (("+" | "-") term)*
//! term   := unary (("*" | "/") unary)*
//! unary  := "-" unary | power
//! power  := atom ("^" unary)?
//! atom   := number | "pi" | label | func "(" expr ")" | "(" expr ")"
//! func   := exp | sin | cos | sqrt | ln
//! ```
//!
//! Exponents must fold to constants. Expressions are differentiated
//! symbolically and compiled to a small stack program for evaluation.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Func {
    Exp,
    Sin,
    Cos,
    Sqrt,
    Ln,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        match name {
            "exp" => Some(Func::Exp),
            "sin" => Some(Func::Sin),
            "cos" => Some(Func::Cos),
            "sqrt" => Some(Func::Sqrt),
            "ln" => Some(Func::Ln),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Sqrt => "sqrt",
            Func::Ln => "ln",
        }
    }

    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Func::Exp => x.exp(),
            Func::Sin => x.sin(),
            Func::Cos => x.cos(),
            Func::Sqrt => x.sqrt(),
            Func::Ln => x.ln(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, f64),
    Call(Func, Box<Expr>),
}

impl Expr {
    pub fn constant(&self) -> Option<f64> {
        match self {
            Expr::Const(c) => Some(*c),
            _ => None,
        }
    }

    fn is_const(&self, v: f64) -> bool {
        matches!(self, Expr::Const(c) if *c == v)
    }

    pub fn neg(a: Expr) -> Expr {
        match a {
            Expr::Const(c) => Expr::Const(-c),
            Expr::Neg(inner) => *inner,
            other => Expr::Neg(Box::new(other)),
        }
    }

    pub fn add(a: Expr, b: Expr) -> Expr {
        match (&a, &b) {
            (Expr::Const(x), Expr::Const(y)) => Expr::Const(x + y),
            _ if a.is_const(0.0) => b,
            _ if b.is_const(0.0) => a,
            _ => Expr::Add(Box::new(a), Box::new(b)),
        }
    }

    pub fn sub(a: Expr, b: Expr) -> Expr {
        match (&a, &b) {
            (Expr::Const(x), Expr::Const(y)) => Expr::Const(x - y),
            _ if b.is_const(0.0) => a,
            _ if a.is_const(0.0) => Expr::neg(b),
            _ => Expr::Sub(Box::new(a), Box::new(b)),
        }
    }

    pub fn mul(a: Expr, b: Expr) -> Expr {
        match (&a, &b) {
            (Expr::Const(x), Expr::Const(y)) => Expr::Const(x * y),
            _ if a.is_const(0.0) || b.is_const(0.0) => Expr::Const(0.0),
            _ if a.is_const(1.0) => b,
            _ if b.is_const(1.0) => a,
            _ if a.is_const(-1.0) => Expr::neg(b),
            _ if b.is_const(-1.0) => Expr::neg(a),
            _ => Expr::Mul(Box::new(a), Box::new(b)),
        }
    }

    pub fn div(a: Expr, b: Expr) -> Expr {
        match (&a, &b) {
            (Expr::Const(x), Expr::Const(y)) => Expr::Const(x / y),
            _ if a.is_const(0.0) => Expr::Const(0.0),
            _ if b.is_const(1.0) => a,
            _ => Expr::Div(Box::new(a), Box::new(b)),
        }
    }

    pub fn pow(a: Expr, p: f64) -> Expr {
        if p == 0.0 {
            return Expr::Const(1.0);
        }
        if p == 1.0 {
            return a;
        }
        match a {
            Expr::Const(c) => Expr::Const(c.powf(p)),
            other => Expr::Pow(Box::new(other), p),
        }
    }

    pub fn call(f: Func, a: Expr) -> Expr {
        match a {
            Expr::Const(c) => Expr::Const(f.apply(c)),
            other => Expr::Call(f, Box::new(other)),
        }
    }

    /// Tree-walking evaluation; the compiled form is faster for hot loops.
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var(i) => x[*i],
            Expr::Neg(a) => -a.eval(x),
            Expr::Add(a, b) => a.eval(x) + b.eval(x),
            Expr::Sub(a, b) => a.eval(x) - b.eval(x),
            Expr::Mul(a, b) => a.eval(x) * b.eval(x),
            Expr::Div(a, b) => a.eval(x) / b.eval(x),
            Expr::Pow(a, p) => powf(a.eval(x), *p),
            Expr::Call(f, a) => f.apply(a.eval(x)),
        }
    }

    /// Symbolic partial derivative with respect to coordinate `var`.
    pub fn derivative(&self, var: usize) -> Expr {
        match self {
            Expr::Const(_) => Expr::Const(0.0),
            Expr::Var(i) => Expr::Const(if *i == var { 1.0 } else { 0.0 }),
            Expr::Neg(a) => Expr::neg(a.derivative(var)),
            Expr::Add(a, b) => Expr::add(a.derivative(var), b.derivative(var)),
            Expr::Sub(a, b) => Expr::sub(a.derivative(var), b.derivative(var)),
            Expr::Mul(a, b) => Expr::add(
                Expr::mul(a.derivative(var), (**b).clone()),
                Expr::mul((**a).clone(), b.derivative(var)),
            ),
            Expr::Div(a, b) => {
                // (a'b - ab') / b^2
                let num = Expr::sub(
                    Expr::mul(a.derivative(var), (**b).clone()),
                    Expr::mul((**a).clone(), b.derivative(var)),
                );
                Expr::div(num, Expr::pow((**b).clone(), 2.0))
            }
            Expr::Pow(a, p) => Expr::mul(
                Expr::mul(Expr::Const(*p), Expr::pow((**a).clone(), p - 1.0)),
                a.derivative(var),
            ),
            Expr::Call(f, a) => {
                let inner = (**a).clone();
                let outer = match f {
                    Func::Exp => Expr::call(Func::Exp, inner),
                    Func::Sin => Expr::call(Func::Cos, inner),
                    Func::Cos => Expr::neg(Expr::call(Func::Sin, inner)),
                    Func::Sqrt => Expr::div(Expr::Const(0.5), Expr::call(Func::Sqrt, inner)),
                    Func::Ln => Expr::div(Expr::Const(1.0), inner),
                };
                Expr::mul(outer, a.derivative(var))
            }
        }
    }

    fn fmt_with(&self, f: &mut fmt::Formatter<'_>, labels: Option<&[String]>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Var(i) => match labels {
                Some(l) => write!(f, "{}", l[*i]),
                None => write!(f, "x{i}"),
            },
            Expr::Neg(a) => {
                write!(f, "(-")?;
                a.fmt_with(f, labels)?;
                write!(f, ")")
            }
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                let op = match self {
                    Expr::Add(..) => "+",
                    Expr::Sub(..) => "-",
                    Expr::Mul(..) => "*",
                    _ => "/",
                };
                write!(f, "(")?;
                a.fmt_with(f, labels)?;
                write!(f, " {op} ")?;
                b.fmt_with(f, labels)?;
                write!(f, ")")
            }
            Expr::Pow(a, p) => {
                write!(f, "(")?;
                a.fmt_with(f, labels)?;
                write!(f, ")^{p}")
            }
            Expr::Call(func, a) => {
                write!(f, "{}(", func.name())?;
                a.fmt_with(f, labels)?;
                write!(f, ")")
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_with(f, None)
    }
}

#[inline]
fn powf(base: f64, p: f64) -> f64 {
    if p == 2.0 {
        base * base
    } else if p == 3.0 {
        base * base * base
    } else if p.fract() == 0.0 && p.abs() < 64.0 {
        base.powi(p as i32)
    } else {
        base.powf(p)
    }
}

// ---------------------------------------------------------------------------
// parsing

#[derive(Clone, Debug, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
}

fn tokenize(src: &str) -> Result<Vec<Token>> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            // exponent part: 1e-3, 2.5E+4
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            let v = text
                .parse::<f64>()
                .map_err(|_| Error::Expr(format!("bad number `{text}` in `{src}`")))?;
            out.push(Token::Num(v));
        } else if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Token::Ident(chars[start..i].iter().collect()));
        } else if "+-*/^".contains(c) {
            out.push(Token::Op(c));
            i += 1;
        } else if c == '(' {
            out.push(Token::LParen);
            i += 1;
        } else if c == ')' {
            out.push(Token::RParen);
            i += 1;
        } else {
            return Err(Error::Expr(format!("unexpected character `{c}` in `{src}`")));
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<Token>,
    pos: usize,
    labels: &'a [String],
    src: &'a str,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn err(&self, msg: &str) -> Error {
        Error::Expr(format!("{msg} in `{}`", self.src))
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        while let Some(Token::Op(op @ ('+' | '-'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = if op == '+' {
                Expr::add(lhs, rhs)
            } else {
                Expr::sub(lhs, rhs)
            };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        while let Some(Token::Op(op @ ('*' | '/'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = if op == '*' {
                Expr::mul(lhs, rhs)
            } else {
                Expr::div(lhs, rhs)
            };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr> {
        if let Some(Token::Op('-')) = self.peek() {
            self.pos += 1;
            return Ok(Expr::neg(self.unary()?));
        }
        if let Some(Token::Op('+')) = self.peek() {
            self.pos += 1;
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if let Some(Token::Op('^')) = self.peek() {
            self.pos += 1;
            let exponent = self.unary()?;
            let p = exponent
                .constant()
                .ok_or_else(|| self.err("exponent must be a constant"))?;
            return Ok(Expr::pow(base, p));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        match self.next() {
            Some(Token::Num(v)) => Ok(Expr::Const(v)),
            Some(Token::LParen) => {
                let e = self.expr()?;
                match self.next() {
                    Some(Token::RParen) => Ok(e),
                    _ => Err(self.err("missing `)`")),
                }
            }
            Some(Token::Ident(name)) => {
                if let Some(i) = self.labels.iter().position(|l| *l == name) {
                    return Ok(Expr::Var(i));
                }
                if name == "pi" {
                    return Ok(Expr::Const(std::f64::consts::PI));
                }
                if let Some(f) = Func::from_name(&name) {
                    match self.next() {
                        Some(Token::LParen) => {}
                        _ => return Err(self.err(&format!("`{name}` must be called"))),
                    }
                    let arg = self.expr()?;
                    match self.next() {
                        Some(Token::RParen) => {}
                        _ => return Err(self.err("missing `)`")),
                    }
                    return Ok(Expr::call(f, arg));
                }
                Err(self.err(&format!("unknown identifier `{name}`")))
            }
            Some(t) => Err(self.err(&format!("unexpected token {t:?}"))),
            None => Err(self.err("unexpected end of expression")),
        }
    }
}

/// Parse `src` with variables named by `labels` (index = coordinate).
pub fn parse(src: &str, labels: &[String]) -> Result<Expr> {
    let tokens = tokenize(src)?;
    if tokens.is_empty() {
        return Err(Error::Expr("empty expression".into()));
    }
    let mut p = Parser {
        tokens,
        pos: 0,
        labels,
        src,
    };
    let e = p.expr()?;
    if p.pos != p.tokens.len() {
        return Err(p.err("trailing input"));
    }
    Ok(e)
}

// ---------------------------------------------------------------------------
// compiled evaluation

#[derive(Clone, Copy, Debug)]
enum Op {
    Const(f64),
    Var(usize),
    Neg,
    Add,
    Sub,
    Mul,
    Div,
    Pow(f64),
    Call(Func),
}

const STACK: usize = 48;

/// An expression lowered to a postfix program.
#[derive(Clone, Debug)]
pub struct Compiled {
    ops: Vec<Op>,
    constant: Option<f64>,
    tree: Expr,
    depth: usize,
}

impl Compiled {
    pub fn new(e: &Expr) -> Compiled {
        let mut ops = Vec::new();
        let depth = lower(e, &mut ops);
        Compiled {
            ops,
            constant: e.constant(),
            tree: e.clone(),
            depth,
        }
    }

    pub fn expr(&self) -> &Expr {
        &self.tree
    }

    pub fn constant(&self) -> Option<f64> {
        self.constant
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        if let Some(c) = self.constant {
            return c;
        }
        if self.depth > STACK {
            return self.tree.eval(x);
        }
        let mut stack = [0.0f64; STACK];
        let mut sp = 0usize;
        for op in &self.ops {
            match *op {
                Op::Const(c) => {
                    stack[sp] = c;
                    sp += 1;
                }
                Op::Var(i) => {
                    stack[sp] = x[i];
                    sp += 1;
                }
                Op::Neg => stack[sp - 1] = -stack[sp - 1],
                Op::Pow(p) => stack[sp - 1] = powf(stack[sp - 1], p),
                Op::Call(f) => stack[sp - 1] = f.apply(stack[sp - 1]),
                Op::Add | Op::Sub | Op::Mul | Op::Div => {
                    let b = stack[sp - 1];
                    let a = stack[sp - 2];
                    sp -= 1;
                    stack[sp - 1] = match *op {
                        Op::Add => a + b,
                        Op::Sub => a - b,
                        Op::Mul => a * b,
                        _ => a / b,
                    };
                }
            }
        }
        stack[0]
    }
}

fn lower(e: &Expr, ops: &mut Vec<Op>) -> usize {
    match e {
        Expr::Const(c) => {
            ops.push(Op::Const(*c));
            1
        }
        Expr::Var(i) => {
            ops.push(Op::Var(*i));
            1
        }
        Expr::Neg(a) => {
            let d = lower(a, ops);
            ops.push(Op::Neg);
            d
        }
        Expr::Pow(a, p) => {
            let d = lower(a, ops);
            ops.push(Op::Pow(*p));
            d
        }
        Expr::Call(f, a) => {
            let d = lower(a, ops);
            ops.push(Op::Call(*f));
            d
        }
        Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
            let da = lower(a, ops);
            let db = lower(b, ops);
            ops.push(match e {
                Expr::Add(..) => Op::Add,
                Expr::Sub(..) => Op::Sub,
                Expr::Mul(..) => Op::Mul,
                _ => Op::Div,
            });
            da.max(db + 1)
        }
    }
}

/// A matrix of expressions. Source syntax: rows separated by `;`,
/// entries by `,` (e.g. `0, -z; z, 0`). A single entry is a 1x1 matrix.
#[derive(Clone, Debug)]
pub struct MatrixExpr {
    pub rows: usize,
    pub cols: usize,
    entries: Vec<Compiled>,
    source: String,
}

impl MatrixExpr {
    pub fn parse(src: &str, labels: &[String]) -> Result<MatrixExpr> {
        let mut rows = 0;
        let mut cols = None;
        let mut entries = Vec::new();
        for row in src.split(';') {
            let items: Vec<&str> = row.split(',').collect();
            match cols {
                None => cols = Some(items.len()),
                Some(c) if c != items.len() => {
                    return Err(Error::Expr(format!("ragged matrix `{src}`")));
                }
                _ => {}
            }
            for item in items {
                entries.push(Compiled::new(&parse(item, labels)?));
            }
            rows += 1;
        }
        Ok(MatrixExpr {
            rows,
            cols: cols.unwrap_or(0),
            entries,
            source: src.trim().to_string(),
        })
    }

    pub fn identity(n: usize) -> MatrixExpr {
        let mut entries = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                entries.push(Compiled::new(&Expr::Const(if i == j { 1.0 } else { 0.0 })));
            }
        }
        let source = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| if i == j { "1" } else { "0" })
                    .collect::<Vec<_>>()
                    .join(", ")
            })
            .collect::<Vec<_>>()
            .join("; ");
        MatrixExpr {
            rows: n,
            cols: n,
            entries,
            source,
        }
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn is_constant(&self) -> bool {
        self.entries.iter().all(|e| e.constant().is_some())
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|e| e.constant() == Some(0.0))
    }

    pub fn is_identity(&self) -> bool {
        self.rows == self.cols
            && self.entries.iter().enumerate().all(|(k, e)| {
                let want = if k / self.cols == k % self.cols { 1.0 } else { 0.0 };
                e.constant() == Some(want)
            })
    }

    pub fn eval(&self, x: &[f64]) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(self.rows, self.cols, |i, j| {
            self.entries[i * self.cols + j].eval(x)
        })
    }

    /// Evaluate into a row-major slice without allocating.
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, e) in out.iter_mut().zip(&self.entries) {
            *o = e.eval(x);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn parses_and_evaluates() {
        let l = labels(&["x", "y"]);
        let e = parse("-c", &l);
        assert!(e.is_err());
        let e = parse("1 + 2*x^2 - y/4 + sin(pi*x)", &l).unwrap();
        let v = e.eval(&[0.5, 2.0]);
        assert!((v - (1.0 + 0.5 - 0.5 + 1.0)).abs() < 1e-15);
        assert_eq!(Compiled::new(&e).eval(&[0.5, 2.0]), v);
    }

    #[test]
    fn unary_minus_binds_looser_than_power() {
        let l = labels(&["x"]);
        let e = parse("-x^2", &l).unwrap();
        assert_eq!(e.eval(&[3.0]), -9.0);
        let e = parse("2^-1", &l).unwrap();
        assert_eq!(e.eval(&[0.0]), 0.5);
        let e = parse("1e-3*x + 2.5E1", &l).unwrap();
        assert!((e.eval(&[1000.0]) - 26.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        let l = labels(&["x"]);
        for bad in ["", "x +", "(x", "foo(x)", "x^x", "sin x", "x $ 2"] {
            assert!(parse(bad, &l).is_err(), "{bad}");
        }
    }

    #[test]
    fn derivative_matches_central_differences() {
        let l = labels(&["x", "y"]);
        let srcs = [
            "x*y + exp(-x^2)*cos(3*y)",
            "(1 - x^2 - y^2)/(1 + x^2 + y^2)",
            "sqrt(1 + x^2) * ln(2 + y^2)",
            "x^3 - 2*x*y^2 + sin(2*pi*x)",
        ];
        let p = [0.3, -0.7];
        for src in srcs {
            let e = parse(src, &l).unwrap();
            for var in 0..2 {
                let d = Compiled::new(&e.derivative(var));
                let h = 1e-5;
                let mut a = p;
                let mut b = p;
                a[var] += h;
                b[var] -= h;
                let fd = (e.eval(&a) - e.eval(&b)) / (2.0 * h);
                assert!((d.eval(&p) - fd).abs() < 1e-8, "{src} d/d{var}");
            }
        }
    }

    #[test]
    fn matrix_expressions() {
        let l = labels(&["z"]);
        let m = MatrixExpr::parse("0.1, -0.4*z; 0.4*z, 0.1", &l).unwrap();
        assert_eq!((m.rows, m.cols), (2, 2));
        let v = m.eval(&[2.0]);
        assert_eq!(v[(0, 1)], -0.8);
        assert!(MatrixExpr::parse("1, 2; 3", &l).is_err());
        assert!(MatrixExpr::identity(3).is_identity());
        assert!(MatrixExpr::parse("0", &l).unwrap().is_zero());
    }
}

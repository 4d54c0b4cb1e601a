//! Expression AST, parser, and evaluator for system dynamics definitions.
//!
//! The operator set is closed: exactly the unary functions and binary
//! operators below parse, anything else is a syntax error. This keeps the
//! downstream polynomialization stage total — every non-polynomial subtree
//! is something the Chebyshev fitter knows how to sample.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use crate::poly::Poly;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Abs,
    Sqrt,
    Exp,
    Sin,
    Cos,
    Arccos,
    Log,
}

impl UnaryOp {
    fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "-",
            UnaryOp::Abs => "abs",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Exp => "exp",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Arccos => "arccos",
            UnaryOp::Log => "log",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    /// Zero-based state index.
    Var(usize),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
    /// Nonnegative integer power.
    Pow(Box<Expr>, u32),
}

#[derive(Debug, Error)]
pub enum ExprError {
    #[error("line {line}, column {col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("evaluation domain violation in `{subtree}`: {msg}")]
    Eval { subtree: String, msg: String },
    #[error("system definition: {0}")]
    System(String),
}

impl Expr {
    pub fn constant(c: f64) -> Expr {
        Expr::Const(c)
    }

    pub fn var(i: usize) -> Expr {
        Expr::Var(i)
    }

    pub fn free_vars(&self) -> BTreeSet<usize> {
        let mut s = BTreeSet::new();
        self.collect_vars(&mut s);
        s
    }

    fn collect_vars(&self, s: &mut BTreeSet<usize>) {
        match self {
            Expr::Const(_) => {}
            Expr::Var(i) => {
                s.insert(*i);
            }
            Expr::Unary(_, a) => a.collect_vars(s),
            Expr::Binary(_, a, b) => {
                a.collect_vars(s);
                b.collect_vars(s);
            }
            Expr::Pow(a, _) => a.collect_vars(s),
        }
    }

    pub fn max_var(&self) -> Option<usize> {
        self.free_vars().into_iter().max()
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64, ExprError> {
        let fail = |e: &Expr, msg: &str| {
            Err(ExprError::Eval { subtree: e.to_string(), msg: msg.to_string() })
        };
        match self {
            Expr::Const(c) => Ok(*c),
            Expr::Var(i) => {
                if *i >= x.len() {
                    return fail(self, "variable index out of range");
                }
                Ok(x[*i])
            }
            Expr::Unary(op, a) => {
                let v = a.eval(x)?;
                match op {
                    UnaryOp::Neg => Ok(-v),
                    UnaryOp::Abs => Ok(v.abs()),
                    UnaryOp::Sqrt => {
                        if v < 0.0 {
                            fail(self, "sqrt of negative value")
                        } else {
                            Ok(v.sqrt())
                        }
                    }
                    UnaryOp::Exp => Ok(v.exp()),
                    UnaryOp::Sin => Ok(v.sin()),
                    UnaryOp::Cos => Ok(v.cos()),
                    UnaryOp::Arccos => {
                        if !(-1.0..=1.0).contains(&v) {
                            fail(self, "arccos argument outside [-1, 1]")
                        } else {
                            Ok(v.acos())
                        }
                    }
                    UnaryOp::Log => {
                        if v <= 0.0 {
                            fail(self, "log of non-positive value")
                        } else {
                            Ok(v.ln())
                        }
                    }
                }
            }
            Expr::Binary(op, a, b) => {
                let (va, vb) = (a.eval(x)?, b.eval(x)?);
                match op {
                    BinaryOp::Add => Ok(va + vb),
                    BinaryOp::Sub => Ok(va - vb),
                    BinaryOp::Mul => Ok(va * vb),
                    BinaryOp::Div => {
                        if vb == 0.0 {
                            fail(self, "division by zero")
                        } else {
                            Ok(va / vb)
                        }
                    }
                }
            }
            Expr::Pow(a, k) => Ok(a.eval(x)?.powi(*k as i32)),
        }
    }

    /// Expanded polynomial when the tree uses only +, −, ×, integer powers,
    /// constants, and division by a nonzero constant; `None` otherwise.
    pub fn try_to_polynomial(&self, state_dim: usize) -> Option<Poly> {
        match self {
            Expr::Const(c) => Some(Poly::constant(state_dim, *c)),
            Expr::Var(i) => {
                if *i < state_dim {
                    Some(Poly::var(state_dim, *i))
                } else {
                    None
                }
            }
            Expr::Unary(UnaryOp::Neg, a) => Some(-a.try_to_polynomial(state_dim)?),
            Expr::Unary(_, _) => None,
            Expr::Binary(op, a, b) => {
                let pb = b.try_to_polynomial(state_dim)?;
                match op {
                    BinaryOp::Div => {
                        // only division by a nonzero constant stays polynomial
                        if pb.degree() == 0 && !pb.is_zero() {
                            let c = pb.coeff(&vec![0; state_dim]);
                            Some(a.try_to_polynomial(state_dim)?.scale(1.0 / c))
                        } else {
                            None
                        }
                    }
                    BinaryOp::Add => Some(a.try_to_polynomial(state_dim)? + pb),
                    BinaryOp::Sub => Some(a.try_to_polynomial(state_dim)? - pb),
                    BinaryOp::Mul => Some(a.try_to_polynomial(state_dim)? * pb),
                }
            }
            Expr::Pow(a, k) => Some(a.try_to_polynomial(state_dim)?.pow(*k)),
        }
    }

    pub fn is_zero_const(&self) -> bool {
        matches!(self, Expr::Const(c) if *c == 0.0)
    }

    /// Substitute `x_i -> x_i + shift_i` (used for equilibrium translation).
    pub fn shift_vars(&self, shift: &[f64]) -> Expr {
        match self {
            Expr::Const(c) => Expr::Const(*c),
            Expr::Var(i) => {
                if shift[*i] == 0.0 {
                    Expr::Var(*i)
                } else {
                    Expr::Binary(
                        BinaryOp::Add,
                        Box::new(Expr::Var(*i)),
                        Box::new(Expr::Const(shift[*i])),
                    )
                }
            }
            Expr::Unary(op, a) => Expr::Unary(*op, Box::new(a.shift_vars(shift))),
            Expr::Binary(op, a, b) => Expr::Binary(
                *op,
                Box::new(a.shift_vars(shift)),
                Box::new(b.shift_vars(shift)),
            ),
            Expr::Pow(a, k) => Expr::Pow(Box::new(a.shift_vars(shift)), *k),
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Binary(BinaryOp::Add | BinaryOp::Sub, _, _) => 1,
            Expr::Binary(BinaryOp::Mul | BinaryOp::Div, _, _) => 2,
            Expr::Unary(UnaryOp::Neg, _) => 3,
            // a negative literal prints with a leading `-`, so it re-lexes
            // like a unary minus and must parenthesize in the same places
            Expr::Const(c) if *c < 0.0 => 3,
            Expr::Pow(_, _) => 4,
            _ => 5,
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn child(f: &mut fmt::Formatter<'_>, e: &Expr, min_prec: u8) -> fmt::Result {
            if e.precedence() < min_prec {
                write!(f, "({e})")
            } else {
                write!(f, "{e}")
            }
        }
        match self {
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Var(i) => write!(f, "x{}", i + 1),
            Expr::Unary(UnaryOp::Neg, a) => {
                write!(f, "-")?;
                child(f, a, 3)
            }
            Expr::Unary(op, a) => write!(f, "{}({a})", op.name()),
            Expr::Binary(op, a, b) => {
                let (prec, sym) = match op {
                    BinaryOp::Add => (1, " + "),
                    BinaryOp::Sub => (1, " - "),
                    BinaryOp::Mul => (2, "*"),
                    BinaryOp::Div => (2, "/"),
                };
                child(f, a, prec)?;
                write!(f, "{sym}")?;
                // right operand of - and / needs strictly higher precedence
                let rp = match op {
                    BinaryOp::Sub | BinaryOp::Div => prec + 1,
                    _ => prec,
                };
                child(f, b, rp)
            }
            Expr::Pow(a, k) => {
                child(f, a, 5)?;
                write!(f, "^{k}")
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Tokenizer / parser
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
    line: usize,
    col_base: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str, line: usize) -> Self {
        Lexer { src: src.as_bytes(), pos: 0, line, col_base: 1 }
    }

    fn error(&self, col: usize, msg: impl Into<String>) -> ExprError {
        ExprError::Syntax { line: self.line, col, msg: msg.into() }
    }

    fn tokens(mut self) -> Result<Vec<(Tok, usize)>, ExprError> {
        let mut out = Vec::new();
        while self.pos < self.src.len() {
            let c = self.src[self.pos] as char;
            let col = self.col_base + self.pos;
            match c {
                ' ' | '\t' => {
                    self.pos += 1;
                }
                '+' => {
                    out.push((Tok::Plus, col));
                    self.pos += 1;
                }
                '-' => {
                    out.push((Tok::Minus, col));
                    self.pos += 1;
                }
                '*' => {
                    out.push((Tok::Star, col));
                    self.pos += 1;
                }
                '/' => {
                    out.push((Tok::Slash, col));
                    self.pos += 1;
                }
                '^' => {
                    out.push((Tok::Caret, col));
                    self.pos += 1;
                }
                '(' => {
                    out.push((Tok::LParen, col));
                    self.pos += 1;
                }
                ')' => {
                    out.push((Tok::RParen, col));
                    self.pos += 1;
                }
                '0'..='9' | '.' => {
                    let start = self.pos;
                    while self.pos < self.src.len() {
                        let d = self.src[self.pos] as char;
                        if d.is_ascii_digit() || d == '.' {
                            self.pos += 1;
                        } else if (d == 'e' || d == 'E')
                            && self.pos + 1 < self.src.len()
                            && {
                                let n = self.src[self.pos + 1] as char;
                                n.is_ascii_digit() || n == '+' || n == '-'
                            }
                        {
                            self.pos += 2;
                        } else {
                            break;
                        }
                    }
                    let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
                    let v: f64 = text
                        .parse()
                        .map_err(|_| self.error(col, format!("bad number literal `{text}`")))?;
                    out.push((Tok::Num(v), col));
                }
                'a'..='z' | 'A'..='Z' | '_' => {
                    let start = self.pos;
                    while self.pos < self.src.len() {
                        let d = self.src[self.pos] as char;
                        if d.is_ascii_alphanumeric() || d == '_' {
                            self.pos += 1;
                        } else {
                            break;
                        }
                    }
                    let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
                    out.push((Tok::Ident(text.to_string()), col));
                }
                _ => return Err(self.error(col, format!("unexpected character `{c}`"))),
            }
        }
        Ok(out)
    }
}

struct Parser<'a> {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    line: usize,
    vars: &'a [String],
    end_col: usize,
}

impl<'a> Parser<'a> {
    fn error(&self, msg: impl Into<String>) -> ExprError {
        let col = self.toks.get(self.pos).map(|t| t.1).unwrap_or(self.end_col);
        ExprError::Syntax { line: self.line, col, msg: msg.into() }
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.0)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|t| t.0.clone());
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, t: Tok, what: &str) -> Result<(), ExprError> {
        if self.peek() == Some(&t) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(format!("expected {what}")))
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    lhs = Expr::Binary(BinaryOp::Add, Box::new(lhs), Box::new(rhs));
                }
                Some(Tok::Minus) => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    lhs = Expr::Binary(BinaryOp::Sub, Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.factor()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.pos += 1;
                    let rhs = self.factor()?;
                    lhs = Expr::Binary(BinaryOp::Mul, Box::new(lhs), Box::new(rhs));
                }
                Some(Tok::Slash) => {
                    self.pos += 1;
                    let rhs = self.factor()?;
                    lhs = Expr::Binary(BinaryOp::Div, Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn factor(&mut self) -> Result<Expr, ExprError> {
        if self.peek() == Some(&Tok::Minus) {
            self.pos += 1;
            let inner = self.factor()?;
            return Ok(Expr::Unary(UnaryOp::Neg, Box::new(inner)));
        }
        let base = self.primary()?;
        if self.peek() == Some(&Tok::Caret) {
            self.pos += 1;
            match self.bump() {
                Some(Tok::Num(v)) => {
                    if v.fract() != 0.0 || v < 0.0 {
                        return Err(self.error("exponent must be a nonnegative integer"));
                    }
                    Ok(Expr::Pow(Box::new(base), v as u32))
                }
                _ => Err(self.error("expected integer exponent after `^`")),
            }
        } else {
            Ok(base)
        }
    }

    fn primary(&mut self) -> Result<Expr, ExprError> {
        match self.bump() {
            Some(Tok::Num(v)) => Ok(Expr::Const(v)),
            Some(Tok::LParen) => {
                let e = self.expr()?;
                self.expect(Tok::RParen, "closing `)`")?;
                Ok(e)
            }
            Some(Tok::Ident(name)) => {
                let func = match name.as_str() {
                    "abs" => Some(UnaryOp::Abs),
                    "sqrt" => Some(UnaryOp::Sqrt),
                    "exp" => Some(UnaryOp::Exp),
                    "sin" => Some(UnaryOp::Sin),
                    "cos" => Some(UnaryOp::Cos),
                    "arccos" => Some(UnaryOp::Arccos),
                    "log" => Some(UnaryOp::Log),
                    _ => None,
                };
                if let Some(op) = func {
                    self.expect(Tok::LParen, &format!("`(` after {}", name))?;
                    let arg = self.expr()?;
                    self.expect(Tok::RParen, "closing `)`")?;
                    return Ok(Expr::Unary(op, Box::new(arg)));
                }
                if let Some(idx) = self.vars.iter().position(|v| *v == name) {
                    return Ok(Expr::Var(idx));
                }
                self.pos -= 1;
                Err(self.error(format!("unknown identifier `{name}`")))
            }
            _ => Err(self.error("expected expression")),
        }
    }
}

/// Parse one expression with the given state-variable names.
pub fn parse_expr_named(src: &str, vars: &[String], line: usize) -> Result<Expr, ExprError> {
    let toks = Lexer::new(src, line).tokens()?;
    let end_col = src.len() + 1;
    let mut p = Parser { toks, pos: 0, line, vars, end_col };
    let e = p.expr()?;
    if p.pos != p.toks.len() {
        return Err(p.error("trailing input after expression"));
    }
    Ok(e)
}

/// Parse with default variable names x1..xn.
pub fn parse_expr(src: &str, state_dim: usize) -> Result<Expr, ExprError> {
    let vars: Vec<String> = (1..=state_dim).map(|i| format!("x{i}")).collect();
    parse_expr_named(src, &vars, 1)
}

// ---------------------------------------------------------------------------
// System definition files
// ---------------------------------------------------------------------------

/// Parsed dynamics `ẋ = f(x) + g(x) + d_true(x)` on an axis-aligned box.
///
/// After parsing, the equilibrium has been shifted to the origin and the
/// definition validated: the assembled field vanishes at 0 within 1e-9 and
/// the origin lies strictly inside the domain box.
#[derive(Debug, Clone)]
pub struct SystemDefinition {
    pub state_dim: usize,
    pub state_names: Vec<String>,
    /// Known polynomial part.
    pub f: Vec<Poly>,
    /// Known non-polynomial part.
    pub g: Vec<Expr>,
    /// Hidden ground truth; simulation-only, never visible to the estimator.
    pub d_true: Vec<Expr>,
    pub domain: Vec<(f64, f64)>,
    pub noise_sigma_n: f64,
    pub rkhs_bound_cg: f64,
}

pub const ORIGIN_RESIDUAL_TOL: f64 = 1e-9;

impl SystemDefinition {
    pub fn eval_g(&self, x: &[f64]) -> Result<Vec<f64>, ExprError> {
        self.g.iter().map(|e| e.eval(x)).collect()
    }

    /// Full ground-truth field f + g + d_true (simulation-only).
    pub fn eval_true_field(&self, x: &[f64]) -> Result<Vec<f64>, ExprError> {
        (0..self.state_dim)
            .map(|i| {
                Ok(self.f[i].eval(x) + self.g[i].eval(x)? + self.d_true[i].eval(x)?)
            })
            .collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(&self.domain)
            .all(|(&xi, &(a, b))| xi >= a && xi <= b)
    }
}

pub fn parse_system(text: &str) -> Result<SystemDefinition, ExprError> {
    let mut states: Option<Vec<String>> = None;
    let mut domain_src: Option<(String, usize)> = None;
    let mut f_src: Option<(String, usize)> = None;
    let mut g_src: Option<(String, usize)> = None;
    let mut d_src: Option<(String, usize)> = None;
    let mut equilibrium: Option<Vec<f64>> = None;
    let mut noise_sigma_n = 0.0;
    let mut rkhs_bound_cg = 1.0;

    for (li, raw) in text.lines().enumerate() {
        let line_no = li + 1;
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once(':').ok_or_else(|| ExprError::Syntax {
            line: line_no,
            col: 1,
            msg: "expected `key: value`".to_string(),
        })?;
        let value = value.trim().to_string();
        match key.trim() {
            "states" => {
                let names: Vec<String> =
                    value.split_whitespace().map(|s| s.to_string()).collect();
                if names.is_empty() {
                    return Err(ExprError::System("empty states declaration".into()));
                }
                states = Some(names);
            }
            "domain" => domain_src = Some((value, line_no)),
            "f" => f_src = Some((value, line_no)),
            "g" => g_src = Some((value, line_no)),
            "d_true" => d_src = Some((value, line_no)),
            "equilibrium" => {
                let vals: Result<Vec<f64>, _> = value
                    .split([';', ','])
                    .map(|s| s.trim().parse::<f64>())
                    .collect();
                equilibrium = Some(vals.map_err(|_| {
                    ExprError::System(format!("bad equilibrium vector `{value}`"))
                })?);
            }
            "noise_sigma_n" => {
                noise_sigma_n = value
                    .parse()
                    .map_err(|_| ExprError::System(format!("bad noise_sigma_n `{value}`")))?;
                if noise_sigma_n < 0.0 {
                    return Err(ExprError::System("noise_sigma_n must be >= 0".into()));
                }
            }
            "rkhs_bound_cg" => {
                rkhs_bound_cg = value
                    .parse()
                    .map_err(|_| ExprError::System(format!("bad rkhs_bound_cg `{value}`")))?;
                if rkhs_bound_cg <= 0.0 {
                    return Err(ExprError::System("rkhs_bound_cg must be > 0".into()));
                }
            }
            other => {
                return Err(ExprError::Syntax {
                    line: line_no,
                    col: 1,
                    msg: format!("unknown field `{other}`"),
                })
            }
        }
    }

    let names = states.ok_or_else(|| ExprError::System("missing `states:` line".into()))?;
    let n = names.len();

    // domain: "x1 in [-2, 2]; x2 in [-2, 2]"
    let (dsrc, dline) =
        domain_src.ok_or_else(|| ExprError::System("missing `domain:` line".into()))?;
    let mut domain = vec![None::<(f64, f64)>; n];
    for part in dsrc.split(';') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let err = || ExprError::Syntax {
            line: dline,
            col: 1,
            msg: format!("bad domain entry `{part}` (expected `name in [a, b]`)"),
        };
        let (name, rest) = part.split_once(" in ").ok_or_else(err)?;
        let idx = names
            .iter()
            .position(|v| v == name.trim())
            .ok_or_else(|| ExprError::System(format!("domain names unknown state `{name}`")))?;
        let rest = rest.trim();
        let inner = rest
            .strip_prefix('[')
            .and_then(|s| s.strip_suffix(']'))
            .ok_or_else(err)?;
        let (a, b) = inner.split_once(',').ok_or_else(err)?;
        let a: f64 = a.trim().parse().map_err(|_| err())?;
        let b: f64 = b.trim().parse().map_err(|_| err())?;
        if a >= b {
            return Err(ExprError::System(format!(
                "degenerate domain interval [{a}, {b}] for {name}"
            )));
        }
        domain[idx] = Some((a, b));
    }
    let mut domain: Vec<(f64, f64)> = domain
        .into_iter()
        .enumerate()
        .map(|(i, d)| {
            d.ok_or_else(|| ExprError::System(format!("no domain interval for {}", names[i])))
        })
        .collect::<Result<_, _>>()?;

    let parse_vec = |src: &Option<(String, usize)>, what: &str| -> Result<Vec<Expr>, ExprError> {
        match src {
            None => Ok(vec![Expr::Const(0.0); n]),
            Some((s, line_no)) => {
                let parts: Vec<&str> = s.split(';').collect();
                if parts.len() != n {
                    return Err(ExprError::System(format!(
                        "`{what}` has {} components, expected {n}",
                        parts.len()
                    )));
                }
                parts
                    .iter()
                    .map(|p| parse_expr_named(p.trim(), &names, *line_no))
                    .collect()
            }
        }
    };

    if f_src.is_none() {
        return Err(ExprError::System("missing `f:` line".into()));
    }
    let f_exprs = parse_vec(&f_src, "f")?;
    let mut g = parse_vec(&g_src, "g")?;
    let mut d_true = parse_vec(&d_src, "d_true")?;

    // equilibrium shift: substitute x_i -> x_i + e_i everywhere, move the box
    let mut f_exprs = f_exprs;
    if let Some(e) = equilibrium {
        if e.len() != n {
            return Err(ExprError::System(format!(
                "equilibrium has {} entries, expected {n}",
                e.len()
            )));
        }
        if e.iter().any(|&v| v != 0.0) {
            f_exprs = f_exprs.iter().map(|ex| ex.shift_vars(&e)).collect();
            g = g.iter().map(|ex| ex.shift_vars(&e)).collect();
            d_true = d_true.iter().map(|ex| ex.shift_vars(&e)).collect();
            for (i, d) in domain.iter_mut().enumerate() {
                *d = (d.0 - e[i], d.1 - e[i]);
            }
        }
    }

    let f: Vec<Poly> = f_exprs
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            ex.try_to_polynomial(n).ok_or_else(|| {
                ExprError::System(format!("f component {} is not polynomial: `{ex}`", i + 1))
            })
        })
        .collect::<Result<_, _>>()?;

    for (i, &(a, b)) in domain.iter().enumerate() {
        if !(a < 0.0 && 0.0 < b) {
            return Err(ExprError::System(format!(
                "domain for {} is [{a}, {b}]: origin must lie strictly inside",
                names[i]
            )));
        }
    }

    let sys = SystemDefinition {
        state_dim: n,
        state_names: names,
        f,
        g,
        d_true,
        domain,
        noise_sigma_n,
        rkhs_bound_cg,
    };

    let origin = vec![0.0; n];
    let field = sys.eval_true_field(&origin)?;
    for (i, v) in field.iter().enumerate() {
        if v.abs() > ORIGIN_RESIDUAL_TOL {
            return Err(ExprError::System(format!(
                "equilibrium residual {v:.3e} in component {} exceeds {ORIGIN_RESIDUAL_TOL:.0e}",
                i + 1
            )));
        }
    }
    Ok(sys)
}

//! Scalar expressions over the state `x1..xn`, the input `u1..um` and time `t`.
//!
//! The grammar is deliberately small: numeric literals, the fixed variable
//! names, `+ - * /`, integer powers `^`, unary minus and the functions
//! `sin`, `cos`, `exp`, `tanh`. Derivatives stay closed-form under these
//! operations, so every Jacobian the toolkit needs is computed symbolically.

mod diff;
mod parse;

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

pub use diff::jacobian;
pub use parse::{parse, ParseError, ParseErrorKind};

/// A free variable. Indices are zero-based internally and printed one-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Var {
    X(usize),
    U(usize),
    T,
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::X(i) => write!(f, "x{}", i + 1),
            Var::U(i) => write!(f, "u{}", i + 1),
            Var::T => f.write_str("t"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Tanh,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Tanh => "tanh",
        }
    }

    pub fn from_name(name: &str) -> Option<Func> {
        match name {
            "sin" => Some(Func::Sin),
            "cos" => Some(Func::Cos),
            "exp" => Some(Func::Exp),
            "tanh" => Some(Func::Tanh),
            _ => None,
        }
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Func::Sin => v.sin(),
            Func::Cos => v.cos(),
            Func::Exp => v.exp(),
            Func::Tanh => v.tanh(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Var),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, i32),
    Call(Func, Box<Expr>),
}

/// Values for the free variables of an expression.
#[derive(Debug, Clone, Copy)]
pub struct Bindings<'a> {
    pub x: &'a [f64],
    pub u: &'a [f64],
    pub t: f64,
}

impl<'a> Bindings<'a> {
    pub fn new(x: &'a [f64], u: &'a [f64], t: f64) -> Self {
        Bindings { x, u, t }
    }

    /// Bindings for expressions that may only reference the state and time.
    pub fn state(x: &'a [f64], t: f64) -> Self {
        Bindings { x, u: &[], t }
    }

    fn get(&self, var: Var) -> Option<f64> {
        match var {
            Var::X(i) => self.x.get(i).copied(),
            Var::U(i) => self.u.get(i).copied(),
            Var::T => Some(self.t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("variable {0} is not bound")]
    Unbound(Var),
    #[error("evaluation produced a non-finite value ({0})")]
    NonFinite(f64),
}

impl Expr {
    pub fn constant(c: f64) -> Expr {
        Expr::Const(c)
    }

    pub fn var(v: Var) -> Expr {
        Expr::Var(v)
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Const(c) if *c == 0.0)
    }

    fn is_one(&self) -> bool {
        matches!(self, Expr::Const(c) if *c == 1.0)
    }

    fn as_const(&self) -> Option<f64> {
        match self {
            Expr::Const(c) => Some(*c),
            _ => None,
        }
    }

    // Folding constructors. Only trivial identities are applied.

    pub fn add(a: Expr, b: Expr) -> Expr {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => Expr::Const(x + y),
            _ if a.is_zero() => b,
            _ if b.is_zero() => a,
            _ => Expr::Add(Box::new(a), Box::new(b)),
        }
    }

    pub fn sub(a: Expr, b: Expr) -> Expr {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => Expr::Const(x - y),
            _ if b.is_zero() => a,
            _ if a.is_zero() => Expr::neg(b),
            _ => Expr::Sub(Box::new(a), Box::new(b)),
        }
    }

    pub fn mul(a: Expr, b: Expr) -> Expr {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => Expr::Const(x * y),
            _ if a.is_zero() || b.is_zero() => Expr::Const(0.0),
            _ if a.is_one() => b,
            _ if b.is_one() => a,
            _ => Expr::Mul(Box::new(a), Box::new(b)),
        }
    }

    pub fn div(a: Expr, b: Expr) -> Expr {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) if y != 0.0 => Expr::Const(x / y),
            _ if b.is_one() => a,
            _ if a.is_zero() && !b.is_zero() => Expr::Const(0.0),
            _ => Expr::Div(Box::new(a), Box::new(b)),
        }
    }

    pub fn neg(a: Expr) -> Expr {
        match a {
            Expr::Const(c) => Expr::Const(-c),
            Expr::Neg(inner) => *inner,
            other => Expr::Neg(Box::new(other)),
        }
    }

    pub fn pow(base: Expr, exp: i32) -> Expr {
        match (exp, base.as_const()) {
            (0, _) => Expr::Const(1.0),
            (1, _) => base,
            (_, Some(c)) => Expr::Const(c.powi(exp)),
            _ => Expr::Pow(Box::new(base), exp),
        }
    }

    pub fn call(func: Func, arg: Expr) -> Expr {
        match arg.as_const() {
            Some(c) => Expr::Const(func.apply(c)),
            None => Expr::Call(func, Box::new(arg)),
        }
    }

    /// Evaluates the expression; a non-finite result is an error.
    pub fn eval(&self, bindings: &Bindings<'_>) -> Result<f64, EvalError> {
        let v = self.eval_raw(bindings)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EvalError::NonFinite(v))
        }
    }

    fn eval_raw(&self, b: &Bindings<'_>) -> Result<f64, EvalError> {
        Ok(match self {
            Expr::Const(c) => *c,
            Expr::Var(v) => b.get(*v).ok_or(EvalError::Unbound(*v))?,
            Expr::Neg(a) => -a.eval_raw(b)?,
            Expr::Add(l, r) => l.eval_raw(b)? + r.eval_raw(b)?,
            Expr::Sub(l, r) => l.eval_raw(b)? - r.eval_raw(b)?,
            Expr::Mul(l, r) => l.eval_raw(b)? * r.eval_raw(b)?,
            Expr::Div(l, r) => l.eval_raw(b)? / r.eval_raw(b)?,
            Expr::Pow(base, n) => base.eval_raw(b)?.powi(*n),
            Expr::Call(func, a) => func.apply(a.eval_raw(b)?),
        })
    }

    pub fn differentiate(&self, var: Var) -> Expr {
        diff::differentiate(self, var)
    }

    pub fn vars(&self) -> BTreeSet<Var> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<Var>) {
        match self {
            Expr::Const(_) => {}
            Expr::Var(v) => {
                out.insert(*v);
            }
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Call(_, a) => a.collect_vars(out),
            Expr::Add(l, r) | Expr::Sub(l, r) | Expr::Mul(l, r) | Expr::Div(l, r) => {
                l.collect_vars(out);
                r.collect_vars(out);
            }
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Neg(_) => 3,
            Expr::Const(c) if c.is_sign_negative() || !c.is_finite() => 3,
            Expr::Pow(..) => 4,
            Expr::Const(_) | Expr::Var(_) | Expr::Call(..) => 5,
        }
    }
}

impl std::str::FromStr for Expr {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse(s)
    }
}

fn write_operand(f: &mut fmt::Formatter<'_>, e: &Expr, parens: bool) -> fmt::Result {
    if parens {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

// Printing inserts exactly the parentheses needed for `parse` to rebuild the
// same tree, so print/parse is an identity on the AST.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) if c.is_nan() => f.write_str("(0/0)"),
            Expr::Const(c) if c.is_infinite() => {
                if *c > 0.0 {
                    f.write_str("(1/0)")
                } else {
                    f.write_str("(-1/0)")
                }
            }
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Neg(a) => {
                f.write_str("-")?;
                write_operand(f, a, a.precedence() < 3)
            }
            Expr::Add(l, r) | Expr::Sub(l, r) => {
                let op = if matches!(self, Expr::Add(..)) { "+" } else { "-" };
                write_operand(f, l, l.precedence() < 1)?;
                write!(f, " {op} ")?;
                write_operand(f, r, r.precedence() <= 1)
            }
            Expr::Mul(l, r) | Expr::Div(l, r) => {
                let op = if matches!(self, Expr::Mul(..)) { "*" } else { "/" };
                write_operand(f, l, l.precedence() < 2)?;
                f.write_str(op)?;
                write_operand(f, r, r.precedence() <= 2)
            }
            Expr::Pow(base, n) => {
                write_operand(f, base, base.precedence() < 5)?;
                write!(f, "^{n}")
            }
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

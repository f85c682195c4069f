//! Coefficient expressions: a tiny arithmetic language over the problem variables
//! `t, x1..xn, y1..ym, z11..zmd, u1..uk`, evaluated on plain scalars or on
//! nested dual numbers for exact directional derivatives.

mod dual;
mod parse;

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dual::{Dual, Dual2, Dual3, Number};

use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("syntax error at byte {offset}: expected {expected}")]
    Syntax { offset: usize, expected: String },
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("domain error in {op} at argument {arg}")]
    Domain { op: &'static str, arg: f64 },
    #[error("missing binding for `{0}`")]
    MissingBinding(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
}

impl ExprError {
    pub fn code(&self) -> &'static str {
        match self {
            ExprError::Syntax { .. } => "SyntaxError",
            ExprError::UnknownVariable(_) => "UnknownVariable",
            ExprError::Domain { .. } => "DomainError",
            ExprError::MissingBinding(_) => "MissingBinding",
            ExprError::NonFinite { .. } => "NonFinite",
        }
    }

    pub fn is_parse_error(&self) -> bool {
        matches!(self, ExprError::Syntax { .. } | ExprError::UnknownVariable(_))
    }
}

/// Problem dimensions: state `n`, backward state `m`, Brownian `d`, control `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub k: usize,
}

/// A variable of the coefficient language. Indices are zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    T,
    X(usize),
    Y(usize),
    Z(usize, usize),
    U(usize),
}

impl Dims {
    pub const fn new(n: usize, m: usize, d: usize, k: usize) -> Self {
        Dims { n, m, d, k }
    }

    /// Length of the flat variable vector `[t, x, y, z, u]`.
    pub fn slots(&self) -> usize {
        1 + self.n + self.m + self.m * self.d + self.k
    }

    pub fn x_offset(&self) -> usize {
        1
    }

    pub fn y_offset(&self) -> usize {
        1 + self.n
    }

    pub fn z_offset(&self) -> usize {
        1 + self.n + self.m
    }

    pub fn u_offset(&self) -> usize {
        1 + self.n + self.m + self.m * self.d
    }

    pub fn slot(&self, var: Var) -> usize {
        match var {
            Var::T => 0,
            Var::X(i) => self.x_offset() + i,
            Var::Y(i) => self.y_offset() + i,
            Var::Z(i, j) => self.z_offset() + i * self.d + j,
            Var::U(i) => self.u_offset() + i,
        }
    }

    pub fn var_at(&self, slot: usize) -> Option<Var> {
        if slot == 0 {
            Some(Var::T)
        } else if slot < self.y_offset() {
            Some(Var::X(slot - self.x_offset()))
        } else if slot < self.z_offset() {
            Some(Var::Y(slot - self.y_offset()))
        } else if slot < self.u_offset() {
            let r = slot - self.z_offset();
            Some(Var::Z(r / self.d, r % self.d))
        } else if slot < self.slots() {
            Some(Var::U(slot - self.u_offset()))
        } else {
            None
        }
    }

    /// Canonical name: `t`, `x1`, `y1`, `z11` (or `z1_12` once an index exceeds 9), `u1`.
    pub fn name(&self, var: Var) -> String {
        match var {
            Var::T => "t".into(),
            Var::X(i) => format!("x{}", i + 1),
            Var::Y(i) => format!("y{}", i + 1),
            Var::Z(i, j) if self.m <= 9 && self.d <= 9 => format!("z{}{}", i + 1, j + 1),
            Var::Z(i, j) => format!("z{}_{}", i + 1, j + 1),
            Var::U(i) => format!("u{}", i + 1),
        }
    }

    /// Resolves a variable name against these dimensions.
    pub fn resolve(&self, name: &str) -> Option<Var> {
        if name == "t" {
            return Some(Var::T);
        }
        let (head, rest) = name.split_at(name.char_indices().nth(1).map(|(i, _)| i)?);
        let index = |s: &str| -> Option<usize> {
            if s.is_empty() || s.starts_with('0') || !s.bytes().all(|b| b.is_ascii_digit()) {
                return None;
            }
            s.parse::<usize>().ok().filter(|&v| v >= 1).map(|v| v - 1)
        };
        match head {
            "x" => index(rest).filter(|&i| i < self.n).map(Var::X),
            "y" => index(rest).filter(|&i| i < self.m).map(Var::Y),
            "u" => index(rest).filter(|&i| i < self.k).map(Var::U),
            "z" => {
                let (a, b) = match rest.split_once('_') {
                    Some((a, b)) => (index(a)?, index(b)?),
                    None if rest.len() == 2 => (index(&rest[..1])?, index(&rest[1..])?),
                    None => return None,
                };
                (a < self.m && b < self.d).then_some(Var::Z(a, b))
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Log,
    Sin,
    Cos,
    Sqrt,
    Abs,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
        }
    }
}

/// Expression syntax tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

/// Parses `text` against the variable set declared by `dims`.
pub fn parse(text: &str, dims: &Dims) -> Result<Expr, ExprError> {
    parse::Parser::parse(text, dims)
}

/// Source of variable values during evaluation.
pub trait Bindings<N> {
    fn lookup(&self, var: Var) -> Option<N>;
    fn name(&self, var: Var) -> String;
}

/// Values laid out in the flat `[t, x, y, z, u]` order of [`Dims::slot`].
pub struct Slots<'a, N> {
    pub dims: &'a Dims,
    pub values: &'a [N],
}

impl<N: Copy> Bindings<N> for Slots<'_, N> {
    #[inline]
    fn lookup(&self, var: Var) -> Option<N> {
        self.values.get(self.dims.slot(var)).copied()
    }

    fn name(&self, var: Var) -> String {
        self.dims.name(var)
    }
}

/// Name-keyed bindings (`"x1" -> 0.3`), convenient for one-off evaluations.
pub struct Named<'a, T> {
    pub dims: &'a Dims,
    pub values: &'a HashMap<String, T>,
}

impl<T: Copy> Bindings<T> for Named<'_, T> {
    fn lookup(&self, var: Var) -> Option<T> {
        self.values.get(&self.dims.name(var)).copied()
    }

    fn name(&self, var: Var) -> String {
        self.dims.name(var)
    }
}

#[inline]
fn finite<T: Real, N: Number<T>>(v: N, op: &'static str) -> Result<N, ExprError> {
    if v.all_finite() {
        Ok(v)
    } else {
        Err(ExprError::NonFinite { op })
    }
}

impl Expr {
    /// Evaluates on any [`Number`]: a plain scalar or a (nested) dual.
    pub fn eval_with<T: Real, N: Number<T>, B: Bindings<N>>(&self, env: &B) -> Result<N, ExprError> {
        match self {
            Expr::Num(v) => Ok(N::constant(T::lit(*v))),
            Expr::Var(var) => {
                let v = env.lookup(*var).ok_or_else(|| ExprError::MissingBinding(env.name(*var)))?;
                finite(v, "input")
            }
            Expr::Neg(a) => Ok(-a.eval_with(env)?),
            Expr::Bin(op, a, b) => {
                let a = a.eval_with(env)?;
                let b = b.eval_with(env)?;
                match op {
                    BinOp::Add => finite(a + b, "add"),
                    BinOp::Sub => finite(a - b, "sub"),
                    BinOp::Mul => finite(a * b, "mul"),
                    BinOp::Div => {
                        if b.primal() == T::zero() {
                            return Err(ExprError::Domain { op: "div", arg: 0.0 });
                        }
                        finite(a / b, "div")
                    }
                    BinOp::Pow => pow(a, b),
                }
            }
            Expr::Call(func, a) => {
                let a = a.eval_with(env)?;
                let p = a.primal();
                let domain = |op| ExprError::Domain { op, arg: p.as_f64() };
                match func {
                    Func::Exp => finite(a.exponential(), "exp"),
                    Func::Log if p <= T::zero() => Err(domain("log")),
                    Func::Log => finite(a.logarithm(), "log"),
                    Func::Sin => finite(a.sine(), "sin"),
                    Func::Cos => finite(a.cosine(), "cos"),
                    Func::Sqrt if p < T::zero() => Err(domain("sqrt")),
                    Func::Sqrt => finite(a.square_root(), "sqrt"),
                    Func::Abs => finite(a.magnitude(), "abs"),
                }
            }
        }
    }

    pub fn eval<T: Real, B: Bindings<T>>(&self, env: &B) -> Result<T, ExprError> {
        self.eval_with::<T, T, B>(env)
    }

    /// Value, first and (for `order >= 2`) second directional derivative along `direction`.
    pub fn directional<T: Real>(
        &self,
        dims: &Dims,
        point: &[T],
        direction: &[T],
        order: u8,
    ) -> Result<(T, T, Option<T>), ExprError> {
        if order >= 2 {
            let d = self.eval_dual2(dims, point, direction)?;
            Ok((d.value(), d.first(), Some(d.second())))
        } else {
            let seeded: Vec<Dual<T>> = seeds(point, direction);
            let d = self.eval_with::<T, Dual<T>, _>(&Slots { dims, values: &seeded })?;
            Ok((d.re, d.eps, None))
        }
    }

    pub fn eval_dual2<T: Real>(&self, dims: &Dims, point: &[T], direction: &[T]) -> Result<Dual2<T>, ExprError> {
        let seeded: Vec<Dual2<T>> = seeds(point, direction);
        self.eval_with::<T, Dual2<T>, _>(&Slots { dims, values: &seeded })
    }

    pub fn eval_dual3<T: Real>(&self, dims: &Dims, point: &[T], direction: &[T]) -> Result<Dual3<T>, ExprError> {
        let seeded: Vec<Dual3<T>> = seeds(point, direction);
        self.eval_with::<T, Dual3<T>, _>(&Slots { dims, values: &seeded })
    }

    /// Visits every variable occurrence.
    pub fn for_each_var(&self, f: &mut impl FnMut(Var)) {
        match self {
            Expr::Num(_) => {}
            Expr::Var(v) => f(*v),
            Expr::Neg(a) | Expr::Call(_, a) => a.for_each_var(f),
            Expr::Bin(_, a, b) => {
                a.for_each_var(f);
                b.for_each_var(f);
            }
        }
    }

    /// Structural zero: a literal `0` (possibly negated).
    pub fn is_literal_zero(&self) -> bool {
        match self {
            Expr::Num(v) => *v == 0.0,
            Expr::Neg(a) => a.is_literal_zero(),
            _ => false,
        }
    }

    /// Wraps the tree with the dimensions needed to print variable names.
    pub fn display<'a>(&'a self, dims: &'a Dims) -> ExprDisplay<'a> {
        ExprDisplay { expr: self, dims }
    }
}

fn seeds<T: Real, N: Number<T>>(point: &[T], direction: &[T]) -> Vec<N> {
    point
        .iter()
        .enumerate()
        .map(|(i, &x)| N::seed(x, direction.get(i).copied().unwrap_or_else(T::zero)))
        .collect()
}

fn pow<T: Real, N: Number<T>>(base: N, exponent: N) -> Result<N, ExprError> {
    let b = base.primal();
    if exponent.is_constant() {
        let c = exponent.primal();
        if b < T::zero() && c.fract() != T::zero() {
            return Err(ExprError::Domain { op: "pow", arg: b.as_f64() });
        }
        if b == T::zero() && c < T::zero() {
            return Err(ExprError::Domain { op: "pow", arg: 0.0 });
        }
        return finite(base.power_const(c), "pow");
    }
    if b <= T::zero() {
        return Err(ExprError::Domain { op: "pow", arg: b.as_f64() });
    }
    finite((exponent * base.logarithm()).exponential(), "pow")
}

/// Fully parenthesised rendering that parses back to an equal tree.
pub struct ExprDisplay<'a> {
    expr: &'a Expr,
    dims: &'a Dims,
}

impl fmt::Display for ExprDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_expr(self.expr, self.dims, f)
    }
}

fn write_expr(e: &Expr, dims: &Dims, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    match e {
        Expr::Num(v) => write!(f, "{v:?}"),
        Expr::Var(v) => write!(f, "{}", dims.name(*v)),
        Expr::Neg(a) => {
            write!(f, "(-")?;
            write_expr(a, dims, f)?;
            write!(f, ")")
        }
        Expr::Bin(op, a, b) => {
            let sym = match op {
                BinOp::Add => "+",
                BinOp::Sub => "-",
                BinOp::Mul => "*",
                BinOp::Div => "/",
                BinOp::Pow => "^",
            };
            write!(f, "(")?;
            write_expr(a, dims, f)?;
            write!(f, " {sym} ")?;
            write_expr(b, dims, f)?;
            write!(f, ")")
        }
        Expr::Call(func, a) => {
            write!(f, "{}(", func.name())?;
            write_expr(a, dims, f)?;
            write!(f, ")")
        }
    }
}

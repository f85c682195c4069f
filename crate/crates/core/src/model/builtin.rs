use std::sync::Arc;

use super::{ClosedForm, Coef, Coefficients, ProblemSource, ProblemSpec};
use crate::error::{Error, Result};
use crate::expr::Dims;
use crate::real::Real;

pub const BUILTIN_NAMES: [&str; 3] = ["paper-example", "classical-example", "lq-noise-1d"];

// Slot layout for n = m = d = k = 1.
const X: usize = 1;
const Y: usize = 2;
const U: usize = 4;

fn lin<T: Real>(label: &str, terms: &[(usize, f64)]) -> Coef<T> {
    Arc::new(ClosedForm::quadratic(label, 0.0, terms, &[]))
}

fn quad<T: Real>(label: &str, constant: f64, terms: &[(usize, f64)], diag: &[(usize, f64)]) -> Coef<T> {
    Arc::new(ClosedForm::quadratic(label, constant, terms, diag))
}

fn zero<T: Real>() -> Coef<T> {
    Arc::new(ClosedForm::zero())
}

/// Registered problems with closed-form derivatives. Each coefficient's label is
/// its expression in the config language.
pub fn builtin<T: Real>(name: &str) -> Result<ProblemSpec<T>> {
    let dims = Dims::new(1, 1, 1, 1);
    let l = T::lit;
    match name {
        "paper-example" | "classical-example" => {
            let coef = Coefficients {
                f: vec![lin("x1+u1", &[(X, 1.0), (U, 1.0)])],
                sigma: vec![zero()],
                g: vec![lin("x1+y1+u1", &[(X, 1.0), (Y, 1.0), (U, 1.0)])],
                psi: vec![zero()],
                l: lin("u1", &[(U, 1.0)]),
                beta: zero(),
                gamma: zero(),
                phi: lin("x1", &[(X, 1.0)]),
            };
            let alpha = if name == "paper-example" { l(1.0) } else { T::infinity() };
            Ok(ProblemSpec {
                dims,
                horizon: l(1.0),
                alpha,
                x0: vec![l(0.0)],
                u_lo: vec![l(1.0)],
                u_hi: vec![l(2.0)],
                coef,
                source: ProblemSource::Builtin(name.to_string()),
            })
        }
        "lq-noise-1d" => {
            let coef = Coefficients {
                f: vec![lin("u1", &[(U, 1.0)])],
                sigma: vec![quad("1", 1.0, &[], &[])],
                g: vec![lin("0.5*x1-y1", &[(X, 0.5), (Y, -1.0)])],
                psi: vec![lin("x1", &[(X, 1.0)])],
                l: quad("0.5*u1^2+0.5*x1^2", 0.0, &[], &[(U, 1.0), (X, 1.0)]),
                beta: zero(),
                gamma: quad("0.5*y1^2", 0.0, &[], &[(Y, 1.0)]),
                phi: lin("x1", &[(X, 1.0)]),
            };
            Ok(ProblemSpec {
                dims,
                horizon: l(1.0),
                alpha: l(0.5),
                x0: vec![l(0.0)],
                u_lo: vec![l(-1.0)],
                u_hi: vec![l(1.0)],
                coef,
                source: ProblemSource::Builtin(name.to_string()),
            })
        }
        other => Err(Error::UnknownProblem(other.to_string())),
    }
}

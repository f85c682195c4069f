//! Problem specification: dimensions, horizon, threshold, control box and the
//! coefficient functions with their derivatives.

mod builtin;
mod check;
mod coef;
mod grid;

use std::sync::Arc;

pub use builtin::{builtin, BUILTIN_NAMES};
pub use check::{check_derivatives, DerivativeEntry, DerivativeReport};
pub use coef::{Block, ClosedForm, Coef, Coefficients, Evaluator, ExprFn, ScalarFn, VarKind};
pub use grid::{ControlPath, TimeGrid};

use crate::config::{ControlInit, ProblemConfig, RunConfig};
use crate::error::{Error, Result};
use crate::expr::Dims;
use crate::real::Real;

/// Where the coefficients came from; used to echo a problem back into a config.
#[derive(Debug, Clone, PartialEq)]
pub enum ProblemSource {
    Builtin(String),
    Inline(ProblemConfig),
}

#[derive(Debug, Clone)]
pub struct ProblemSpec<T: Real> {
    pub dims: Dims,
    pub horizon: T,
    /// Threshold; `+∞` disables stopping.
    pub alpha: T,
    pub x0: Vec<T>,
    pub u_lo: Vec<T>,
    pub u_hi: Vec<T>,
    pub coef: Coefficients<T>,
    pub source: ProblemSource,
}

impl<T: Real> PartialEq for ProblemSpec<T> {
    /// Field-for-field comparison; coefficients compare by their labels.
    fn eq(&self, other: &Self) -> bool {
        let labels = |s: &Self| s.coef.named(&s.dims).into_iter().map(|(n, c)| (n, c.label())).collect::<Vec<_>>();
        self.dims == other.dims
            && self.horizon == other.horizon
            && self.alpha == other.alpha
            && self.x0 == other.x0
            && self.u_lo == other.u_lo
            && self.u_hi == other.u_hi
            && self.source == other.source
            && labels(self) == labels(other)
    }
}

impl<T: Real> ProblemSpec<T> {
    pub fn name(&self) -> String {
        match &self.source {
            ProblemSource::Builtin(n) => n.clone(),
            ProblemSource::Inline(_) => "inline".into(),
        }
    }

    pub fn stopping_disabled(&self) -> bool {
        self.alpha == T::infinity()
    }

    pub fn sigma_is_zero(&self) -> bool {
        self.coef.sigma_is_zero()
    }

    pub fn grid(&self, steps: usize) -> Result<TimeGrid<T>> {
        TimeGrid::new(self.horizon, steps)
    }

    /// Componentwise clamp onto `[U_lo, U_hi]`.
    pub fn project(&self, u: &mut [T]) {
        for (i, v) in u.iter_mut().enumerate() {
            let c = i % self.dims.k;
            *v = v.max(self.u_lo[c]).min(self.u_hi[c]);
        }
    }

    pub fn projected(&self, u: &ControlPath<T>) -> ControlPath<T> {
        let mut out = u.clone();
        self.project(out.values_mut());
        out
    }

    pub fn check_control(&self, u: &ControlPath<T>) -> Result<()> {
        if u.k() != self.dims.k {
            return Err(Error::DimensionMismatch(format!("control has {} components, problem has k = {}", u.k(), self.dims.k)));
        }
        for i in 0..u.cells() {
            for (c, &v) in u.cell(i).iter().enumerate() {
                if !(v >= self.u_lo[c] && v <= self.u_hi[c]) {
                    return Err(Error::OutOfBox { cell: i, component: c });
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, u: &ControlPath<T>) -> bool {
        self.check_control(u).is_ok()
    }

    /// Config document that loads back into this spec.
    pub fn to_config(&self) -> RunConfig {
        let mut cfg = RunConfig::builtin("");
        cfg.problem = match &self.source {
            ProblemSource::Builtin(n) => ProblemConfig { builtin: Some(n.clone()), ..Default::default() },
            ProblemSource::Inline(p) => p.clone(),
        };
        let f = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<_>>();
        cfg.horizon = Some(self.horizon.as_f64());
        cfg.alpha = Some(crate::config::Alpha(self.alpha.as_f64()));
        cfg.x0 = Some(f(&self.x0));
        cfg.control.lo = Some(crate::config::ControlValue::Vector(f(&self.u_lo)));
        cfg.control.hi = Some(crate::config::ControlValue::Vector(f(&self.u_hi)));
        cfg
    }
}

/// Tolerance of the derivative check run at load time; loosened for single precision.
pub fn load_tolerance<T: Real>() -> f64 {
    1e-4f64.max(100.0 * T::epsilon().as_f64().sqrt())
}

/// Builds a validated spec from a run configuration.
pub fn load_problem<T: Real>(cfg: &RunConfig) -> Result<ProblemSpec<T>> {
    cfg.validate()?;
    let p = &cfg.problem;
    let mut spec = match &p.builtin {
        Some(name) => {
            let inline = [
                p.dims.is_some(),
                p.f.is_some(),
                p.sigma.is_some(),
                p.g.is_some(),
                p.psi.is_some(),
                p.l.is_some(),
                p.beta.is_some(),
                p.gamma.is_some(),
                p.phi.is_some(),
            ];
            if inline.iter().any(|&b| b) {
                return Err(Error::schema("problem", "a builtin problem cannot also define coefficients"));
            }
            builtin::<T>(name)?
        }
        None => inline_problem(cfg)?,
    };
    let n = spec.dims.n;
    let k = spec.dims.k;
    if let Some(h) = cfg.horizon {
        spec.horizon = T::lit(h);
    }
    if let Some(a) = cfg.alpha {
        spec.alpha = T::lit(a.0);
    }
    if let Some(x0) = &cfg.x0 {
        if x0.len() != n {
            return Err(Error::DimensionMismatch(format!("x0 has {} entries, n = {n}", x0.len())));
        }
        spec.x0 = x0.iter().map(|&v| T::lit(v)).collect();
    }
    if let Some(lo) = &cfg.control.lo {
        spec.u_lo = lo.expand(k, "control.lo")?.into_iter().map(T::lit).collect();
    }
    if let Some(hi) = &cfg.control.hi {
        spec.u_hi = hi.expand(k, "control.hi")?.into_iter().map(T::lit).collect();
    }
    for c in 0..k {
        if !(spec.u_lo[c].is_finite() && spec.u_hi[c].is_finite()) {
            return Err(Error::schema("control", "box bounds must be finite"));
        }
        if spec.u_lo[c] > spec.u_hi[c] {
            return Err(Error::schema(
                "control.lo",
                format!("lower bound {} exceeds upper bound {} in component {}", spec.u_lo[c], spec.u_hi[c], c + 1),
            ));
        }
    }
    if !(spec.horizon > T::zero()) || !spec.horizon.is_finite() {
        return Err(Error::schema("horizon", "must be positive"));
    }
    let report = check_derivatives(&spec, 32, load_tolerance::<T>());
    if let Some(bad) = report.first_failure() {
        return Err(Error::DerivativeCheckFailed {
            function: format!("{} ({})", bad.function, bad.kind),
            point: bad.worst_point.clone(),
            gap: bad.max_gap,
        });
    }
    Ok(spec)
}

fn inline_problem<T: Real>(cfg: &RunConfig) -> Result<ProblemSpec<T>> {
    let p = &cfg.problem;
    let dims = p.dims.ok_or_else(|| Error::schema("problem.dims", "required for inline problems"))?;
    if dims.n == 0 || dims.m == 0 || dims.d == 0 || dims.k == 0 {
        return Err(Error::schema("problem.dims", "all dimensions must be positive"));
    }
    let horizon = cfg.horizon.ok_or_else(|| Error::schema("horizon", "required for inline problems"))?;
    let alpha = cfg.alpha.ok_or_else(|| Error::schema("alpha", "required for inline problems"))?;
    let x0 = cfg.x0.clone().ok_or_else(|| Error::schema("x0", "required for inline problems"))?;
    let lo = cfg.control.lo.clone().ok_or_else(|| Error::schema("control.lo", "required for inline problems"))?;
    let hi = cfg.control.hi.clone().ok_or_else(|| Error::schema("control.hi", "required for inline problems"))?;

    let fx: &[VarKind] = &[VarKind::T, VarKind::X, VarKind::U];
    let full: &[VarKind] = &[VarKind::T, VarKind::X, VarKind::Y, VarKind::Z, VarKind::U];

    let one = |text: &Option<String>, name: &str, allowed: &[VarKind]| -> Result<Coef<T>> {
        let text = text.as_deref().ok_or_else(|| Error::schema(format!("problem.{name}"), "required"))?;
        let f = ExprFn::parse_restricted(text, dims, allowed, &format!("problem.{name}"))?;
        Ok(Arc::new(f))
    };
    let many = |texts: &Option<Vec<String>>, name: &str, len: usize, allowed: &[VarKind]| -> Result<Vec<Coef<T>>> {
        let texts = texts.as_ref().ok_or_else(|| Error::schema(format!("problem.{name}"), "required"))?;
        if texts.len() != len {
            return Err(Error::DimensionMismatch(format!("problem.{name} has {} entries, expected {len}", texts.len())));
        }
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| one(&Some(t.clone()), &format!("{name}[{i}]"), allowed))
            .collect()
    };

    let f = many(&p.f, "f", dims.n, fx)?;
    let sigma_rows = p.sigma.as_ref().ok_or_else(|| Error::schema("problem.sigma", "required"))?;
    if sigma_rows.len() != dims.n || sigma_rows.iter().any(|r| r.len() != dims.d) {
        return Err(Error::DimensionMismatch(format!("problem.sigma must be {}×{}", dims.n, dims.d)));
    }
    let mut sigma = Vec::with_capacity(dims.n * dims.d);
    for (r, row) in sigma_rows.iter().enumerate() {
        for (c, text) in row.iter().enumerate() {
            sigma.push(one(&Some(text.clone()), &format!("sigma[{r}][{c}]"), fx)?);
        }
    }
    let coef = Coefficients {
        f,
        sigma,
        g: many(&p.g, "g", dims.m, full)?,
        psi: many(&p.psi, "psi", dims.m, &[VarKind::X])?,
        l: one(&p.l, "l", full)?,
        beta: one(&p.beta, "beta", &[VarKind::X])?,
        gamma: one(&p.gamma, "gamma", &[VarKind::Y])?,
        phi: one(&p.phi, "phi", &[VarKind::X])?,
    };
    if x0.len() != dims.n {
        return Err(Error::DimensionMismatch(format!("x0 has {} entries, n = {}", x0.len(), dims.n)));
    }
    Ok(ProblemSpec {
        dims,
        horizon: <T as Real>::lit(horizon),
        alpha: <T as Real>::lit(alpha.0),
        x0: x0.into_iter().map(<T as Real>::lit).collect(),
        u_lo: lo.expand(dims.k, "control.lo")?.into_iter().map(<T as Real>::lit).collect(),
        u_hi: hi.expand(dims.k, "control.hi")?.into_iter().map(<T as Real>::lit).collect(),
        coef,
        source: ProblemSource::Inline(p.clone()),
    })
}

/// Control path described by a config `init` entry; defaults to the box midpoint.
pub fn control_from_init<T: Real>(spec: &ProblemSpec<T>, grid: TimeGrid<T>, init: Option<&ControlInit>) -> Result<ControlPath<T>> {
    let k = spec.dims.k;
    let u = match init {
        None => {
            let half = T::lit(0.5);
            let mid: Vec<T> = (0..k).map(|c| half * (spec.u_lo[c] + spec.u_hi[c])).collect();
            ControlPath::constant(grid, &mid)
        }
        Some(ControlInit::Constant(v)) => {
            let row: Vec<T> = v.expand(k, "control.init")?.into_iter().map(T::lit).collect();
            ControlPath::constant(grid, &row)
        }
        Some(ControlInit::Path(rows)) => {
            if rows.len() != grid.steps() {
                return Err(Error::DimensionMismatch(format!(
                    "control.init has {} rows, grid has {} cells",
                    rows.len(),
                    grid.steps()
                )));
            }
            let mut values = Vec::with_capacity(rows.len() * k);
            for (i, r) in rows.iter().enumerate() {
                if r.len() != k {
                    return Err(Error::schema(format!("control.init[{i}]"), format!("expected {k} components")));
                }
                values.extend(r.iter().map(|&v| T::lit(v)));
            }
            ControlPath::from_values(grid, k, values)?
        }
    };
    spec.check_control(&u)?;
    Ok(u)
}

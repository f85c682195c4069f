//! The backward equation `dY = g dt + Z dW`, `Y(τ) = Ψ(X(τ))` on `[0, τ̂]`, and the
//! cost functional.

use rayon::prelude::*;

use crate::config::BsdeMode;
use crate::error::{Error, Result};
use crate::model::{ControlPath, Evaluator, ProblemSpec};
use crate::real::Real;
use crate::regress::{Basis, Fit};
use crate::stopping::{lerp_rows, Horizon, Window};

/// How conditional expectations are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverMode {
    /// One path, `Z ≡ 0`, RK4 in time.
    Deterministic,
    /// Least-squares Monte Carlo on polynomials of the state.
    Regression { degree: usize },
}

impl SolverMode {
    pub fn name(&self) -> &'static str {
        match self {
            SolverMode::Deterministic => "deterministic",
            SolverMode::Regression { .. } => "regression",
        }
    }
}

/// Picks the solver for a problem. Forcing the deterministic solver on a noisy
/// problem is rejected.
pub fn resolve_mode<T: Real>(spec: &ProblemSpec<T>, mode: BsdeMode, degree: usize) -> Result<SolverMode> {
    match mode {
        BsdeMode::Auto if spec.sigma_is_zero() => Ok(SolverMode::Deterministic),
        BsdeMode::Auto | BsdeMode::Regression => Ok(SolverMode::Regression { degree }),
        BsdeMode::Deterministic if spec.sigma_is_zero() => Ok(SolverMode::Deterministic),
        BsdeMode::Deterministic => Err(Error::InvalidArgument("deterministic backward solver needs sigma == 0".into())),
    }
}

/// `Y` on the truncated grid (`M × (j+2) × m`) and `Z` per cell (`M × (j+1) × m·d`).
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardSolution<T: Real> {
    pub mode: SolverMode,
    pub horizon: Horizon<T>,
    pub paths: usize,
    pub m: usize,
    pub d: usize,
    y: Vec<T>,
    z: Vec<T>,
}

impl<T: Real> BackwardSolution<T> {
    pub fn from_parts(mode: SolverMode, horizon: Horizon<T>, paths: usize, m: usize, d: usize, y: Vec<T>, z: Vec<T>) -> Self {
        debug_assert_eq!(y.len(), paths * horizon.len() * m);
        debug_assert_eq!(z.len(), paths * horizon.cells() * m * d);
        BackwardSolution { mode, horizon, paths, m, d, y, z }
    }

    pub fn y(&self, p: usize, idx: usize) -> &[T] {
        let at = (p * self.horizon.len() + idx) * self.m;
        &self.y[at..at + self.m]
    }

    pub fn z(&self, p: usize, c: usize) -> &[T] {
        let w = self.m * self.d;
        let at = (p * self.horizon.cells() + c) * w;
        &self.z[at..at + w]
    }

    /// `Y` at offset `w·dt` into cell `c`.
    pub fn y_at(&self, p: usize, c: usize, w: T, out: &mut [T]) {
        lerp_rows(self.y(p, c), self.y(p, c + 1), self.horizon.weight(c, w), out);
    }

    pub fn mean_y(&self, idx: usize) -> Vec<T> {
        mean_rows(self.paths, self.m, |p| self.y(p, idx))
    }

    pub fn mean_z(&self, c: usize) -> Vec<T> {
        mean_rows(self.paths, self.m * self.d, |p| self.z(p, c))
    }

    pub fn y0(&self) -> Vec<T> {
        self.mean_y(0)
    }

    pub(crate) fn y_all(&self) -> &[T] {
        &self.y
    }

    pub(crate) fn z_all(&self) -> &[T] {
        &self.z
    }
}

pub(crate) fn mean_rows<'a, T: Real + 'a>(paths: usize, dim: usize, row: impl Fn(usize) -> &'a [T]) -> Vec<T> {
    let mut acc = vec![T::zero(); dim];
    for p in 0..paths {
        for (a, &v) in acc.iter_mut().zip(row(p)) {
            *a += v;
        }
    }
    let m = T::from_usize_lossy(paths);
    acc.iter_mut().for_each(|a| *a /= m);
    acc
}

fn check_finite<T: Real>(v: &[T], step: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteBackward(step))
    }
}

/// Classical RK4 for `dy/dt = G` run backward from the tail of `horizon` to 0.
///
/// `driver(c, w, y, out)` evaluates `G` at time `t_c + w·dt`. Returns `(j+2) × dim`.
pub fn rk4_backward<T, G>(horizon: &Horizon<T>, dim: usize, terminal: &[T], mut driver: G) -> Result<Vec<T>>
where
    T: Real,
    G: FnMut(usize, T, &[T], &mut [T]) -> Result<()>,
{
    let len = horizon.len();
    let mut out = vec![T::zero(); len * dim];
    out[(len - 1) * dim..].copy_from_slice(terminal);
    check_finite(terminal, horizon.tail())?;
    let mut ks = vec![T::zero(); 4 * dim];
    let mut tmp = vec![T::zero(); dim];
    let half = T::lit(0.5);
    for c in (0..horizon.cells()).rev() {
        let (head, tail) = out.split_at_mut((c + 1) * dim);
        let y = &tail[..dim];
        let next = &mut head[c * dim..];
        let frac = horizon.frac(c);
        if frac == T::zero() {
            next.copy_from_slice(y);
            continue;
        }
        let h = -frac * horizon.grid.dt();
        rk4_step(&mut driver, c, frac, frac * half, T::zero(), h, y, &mut ks, &mut tmp, next)?;
        check_finite(next, c)?;
    }
    Ok(out)
}

/// RK4 forward from 0 to the tail of `horizon`. Returns `(j+2) × dim`.
pub fn rk4_forward<T, G>(horizon: &Horizon<T>, dim: usize, initial: &[T], mut driver: G) -> Result<Vec<T>>
where
    T: Real,
    G: FnMut(usize, T, &[T], &mut [T]) -> Result<()>,
{
    let len = horizon.len();
    let mut out = vec![T::zero(); len * dim];
    out[..dim].copy_from_slice(initial);
    let mut ks = vec![T::zero(); 4 * dim];
    let mut tmp = vec![T::zero(); dim];
    let half = T::lit(0.5);
    for c in 0..horizon.cells() {
        let (head, tail) = out.split_at_mut((c + 1) * dim);
        let y = &head[c * dim..];
        let next = &mut tail[..dim];
        let frac = horizon.frac(c);
        if frac == T::zero() {
            next.copy_from_slice(y);
            continue;
        }
        let h = frac * horizon.grid.dt();
        rk4_step(&mut driver, c, T::zero(), frac * half, frac, h, y, &mut ks, &mut tmp, next)?;
        check_finite(next, c + 1)?;
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn rk4_step<T, G>(driver: &mut G, c: usize, w0: T, wm: T, w1: T, h: T, y: &[T], ks: &mut [T], tmp: &mut [T], out: &mut [T]) -> Result<()>
where
    T: Real,
    G: FnMut(usize, T, &[T], &mut [T]) -> Result<()>,
{
    let dim = y.len();
    let half = T::lit(0.5);
    let (k1, rest) = ks.split_at_mut(dim);
    let (k2, rest) = rest.split_at_mut(dim);
    let (k3, k4) = rest.split_at_mut(dim);
    driver(c, w0, y, k1)?;
    for r in 0..dim {
        tmp[r] = y[r] + half * h * k1[r];
    }
    driver(c, wm, tmp, k2)?;
    for r in 0..dim {
        tmp[r] = y[r] + half * h * k2[r];
    }
    driver(c, wm, tmp, k3)?;
    for r in 0..dim {
        tmp[r] = y[r] + h * k3[r];
    }
    driver(c, w1, tmp, k4)?;
    let sixth = h / T::lit(6.0);
    for r in 0..dim {
        out[r] = y[r] + sixth * (k1[r] + (k2[r] + k3[r]) * T::lit(2.0) + k4[r]);
    }
    Ok(())
}

/// Least-squares backward induction for `dY = G(p, c, Y, Z) dt + Z dW` on a window.
///
/// Per cell: `Z_c = E[Y_{c+1} ΔWᵀ]/Var(ΔW)`, `E_c = E[Y_{c+1}]`, both projected on
/// `basis(X_c)`, then an explicit predictor `E_c − Δ·G(E_c, Z_c)` and one Picard
/// sweep `Y_c = E_c − Δ·G(Y_pred, Z_c)`. Returns `(Y, Z)` in solution layout.
pub fn regression_backward<T, S, I, G>(win: &Window<T>, degree: usize, dim: usize, terminal: &[T], init: I, driver: G) -> Result<(Vec<T>, Vec<T>)>
where
    T: Real,
    I: Fn() -> S + Sync,
    G: Fn(&mut S, usize, usize, &[T], &[T], &mut [T]) -> Result<()> + Sync,
{
    let hz = &win.horizon;
    let (m, d) = (win.paths, win.d);
    let (len, cells) = (hz.len(), hz.cells());
    let zw = dim * d;
    let mut y = vec![T::zero(); m * len * dim];
    let mut z = vec![T::zero(); m * cells * zw];
    for p in 0..m {
        let src = &terminal[p * dim..(p + 1) * dim];
        check_finite(src, hz.tail())?;
        y[(p * len + len - 1) * dim..(p * len + len) * dim].copy_from_slice(src);
    }
    let basis = Basis::new(win.n, degree);
    let r = dim + zw;
    let mut targets = vec![T::zero(); m * r];
    for c in (0..cells).rev() {
        let frac = hz.frac(c);
        if frac == T::zero() {
            for p in 0..m {
                let at = (p * len + c) * dim;
                y.copy_within(at + dim..at + 2 * dim, at);
            }
            continue;
        }
        let delta = frac * hz.grid.dt();
        let var = win.dw_var(c);
        for p in 0..m {
            let yn = &y[(p * len + c + 1) * dim..(p * len + c + 2) * dim];
            let dw = win.dw(p, c);
            let row = &mut targets[p * r..(p + 1) * r];
            row[..dim].copy_from_slice(yn);
            for a in 0..dim {
                for j in 0..d {
                    row[dim + a * d + j] = yn[a] * dw[j] / var;
                }
            }
        }
        let fit = Fit::new(&basis, m, |p| win.x(p, c), &targets, r, c)?;
        let rows: Vec<Result<Vec<T>>> = (0..m)
            .into_par_iter()
            .map_init(&init, |scratch, p| {
                let mut pred = vec![T::zero(); r];
                fit.predict(win.x(p, c), &mut pred);
                let (e, zc) = pred.split_at_mut(dim);
                let mut g = vec![T::zero(); dim];
                driver(scratch, p, c, e, zc, &mut g)?;
                let guess: Vec<T> = (0..dim).map(|a| e[a] - delta * g[a]).collect();
                driver(scratch, p, c, &guess, zc, &mut g)?;
                for a in 0..dim {
                    e[a] -= delta * g[a];
                }
                check_finite(&pred, c)?;
                Ok(pred)
            })
            .collect();
        for (p, row) in rows.into_iter().enumerate() {
            let row = row?;
            y[(p * len + c) * dim..(p * len + c + 1) * dim].copy_from_slice(&row[..dim]);
            z[(p * cells + c) * zw..(p * cells + c + 1) * zw].copy_from_slice(&row[dim..]);
        }
    }
    Ok((y, z))
}

/// Solves the state's backward equation on the window.
pub fn solve_backward<T: Real>(spec: &ProblemSpec<T>, win: &Window<T>, control: &ControlPath<T>, mode: SolverMode) -> Result<BackwardSolution<T>> {
    let dims = spec.dims;
    let (m, d) = (dims.m, dims.d);
    let hz = win.horizon;
    let coef = &spec.coef;
    let mut ev = Evaluator::new(dims, coef);
    let mut terminal = vec![T::zero(); win.paths * m];
    for p in 0..win.paths {
        ev.set(hz.tau, win.x(p, hz.tail()), &[], &[], &[]);
        ev.values(&coef.psi, &mut terminal[p * m..(p + 1) * m])?;
    }
    match mode {
        SolverMode::Deterministic => {
            if win.paths != 1 {
                return Err(Error::InvalidArgument("deterministic backward solver needs a single path".into()));
            }
            let mut x = vec![T::zero(); dims.n];
            let y = rk4_backward(&hz, m, &terminal, |c, w, yv, out| {
                win.x_at(0, c, w, &mut x);
                ev.set(hz.time_in(c, w), &x, yv, &[], control.cell(hz.control_cell(c)));
                ev.values(&coef.g, out)
            })?;
            let z = vec![T::zero(); hz.cells() * m * d];
            Ok(BackwardSolution::from_parts(mode, hz, 1, m, d, y, z))
        }
        SolverMode::Regression { degree } => {
            let (y, z) = regression_backward(
                win,
                degree,
                m,
                &terminal,
                || Evaluator::new(dims, coef),
                |ev, p, c, yv, zv, out| {
                    ev.set(hz.time(c), win.x(p, c), yv, zv, control.cell(hz.control_cell(c)));
                    ev.values(&coef.g, out)
                },
            )?;
            Ok(BackwardSolution::from_parts(mode, hz, win.paths, m, d, y, z))
        }
    }
}

/// Running-cost integral, terminal cost and recursive cost of one pipeline run:
/// trapezoid of `Ê l` over `[0, τ̂]` + `Ê β(X(τ̂))` + `γ(mean Y(0))`.
pub fn cost<T: Real>(spec: &ProblemSpec<T>, win: &Window<T>, bwd: &BackwardSolution<T>, control: &ControlPath<T>) -> Result<T> {
    let hz = &win.horizon;
    let dims = spec.dims;
    let coef = &spec.coef;
    let mut ev = Evaluator::new(dims, coef);
    let mut running = T::zero();
    let half = T::lit(0.5);
    for c in 0..hz.cells() {
        let len = hz.cell_len(c);
        if len == T::zero() {
            continue;
        }
        let u = control.cell(hz.control_cell(c));
        let mut acc = T::zero();
        for p in 0..win.paths {
            let z = bwd.z(p, c);
            ev.set(hz.time(c), win.x(p, c), bwd.y(p, c), z, u);
            let a = ev.value(&coef.l)?;
            ev.set(hz.time(c + 1), win.x(p, c + 1), bwd.y(p, c + 1), z, u);
            let b = ev.value(&coef.l)?;
            acc += a + b;
        }
        running += half * acc / T::from_usize_lossy(win.paths) * len;
    }
    let mut terminal = T::zero();
    for p in 0..win.paths {
        ev.set(hz.tau, win.x(p, hz.tail()), &[], &[], &[]);
        terminal += ev.value(&coef.beta)?;
    }
    terminal /= T::from_usize_lossy(win.paths);
    ev.set(T::zero(), &[], &bwd.y0(), &[], &[]);
    let recursive = ev.value(&coef.gamma)?;
    let total = running + terminal + recursive;
    if !total.is_finite() {
        return Err(Error::NonFiniteBackward(0));
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::model::{builtin, ClosedForm, ExprFn};
    use crate::sim::simulate_forward;
    use crate::stopping::{stopping_time, Window};

    fn run(spec: &ProblemSpec<f64>, steps: usize, u: f64, paths: usize) -> (Window<f64>, ControlPath<f64>, BackwardSolution<f64>) {
        let grid = spec.grid(steps).unwrap();
        let control = ControlPath::constant(grid, &[u]);
        let ens = simulate_forward(spec, &control, paths, 11).unwrap();
        let st = stopping_time(spec, &ens, 2).unwrap();
        let win = Window::new(&ens, st.tau_hat);
        let mode = resolve_mode(spec, BsdeMode::Auto, 2).unwrap();
        let bwd = solve_backward(spec, &win, &control, mode).unwrap();
        (win, control, bwd)
    }

    #[test]
    fn paper_example_backward_and_cost() {
        let spec = builtin::<f64>("paper-example").unwrap();
        let (win, control, bwd) = run(&spec, 10_000, 1.0, 1);
        let tau = win.horizon.tau;
        assert!((bwd.y0()[0] + 2f64.ln()).abs() < 1e-3);
        for i in 0..win.horizon.len() {
            let t = win.horizon.time(i);
            assert!((bwd.y(0, i)[0] + t.exp() * (tau - t)).abs() < 1e-3);
        }
        let j = cost(&spec, &win, &bwd, &control).unwrap();
        assert!((j - 2f64.ln()).abs() < 1e-3, "{j}");
    }

    #[test]
    fn classical_cost_is_one() {
        let spec = builtin::<f64>("classical-example").unwrap();
        let (win, control, bwd) = run(&spec, 1000, 1.0, 1);
        assert!((cost(&spec, &win, &bwd, &control).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_driver_and_terminal_give_zero() {
        let mut spec = builtin::<f64>("paper-example").unwrap();
        spec.coef.g = vec![Arc::new(ClosedForm::zero())];
        spec.coef.l = Arc::new(ClosedForm::zero());
        let (win, control, bwd) = run(&spec, 200, 1.0, 1);
        assert!((0..win.horizon.len()).all(|i| bwd.y(0, i)[0] == 0.0));
        assert_eq!(cost(&spec, &win, &bwd, &control).unwrap(), 0.0);
    }

    #[test]
    fn round_trip_recovers_terminal() {
        let spec = builtin::<f64>("paper-example").unwrap();
        let (win, control, bwd) = run(&spec, 1000, 1.0, 1);
        let hz = win.horizon;
        let mut ev = Evaluator::new(spec.dims, &spec.coef);
        let mut x = [0.0];
        let fwd = rk4_forward(&hz, 1, bwd.y(0, 0), |c, w, y, out| {
            win.x_at(0, c, w, &mut x);
            ev.set(hz.time_in(c, w), &x, y, &[], control.cell(hz.control_cell(c)));
            ev.values(&spec.coef.g, out)
        })
        .unwrap();
        assert!((fwd[hz.tail()] - bwd.y(0, hz.tail())[0]).abs() < 1e-9);
    }

    #[test]
    fn regression_linear_bsde() {
        let mut spec = builtin::<f64>("lq-noise-1d").unwrap();
        spec.coef.g = vec![Arc::new(ExprFn::parse("y1", spec.dims).unwrap())];
        spec.coef.psi = vec![Arc::new(ExprFn::parse("0.7", spec.dims).unwrap())];
        spec.alpha = f64::INFINITY;
        let (_, _, bwd) = run(&spec, 200, 0.0, 2000);
        let want = 0.7 * (-1f64).exp();
        assert!((bwd.y0()[0] - want).abs() < 0.01 * want, "{}", bwd.y0()[0]);
    }

    #[test]
    fn forced_deterministic_with_noise_is_rejected() {
        let spec = builtin::<f64>("lq-noise-1d").unwrap();
        assert!(resolve_mode(&spec, BsdeMode::Deterministic, 2).is_err());
    }
}

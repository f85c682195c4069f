//! Projected-gradient descent over piecewise-constant controls.

use crate::adjoint::{mean_h_u_at, AdjointSolution, Lin};
use crate::config::OptimizerConfig;
use crate::error::{Error, Result};
use crate::model::{Block, ControlPath, ProblemSpec};
use crate::pipeline::{Pipeline, Settings};
use crate::real::Real;
use crate::smp::Branch;
use crate::stopping::{check_h, Case};

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerOptions {
    pub step0: f64,
    pub max_iters: usize,
    pub armijo_c: f64,
    pub shrink: f64,
    pub grad_tol: f64,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        (&OptimizerConfig::default()).into()
    }
}

impl From<&OptimizerConfig> for OptimizerOptions {
    fn from(c: &OptimizerConfig) -> Self {
        OptimizerOptions { step0: c.step0, max_iters: c.max_iters, armijo_c: c.armijo_c, shrink: c.shrink, grad_tol: c.grad_tol }
    }
}

/// Riesz representative of the cost's Gateaux derivative under `⟨a, b⟩ = Σ dt·a·b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient<T> {
    pub path: ControlPath<T>,
    pub case: Case,
    pub branch: Branch,
    pub script_l: T,
}

/// Per cell: the cell average of `Ê[H_u]` plus, when the horizon moves,
/// `𝓛/h(τ̂)` times the sensitivity of `Ê[Φ(X(τ̂))]` to that cell's control,
/// obtained from a pathwise adjoint of the Euler map. Cells after `τ̂` get zero.
pub fn gradient<T: Real>(pl: &Pipeline<'_, T>, adj: &AdjointSolution<T>) -> Result<Gradient<T>> {
    let spec = pl.spec;
    let k = spec.dims.k;
    let (win, bwd, control) = (pl.window(), &pl.backward, &pl.control);
    let hz = win.horizon;
    let grid = *control.grid();
    let dt = grid.dt();
    let half = T::lit(0.5);
    let mut g = ControlPath::zeros(grid, k);
    for c in 0..hz.cells().min(grid.steps()) {
        // both ends use this cell's control; borrowing the next cell's value at
        // the right end would blind the gradient to alternating controls
        let uc = control.cell(c);
        let hu = mean_h_u_at(spec, win, bwd, adj, c, uc)?;
        let hu_next = mean_h_u_at(spec, win, bwd, adj, c + 1, uc)?;
        let scale = hz.cell_len(c) / dt;
        for (o, (&a, &b)) in g.cell_mut(c).iter_mut().zip(hu.iter().zip(&hu_next)) {
            *o = scale * half * (a + b);
        }
    }
    let case = pl.case();
    let script_l = pl.script_l(adj)?;
    let branch = if case == Case::Never { Branch::Fixed } else { Branch::Moving };
    if branch == Branch::Moving {
        check_h(pl.h_tau())?;
        let factor = script_l / pl.h_tau();
        let sens = constraint_sensitivity(spec, pl)?;
        for (o, s) in g.values_mut().iter_mut().zip(sens) {
            *o += factor * s;
        }
    }
    Ok(Gradient { path: g, case, branch, script_l })
}

/// `D` with `d/dρ Ê[Φ(X^{u+ρv}(τ̂))] = Σ_c dt·D_c·v_c` at fixed `τ̂`.
fn constraint_sensitivity<T: Real>(spec: &ProblemSpec<T>, pl: &Pipeline<'_, T>) -> Result<Vec<T>> {
    let dims = spec.dims;
    let (n, d, k) = (dims.n, dims.d, dims.k);
    let (win, control) = (pl.window(), &pl.control);
    let hz = win.horizon;
    let grid = *control.grid();
    let mut out = vec![T::zero(); grid.steps() * k];
    let mut lin = Lin::new(spec);
    let (mut lam, mut lam_dt, mut lam_dw) = (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n * d]);
    let (mut step, mut contrib) = (vec![T::zero(); n], vec![T::zero(); k]);
    for p in 0..win.paths {
        lin.ev.set(hz.tau, win.x(p, hz.tail()), &[], &[], &[]);
        lin.ev.grad(&spec.coef.phi, Block::X, &mut lam)?;
        for c in (0..hz.cells()).rev() {
            let delta = hz.cell_len(c);
            if delta == T::zero() {
                continue;
            }
            let cc = hz.control_cell(c);
            lin.ev.set(hz.time(c), win.x(p, c), &[], &[], control.cell(cc));
            let dw = win.dw(p, c);
            for r in 0..n {
                lam_dt[r] = lam[r] * delta;
                for j in 0..d {
                    lam_dw[r * d + j] = lam[r] * dw[j];
                }
            }
            lin.forward_t_mul(Block::U, &lam_dt, &lam_dw, &mut contrib)?;
            for (o, &v) in out[cc * k..(cc + 1) * k].iter_mut().zip(&contrib) {
                *o += v;
            }
            lin.forward_t_mul(Block::X, &lam_dt, &lam_dw, &mut step)?;
            for (l, &s) in lam.iter_mut().zip(&step) {
                *l += s;
            }
        }
    }
    let scale = T::from_usize_lossy(win.paths) * grid.dt();
    out.iter_mut().for_each(|o| *o /= scale);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow<T> {
    pub iter: usize,
    pub cost: T,
    pub tau_hat: T,
    /// Step accepted to reach this iterate (zero for the initial point).
    pub step: T,
    /// `‖u − Proj(u − ∇J)‖_∞` at this iterate.
    pub grad_norm: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeResult<T> {
    pub control: ControlPath<T>,
    pub cost: T,
    pub tau_hat: T,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<TraceRow<T>>,
}

fn projected_norm<T: Real>(spec: &ProblemSpec<T>, u: &ControlPath<T>, g: &ControlPath<T>) -> T {
    let moved = spec.projected(&u.axpy(-T::one(), g));
    moved.values().iter().zip(u.values()).fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
}

/// Cells past `τ̂` do not enter `J` at the current horizon, but they decide
/// the one-sided derivative once `τ̂` moves into them. Left at zero gradient
/// they stay frozen and can pin the iterate at a kink, so they inherit the
/// gradient of the last active cell.
fn search_direction<T: Real>(pl: &Pipeline<'_, T>, g: &ControlPath<T>) -> ControlPath<T> {
    let mut dir = g.clone();
    let active = pl.horizon().cells().min(g.cells());
    if active == 0 || active == g.cells() {
        return dir;
    }
    let last = g.cell(active - 1).to_vec();
    for c in active..g.cells() {
        dir.cell_mut(c).copy_from_slice(&last);
    }
    dir
}

/// Armijo-backtracked projected gradient from `init`, with the master seed held
/// fixed so every cost evaluation sees the same Brownian sample.
pub fn optimize<T: Real>(spec: &ProblemSpec<T>, init: &ControlPath<T>, settings: &Settings, opts: &OptimizerOptions) -> Result<OptimizeResult<T>> {
    const MAX_FAILURES: usize = 40;
    spec.check_control(init)?;
    let mut u = init.clone();
    let mut pl = Pipeline::run(spec, &u, settings)?;
    let mut trace = Vec::new();
    let mut accepted = T::zero();
    for iter in 0..opts.max_iters {
        let adj = pl.adjoint()?;
        let g = gradient(&pl, &adj)?.path;
        let dir = search_direction(&pl, &g);
        let norm = projected_norm(spec, &u, &dir);
        trace.push(TraceRow { iter, cost: pl.cost, tau_hat: pl.tau(), step: accepted, grad_norm: norm });
        if norm <= T::lit(opts.grad_tol) {
            let (cost, tau_hat) = (pl.cost, pl.tau());
            return Ok(OptimizeResult { control: u, cost, tau_hat, iterations: iter + 1, converged: true, trace });
        }
        let mut step = T::lit(opts.step0);
        let mut failures = 0;
        loop {
            let cand = spec.projected(&u.axpy(-step, &dir));
            let diff = cand.axpy(-T::one(), &u);
            let next = Pipeline::run(spec, &cand, settings)?;
            if next.cost <= pl.cost + T::lit(opts.armijo_c) * g.dot(&diff) {
                u = cand;
                pl = next;
                accepted = step;
                break;
            }
            failures += 1;
            if failures >= MAX_FAILURES {
                return Err(Error::LineSearchStalled { iteration: iter, failures });
            }
            step *= T::lit(opts.shrink);
        }
    }
    let (cost, tau_hat) = (pl.cost, pl.tau());
    Ok(OptimizeResult { control: u, cost, tau_hat, iterations: opts.max_iters, converged: false, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin;
    use crate::smp::gateaux_cost;

    #[test]
    fn gradient_pairs_with_gateaux() {
        let spec = builtin::<f64>("paper-example").unwrap();
        let u = ControlPath::constant(spec.grid(2000).unwrap(), &[1.0]);
        let pl = Pipeline::run(&spec, &u, &Settings::default()).unwrap();
        let g = gradient(&pl, &pl.adjoint().unwrap()).unwrap();
        let v = ControlPath::constant(*u.grid(), &[1.0]);
        let want = 2f64.ln() - 0.5;
        assert!((g.path.dot(&v) - want).abs() < 0.01 * want);
        let gat = gateaux_cost(&pl, &v).unwrap().value;
        assert!((g.path.dot(&v) - gat).abs() < 0.01 * want);
    }

    #[test]
    fn never_case_gradient_is_h_u() {
        let spec = builtin::<f64>("classical-example").unwrap();
        let u = ControlPath::constant(spec.grid(100).unwrap(), &[1.5]);
        let pl = Pipeline::run(&spec, &u, &Settings::default()).unwrap();
        let g = gradient(&pl, &pl.adjoint().unwrap()).unwrap();
        assert!(g.path.values().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn stationary_start_returns_at_once() {
        let spec = builtin::<f64>("classical-example").unwrap();
        let u = ControlPath::constant(spec.grid(100).unwrap(), &[1.0]);
        let r = optimize(&spec, &u, &Settings::default(), &OptimizerOptions::default()).unwrap();
        assert_eq!(r.iterations, 1);
        assert!(r.converged);
        assert_eq!(r.control, u);
    }

    #[test]
    fn classical_example_descends_to_lower_bound() {
        let spec = builtin::<f64>("classical-example").unwrap();
        let u = ControlPath::constant(spec.grid(100).unwrap(), &[2.0]);
        let r = optimize(&spec, &u, &Settings::default(), &OptimizerOptions::default()).unwrap();
        assert!(r.converged);
        assert!((r.cost - 1.0).abs() < 1e-9);
        assert!(r.trace.windows(2).all(|w| w[1].cost <= w[0].cost));
    }
}

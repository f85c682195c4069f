//! Variational equations, the Gateaux derivative of the cost, the maximum-principle
//! margins and the ρ-convergence harness.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{solve_p, tail_terms, AdjointSolution, Lin};
use crate::bsde::{mean_rows, regression_backward, rk4_backward, BackwardSolution, SolverMode};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{Block, ControlPath, ProblemSpec};
use crate::pipeline::Pipeline;
use crate::real::Real;
use crate::stopping::{check_h, lerp_rows, Case, Horizon, Window};

/// Which reading of the horizon motion a quantity uses: the terminal time moves
/// with the control, or it is held fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Moving,
    Fixed,
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::Moving => "moving",
            Branch::Fixed => "fixed",
        })
    }
}

/// Branches the margins of a case are evaluated on.
pub fn branches(case: Case) -> &'static [Branch] {
    match case {
        Case::BeforeT => &[Branch::Moving],
        Case::AtT => &[Branch::Moving, Branch::Fixed],
        Case::Never => &[Branch::Fixed],
    }
}

/// `ξ`, `η`, `ζ` and the terminal value `κ` on a window.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalSolution<T: Real> {
    pub horizon: Horizon<T>,
    pub paths: usize,
    pub n: usize,
    pub m: usize,
    pub d: usize,
    /// `M × (j+2) × n`.
    pub xi: Vec<T>,
    /// `M × (j+2) × m`.
    pub eta: Vec<T>,
    /// `M × (j+1) × m·d`.
    pub zeta: Vec<T>,
    /// `M × m`.
    pub kappa: Vec<T>,
}

impl<T: Real> VariationalSolution<T> {
    pub fn xi(&self, p: usize, idx: usize) -> &[T] {
        row(&self.xi, self.horizon.len(), self.n, p, idx)
    }

    pub fn eta(&self, p: usize, idx: usize) -> &[T] {
        row(&self.eta, self.horizon.len(), self.m, p, idx)
    }

    pub fn zeta(&self, p: usize, c: usize) -> &[T] {
        row(&self.zeta, self.horizon.cells(), self.m * self.d, p, c)
    }

    pub fn mean_xi(&self, idx: usize) -> Vec<T> {
        mean_rows(self.paths, self.n, |p| self.xi(p, idx))
    }

    pub fn mean_eta(&self, idx: usize) -> Vec<T> {
        mean_rows(self.paths, self.m, |p| self.eta(p, idx))
    }

    pub fn mean_kappa(&self) -> Vec<T> {
        mean_rows(self.paths, self.m, |p| &self.kappa[p * self.m..(p + 1) * self.m])
    }
}

fn row<T>(v: &[T], per_path: usize, dim: usize, p: usize, i: usize) -> &[T] {
    let at = (p * per_path + i) * dim;
    &v[at..at + dim]
}

/// Euler–Maruyama for `dξ = (f_x ξ + f_u v)dt + (σ_x ξ + σ_u v)dW`, `ξ(0) = 0`,
/// driven by the window's increments.
pub fn variational_forward<T: Real>(spec: &ProblemSpec<T>, win: &Window<T>, control: &ControlPath<T>, v: &ControlPath<T>) -> Result<Vec<T>> {
    let dims = spec.dims;
    let (n, d) = (dims.n, dims.d);
    let hz = win.horizon;
    let len = hz.len();
    let coef = &spec.coef;
    let mut xi = vec![T::zero(); win.paths * len * n];
    let outcomes: Vec<Result<()>> = xi
        .par_chunks_mut(len * n)
        .enumerate()
        .map_init(
            || (Lin::new(spec), vec![T::zero(); n], vec![T::zero(); n * d]),
            |(lin, drift, diff), (p, xs)| {
                for c in 0..hz.cells() {
                    let delta = hz.cell_len(c);
                    let (head, tail) = xs.split_at_mut((c + 1) * n);
                    let cur = &head[c * n..];
                    let next = &mut tail[..n];
                    if delta == T::zero() {
                        next.copy_from_slice(cur);
                        continue;
                    }
                    let cc = hz.control_cell(c);
                    lin.ev.set(hz.time(c), win.x(p, c), &[], &[], control.cell(cc));
                    drift.iter_mut().for_each(|x| *x = T::zero());
                    diff.iter_mut().for_each(|x| *x = T::zero());
                    lin.jac_mul(&coef.f, Block::X, cur, drift)?;
                    lin.jac_mul(&coef.f, Block::U, v.cell(cc), drift)?;
                    lin.jac_mul(&coef.sigma, Block::X, cur, diff)?;
                    lin.jac_mul(&coef.sigma, Block::U, v.cell(cc), diff)?;
                    let dw = win.dw(p, c);
                    for r in 0..n {
                        let mut x = cur[r] + drift[r] * delta;
                        for j in 0..d {
                            x += diff[r * d + j] * dw[j];
                        }
                        if !x.is_finite() {
                            return Err(Error::NonFiniteState { path: p, step: c + 1 });
                        }
                        next[r] = x;
                    }
                }
                Ok(())
            },
        )
        .collect();
    outcomes.into_iter().collect::<Result<()>>()?;
    Ok(xi)
}

/// `κ = a·Ψ̃ + Ψ_x ξ + b·g` at the tail of the window, per path.
#[allow(clippy::too_many_arguments)]
pub fn kappa_with<T: Real>(
    spec: &ProblemSpec<T>,
    win: &Window<T>,
    bwd: &BackwardSolution<T>,
    control: &ControlPath<T>,
    xi: &[T],
    a: T,
    b: T,
) -> Result<Vec<T>> {
    let dims = spec.dims;
    let (n, m) = (dims.n, dims.m);
    let hz = win.horizon;
    let tail = hz.tail();
    let mut kappa = vec![T::zero(); win.paths * m];
    let mut lin = Lin::new(spec);
    for p in 0..win.paths {
        lin.ev.set(hz.tau, win.x(p, tail), &[], &[], &[]);
        lin.jac_mul(&spec.coef.psi, Block::X, row(xi, hz.len(), n, p, tail), &mut kappa[p * m..(p + 1) * m])?;
    }
    if a != T::zero() || b != T::zero() {
        let tt = tail_terms(spec, win, bwd, control)?;
        for (i, k) in kappa.iter_mut().enumerate() {
            *k += a * tt.psi_tilde[i] + b * tt.g[i];
        }
    }
    Ok(kappa)
}

/// Solves `dη = (g_x ξ + g_y η + g_z ζ + g_u v)dt + ζ dW`, `η(τ̂) = κ`.
#[allow(clippy::too_many_arguments)]
pub fn variational_backward<T: Real>(
    spec: &ProblemSpec<T>,
    win: &Window<T>,
    bwd: &BackwardSolution<T>,
    control: &ControlPath<T>,
    v: &ControlPath<T>,
    xi: Vec<T>,
    kappa: Vec<T>,
) -> Result<VariationalSolution<T>> {
    let dims = spec.dims;
    let (n, m, d) = (dims.n, dims.m, dims.d);
    let hz = win.horizon;
    let len = hz.len();
    let g = &spec.coef.g;
    let (eta, zeta) = match bwd.mode {
        SolverMode::Deterministic => {
            let mut lin = Lin::new(spec);
            let (mut x, mut y, mut xw) = (vec![T::zero(); n], vec![T::zero(); m], vec![T::zero(); n]);
            let eta = rk4_backward(&hz, m, &kappa, |c, w, e, out| {
                win.x_at(0, c, w, &mut x);
                bwd.y_at(0, c, w, &mut y);
                lerp_rows(row(&xi, len, n, 0, c), row(&xi, len, n, 0, c + 1), hz.weight(c, w), &mut xw);
                let cc = hz.control_cell(c);
                lin.ev.set(hz.time_in(c, w), &x, &y, &[], control.cell(cc));
                linear_driver(&mut lin, g, &xw, e, &[], v.cell(cc), out)
            })?;
            (eta, vec![T::zero(); hz.cells() * m * d])
        }
        SolverMode::Regression { degree } => regression_backward(win, degree, m, &kappa, || Lin::new(spec), |lin, p, c, e, z, out| {
            let cc = hz.control_cell(c);
            lin.ev.set(hz.time(c), win.x(p, c), bwd.y(p, c), bwd.z(p, c), control.cell(cc));
            linear_driver(lin, g, row(&xi, len, n, p, c), e, z, v.cell(cc), out)
        })?,
    };
    Ok(VariationalSolution { horizon: hz, paths: win.paths, n, m, d, xi, eta, zeta, kappa })
}

fn linear_driver<'a, T: Real>(lin: &mut Lin<'a, T>, g: &'a [crate::model::Coef<T>], xi: &[T], eta: &[T], zeta: &[T], v: &[T], out: &mut [T]) -> Result<()> {
    out.iter_mut().for_each(|o| *o = T::zero());
    lin.jac_mul(g, Block::X, xi, out)?;
    lin.jac_mul(g, Block::Y, eta, out)?;
    if !zeta.is_empty() {
        lin.jac_mul(g, Block::Z, zeta, out)?;
    }
    lin.jac_mul(g, Block::U, v, out)
}

/// Full variational solve with `κ = a·Ψ̃ + Ψ_x ξ + b·g`.
#[allow(clippy::too_many_arguments)]
pub fn variational<T: Real>(
    spec: &ProblemSpec<T>,
    win: &Window<T>,
    bwd: &BackwardSolution<T>,
    control: &ControlPath<T>,
    v: &ControlPath<T>,
    a: T,
    b: T,
) -> Result<VariationalSolution<T>> {
    let xi = variational_forward(spec, win, control, v)?;
    let kappa = kappa_with(spec, win, bwd, control, &xi, a, b)?;
    variational_backward(spec, win, bwd, control, v, xi, kappa)
}

/// The Gateaux-derivative formula for given variational processes. `tau_rate` is
/// the τ-derivative on the moving branch and zero on the fixed one.
pub fn gateaux_from<T: Real>(
    spec: &ProblemSpec<T>,
    win: &Window<T>,
    bwd: &BackwardSolution<T>,
    control: &ControlPath<T>,
    v: &ControlPath<T>,
    var: &VariationalSolution<T>,
    tau_rate: T,
) -> Result<T> {
    let hz = win.horizon;
    let coef = &spec.coef;
    let mut lin = Lin::new(spec);
    let half = T::lit(0.5);
    let mm = T::from_usize_lossy(win.paths);
    let mut running = T::zero();
    for c in 0..hz.cells() {
        let len = hz.cell_len(c);
        if len == T::zero() {
            continue;
        }
        let cc = hz.control_cell(c);
        let (u, vc) = (control.cell(cc), v.cell(cc));
        let mut acc = T::zero();
        for p in 0..win.paths {
            let z = bwd.z(p, c);
            let zeta = var.zeta(p, c);
            for idx in [c, c + 1] {
                lin.ev.set(hz.time(idx), win.x(p, idx), bwd.y(p, idx), z, u);
                acc += lin.grad_dot(&coef.l, Block::X, var.xi(p, idx))?
                    + lin.grad_dot(&coef.l, Block::Y, var.eta(p, idx))?
                    + lin.grad_dot(&coef.l, Block::Z, zeta)?
                    + lin.grad_dot(&coef.l, Block::U, vc)?;
            }
        }
        running += half * acc / mm * len;
    }
    let tail = hz.tail();
    let mut terminal = T::zero();
    for p in 0..win.paths {
        lin.ev.set(hz.tau, win.x(p, tail), &[], &[], &[]);
        terminal += lin.grad_dot(&coef.beta, Block::X, var.xi(p, tail))?;
    }
    terminal /= mm;
    lin.ev.set(T::zero(), &[], &bwd.y0(), &[], &[]);
    let recursive = lin.grad_dot(&coef.gamma, Block::Y, &var.mean_eta(0))?;
    let mut total = running + terminal + recursive;
    if tau_rate != T::zero() {
        let tt = tail_terms(spec, win, bwd, control)?;
        let motion: T = tt.beta_tilde.iter().zip(&tt.l).map(|(&b, &l)| b + l).sum::<T>() / mm;
        total -= motion * tau_rate;
    }
    Ok(total)
}

/// Gateaux derivative of the cost along `v`. For `AtT` the fixed-horizon value is
/// carried in `alternative`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateauxResult<T> {
    pub case: Case,
    pub value: T,
    pub alternative: Option<T>,
    pub tau_rate: T,
}

pub fn gateaux_cost<T: Real>(pl: &Pipeline<'_, T>, v: &ControlPath<T>) -> Result<GateauxResult<T>> {
    let (spec, win, bwd, u) = (pl.spec, pl.window(), &pl.backward, &pl.control);
    let xi = variational_forward(spec, win, u, v)?;
    let fixed = |xi: Vec<T>| -> Result<T> {
        let kappa = kappa_with(spec, win, bwd, u, &xi, T::zero(), T::zero())?;
        let var = variational_backward(spec, win, bwd, u, v, xi, kappa)?;
        gateaux_from(spec, win, bwd, u, v, &var, T::zero())
    };
    let case = pl.case();
    if case == Case::Never {
        return Ok(GateauxResult { case, value: fixed(xi)?, alternative: None, tau_rate: T::zero() });
    }
    let rate = pl.tau_derivative(v)?.value;
    let kappa = kappa_with(spec, win, bwd, u, &xi, -rate, rate)?;
    let alternative = if case == Case::AtT { Some(fixed(xi.clone())?) } else { None };
    let var = variational_backward(spec, win, bwd, u, v, xi, kappa)?;
    let value = gateaux_from(spec, win, bwd, u, v, &var, rate)?;
    Ok(GateauxResult { case, value, alternative, tau_rate: rate })
}

/// Probe controls and time nodes for the margin check.
#[derive(Debug, Clone, PartialEq)]
pub struct SmpOptions<T> {
    pub u_probes: Vec<Vec<T>>,
    pub t_stride: Option<usize>,
    pub t_nodes: usize,
    /// When false the `𝓛·h̄/h` term is dropped on every branch.
    pub horizon_term: bool,
}

impl<T: Real> SmpOptions<T> {
    /// Five evenly spaced points of the box, 50 time nodes.
    pub fn new(spec: &ProblemSpec<T>) -> Self {
        SmpOptions { u_probes: default_probes(spec, 5), t_stride: None, t_nodes: 50, horizon_term: true }
    }

    pub fn from_config(spec: &ProblemSpec<T>, cfg: &RunConfig) -> Result<Self> {
        let k = spec.dims.k;
        let u_probes = match &cfg.smp.u_probes {
            None => default_probes(spec, 5),
            Some(list) => list
                .iter()
                .enumerate()
                .map(|(i, v)| v.expand(k, &format!("smp.u_probes[{i}]")).map(|v| v.into_iter().map(T::lit).collect()))
                .collect::<Result<_>>()?,
        };
        Ok(SmpOptions { u_probes, t_stride: cfg.smp.t_stride, t_nodes: cfg.smp.t_nodes, horizon_term: true })
    }
}

pub fn default_probes<T: Real>(spec: &ProblemSpec<T>, count: usize) -> Vec<Vec<T>> {
    let last = T::from_usize_lossy(count.max(2) - 1);
    (0..count.max(2))
        .map(|i| {
            let w = T::from_usize_lossy(i) / last;
            spec.u_lo.iter().zip(&spec.u_hi).map(|(&lo, &hi)| lo + w * (hi - lo)).collect()
        })
        .collect()
}

/// Grid nodes `≤ j` probed by the margin check.
pub fn probe_nodes(j: usize, t_stride: Option<usize>, t_nodes: usize) -> Vec<usize> {
    let mut out: Vec<usize> = match t_stride {
        Some(s) => (0..=j).step_by(s.max(1)).collect(),
        None if t_nodes <= 1 || j == 0 => vec![0],
        None => (0..t_nodes).map(|k| ((k * j) as f64 / (t_nodes - 1) as f64).round() as usize).collect(),
    };
    out.dedup();
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginRow<T> {
    pub node: usize,
    pub t: T,
    pub u: Vec<T>,
    pub margin: T,
    pub branch: Branch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmpReport<T> {
    pub case: Case,
    pub tau_hat: T,
    pub script_l: T,
    pub h_tau: T,
    pub rows: Vec<MarginRow<T>>,
    pub min_margin: T,
    pub argmin_t: T,
    pub argmin_u: Vec<T>,
    /// Minimum over the rows of each evaluated branch.
    pub branch_min: Vec<(Branch, T)>,
}

/// Margins `Ê[H_u]·(u − ū(t_i)) + 𝓛·h̄(u − ū(t_i), t_i)/h(τ̂)` over probes and nodes.
/// The direction in `h̄` is held constant in time. Ties in the minimum go to the
/// latest time.
pub fn check_smp<T: Real>(pl: &Pipeline<'_, T>, adj: &AdjointSolution<T>, opts: &SmpOptions<T>) -> Result<SmpReport<T>> {
    let spec = pl.spec;
    let k = spec.dims.k;
    let (win, bwd, control) = (pl.window(), &pl.backward, &pl.control);
    let hz = win.horizon;
    let case = pl.case();
    let script_l = pl.script_l(adj)?;
    let wanted = branches(case);
    let use_moving = opts.horizon_term && wanted.contains(&Branch::Moving);
    let unit_hbar: Vec<Vec<T>> = if use_moving {
        check_h(pl.h_tau())?;
        let grid = *control.grid();
        (0..k)
            .map(|comp| {
                let e = ControlPath::from_fn(grid, k, |_| (0..k).map(|i| if i == comp { T::one() } else { T::zero() }).collect());
                pl.h_bar(&e).map(|c| c.values)
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let mut rows = Vec::new();
    for i in probe_nodes(hz.j, opts.t_stride, opts.t_nodes) {
        let hu = crate::adjoint::mean_h_u(spec, win, bwd, adj, control, i)?;
        let ubar = control.cell(hz.control_cell(i));
        for probe in &opts.u_probes {
            if probe.len() != k {
                return Err(Error::DimensionMismatch(format!("probe has {} components, expected {k}", probe.len())));
            }
            let w: Vec<T> = probe.iter().zip(ubar).map(|(&a, &b)| a - b).collect();
            let fixed: T = hu.iter().zip(&w).map(|(&a, &b)| a * b).sum();
            for &branch in wanted {
                let margin = match branch {
                    Branch::Moving if use_moving => {
                        let hbar: T = (0..k).map(|c| w[c] * unit_hbar[c][i]).sum();
                        fixed + script_l * hbar / pl.h_tau()
                    }
                    _ => fixed,
                };
                rows.push(MarginRow { node: i, t: hz.time(i), u: probe.clone(), margin, branch });
            }
        }
    }
    if rows.iter().any(|r| !r.margin.is_finite()) {
        return Err(Error::NonFiniteAdjoint(hz.j));
    }
    let mut best = 0;
    for (i, r) in rows.iter().enumerate() {
        let b = &rows[best];
        if r.margin < b.margin || (r.margin == b.margin && r.t >= b.t) {
            best = i;
        }
    }
    let branch_min = wanted
        .iter()
        .map(|&b| (b, rows.iter().filter(|r| r.branch == b).fold(T::infinity(), |m, r| m.min(r.margin))))
        .collect();
    let (min_margin, argmin_t, argmin_u) = rows.get(best).map(|r| (r.margin, r.t, r.u.clone())).unwrap_or((T::zero(), T::zero(), Vec::new()));
    Ok(SmpReport { case, tau_hat: pl.tau(), script_l, h_tau: pl.h_tau(), rows, min_margin, argmin_t, argmin_u, branch_min })
}

/// One row of the ρ-convergence table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhoRow<T> {
    pub rho: T,
    pub tau_rho: T,
    /// `|τ^{u_ρ} − τ̂|`.
    pub d_tau: T,
    /// `max_t Ê|η^ρ − η|²`.
    pub err_eta: T,
    /// `max_t Ê|(Y^ρ − Y)/ρ − η^ρ|²`.
    pub err_y: T,
    /// `max_t Ê|p^ρ − p|²`.
    pub err_p: T,
}

/// For each `ρ`: re-runs the pipeline at `ū + ρv` with the same seed and compares the
/// ρ-moving variational pair and adjoint on `[0, τ̂ ∧ τ^{u_ρ}]` with the limiting ones.
pub fn rho_convergence<T: Real>(pl: &Pipeline<'_, T>, v: &ControlPath<T>, rhos: &[T]) -> Result<Vec<RhoRow<T>>> {
    let spec = pl.spec;
    let (win, bwd, control) = (pl.window(), &pl.backward, &pl.control);
    let hz = win.horizon;
    let (n, m) = (spec.dims.n, spec.dims.m);
    let adj = pl.adjoint()?;
    let rate = if pl.case() == Case::Never { T::zero() } else { pl.tau_derivative(v)?.value };
    let limit = variational(spec, win, bwd, control, v, -rate, rate)?;
    let tau = pl.tau();
    let mm = T::from_usize_lossy(win.paths);
    let sq = |a: &[T], b: &[T], scale: T, c: &[T]| -> T { (0..a.len()).map(|r| (((a[r] - b[r]) * scale) - c[r]).powi(2)).sum() };
    let zeros_m = vec![T::zero(); m];
    let zeros_n = vec![T::zero(); n];
    let mut out = Vec::with_capacity(rhos.len());
    for &rho in rhos {
        let moved = control.axpy(rho, v);
        if !spec.contains(&moved) {
            return Err(Error::DirectionLeavesBox);
        }
        let other = Pipeline::run(spec, &moved, &pl.settings)?;
        let tau_rho = other.tau();
        let s = tau.min(tau_rho);
        let hs = Horizon::new(hz.grid, s);
        let ws = Window::new(&pl.terminal.ensemble, s);
        let bs = bwd.restrict(hs);
        let a = (tau_rho - tau) / rho;
        let moving = variational(spec, &ws, &bs, control, v, a, -a)?;
        let adj_s = adj.restrict(hs);
        let p_rho = solve_p(spec, &ws, &bs, adj_s.q_all(), control)?;
        let (mut err_eta, mut err_y, mut err_p) = (T::zero(), T::zero(), T::zero());
        for i in 0..=hs.j {
            let (mut e, mut y, mut pp) = (T::zero(), T::zero(), T::zero());
            for p in 0..win.paths {
                e += sq(moving.eta(p, i), limit.eta(p, i), T::one(), &zeros_m);
                y += sq(other.backward.y(p, i), bwd.y(p, i), T::one() / rho, moving.eta(p, i));
                pp += sq(p_rho.p(p, i), adj.p(p, i), T::one(), &zeros_n);
            }
            err_eta = err_eta.max(e / mm);
            err_y = err_y.max(y / mm);
            err_p = err_p.max(pp / mm);
        }
        out.push(RhoRow { rho, tau_rho, d_tau: (tau_rho - tau).abs(), err_eta, err_y, err_p });
    }
    Ok(out)
}

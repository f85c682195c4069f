//! Terminal time `τ = inf{t : E[Φ(X(t))] ≥ α} ∧ T`, its case split, the drift
//! `h(t)` of the mean constraint and its directional derivative `h̄`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Block, ControlPath, Evaluator, ProblemSpec, TimeGrid};
use crate::real::Real;
use crate::sim::{mean_and_stderr, mean_functional, mean_over_paths, simulate_forward, Curve, PathEnsemble};

/// The three terminal-time cases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Case {
    /// The constraint is met strictly before the horizon.
    BeforeT,
    /// The constraint is met within the band `at_T_band_cells·dt` of the horizon.
    AtT,
    /// The constraint is never met; `τ = T`.
    Never,
}

impl fmt::Display for Case {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Case::BeforeT => "BeforeT",
            Case::AtT => "AtT",
            Case::Never => "Never",
        })
    }
}

/// The grid cut at `τ`: full nodes `0..=j` plus a tail node at `τ = t_j + θ·dt`.
///
/// Truncated paths have `j + 2` entries, the last one at `τ`. Cell `c < j` is a
/// full grid cell; cell `j` runs from `t_j` to `τ` and may have zero length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Horizon<T> {
    pub tau: T,
    pub j: usize,
    pub theta: T,
    pub grid: TimeGrid<T>,
}

impl<T: Real> Horizon<T> {
    pub fn new(grid: TimeGrid<T>, tau: T) -> Self {
        let steps = grid.steps();
        let tau = tau.max(T::zero()).min(grid.horizon());
        let mut j = (tau / grid.dt()).floor().to_usize().unwrap_or(steps).min(steps);
        // guard against t_j landing just above tau after rounding
        while j > 0 && grid.node(j) > tau {
            j -= 1;
        }
        let theta = if j == steps { T::zero() } else { ((tau - grid.node(j)) / grid.dt()).max(T::zero()).min(T::one()) };
        Horizon { tau, j, theta, grid }
    }

    /// Entries of a truncated path.
    pub fn len(&self) -> usize {
        self.j + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of cells, the partial one included.
    pub fn cells(&self) -> usize {
        self.j + 1
    }

    pub fn tail(&self) -> usize {
        self.j + 1
    }

    /// Cell length as a fraction of `dt`.
    pub fn frac(&self, c: usize) -> T {
        if c < self.j {
            T::one()
        } else {
            self.theta
        }
    }

    pub fn cell_len(&self, c: usize) -> T {
        self.frac(c) * self.grid.dt()
    }

    /// Time of truncated entry `idx`.
    pub fn time(&self, idx: usize) -> T {
        if idx <= self.j {
            self.grid.node(idx)
        } else {
            self.tau
        }
    }

    /// Time at offset `w·dt` into cell `c`.
    pub fn time_in(&self, c: usize, w: T) -> T {
        self.grid.node(c) + w * self.grid.dt()
    }

    /// Control cell active on truncated cell `c` (and at the tail).
    pub fn control_cell(&self, c: usize) -> usize {
        c.min(self.grid.steps() - 1)
    }

    /// Interpolation weight between entries `c` and `c+1` at offset `w·dt` into cell `c`.
    pub fn weight(&self, c: usize, w: T) -> T {
        if c < self.j {
            w
        } else if self.theta > T::zero() {
            w / self.theta
        } else {
            T::zero()
        }
    }

    /// Cell whose `Z`-type value describes the tail: the partial cell, or the
    /// last full one when the partial cell is empty.
    pub fn tail_cell(&self) -> usize {
        if self.theta > T::zero() || self.j == 0 {
            self.j
        } else {
            self.j - 1
        }
    }

    /// Truncates a per-node array (`(N+1) × dim`) of one path.
    pub fn truncate_into(&self, full: impl Fn(usize) -> Vec<T>, dim: usize, out: &mut Vec<T>) {
        for i in 0..=self.j {
            out.extend(full(i));
        }
        let a = full(self.j);
        if self.theta > T::zero() {
            let b = full(self.j + 1);
            out.extend((0..dim).map(|r| a[r] + self.theta * (b[r] - a[r])));
        } else {
            out.extend(a);
        }
    }
}

/// Linear interpolation helper on truncated rows.
pub(crate) fn lerp_rows<T: Real>(a: &[T], b: &[T], w: T, out: &mut [T]) {
    for r in 0..out.len() {
        out[r] = a[r] + w * (b[r] - a[r]);
    }
}

/// The ensemble restricted to `[0, τ]`, with the tail state and increment interpolated.
#[derive(Debug, Clone, PartialEq)]
pub struct Window<T: Real> {
    pub horizon: Horizon<T>,
    pub paths: usize,
    pub n: usize,
    pub d: usize,
    /// `M × (j+2) × n`.
    x: Vec<T>,
    /// `M × (j+1) × d`; the partial cell carries `θ·dW_j`.
    dw: Vec<T>,
}

impl<T: Real> Window<T> {
    pub fn new(ens: &PathEnsemble<T>, tau: T) -> Self {
        let horizon = Horizon::new(*ens.grid(), tau);
        let (n, d, m) = (ens.n(), ens.d(), ens.paths());
        let mut x = Vec::with_capacity(m * horizon.len() * n);
        let mut dw = Vec::with_capacity(m * horizon.cells() * d);
        for p in 0..m {
            horizon.truncate_into(|i| ens.x(p, i).to_vec(), n, &mut x);
            for c in 0..horizon.cells() {
                if c < horizon.j {
                    dw.extend_from_slice(ens.dw(p, c));
                } else if horizon.theta > T::zero() {
                    dw.extend(ens.dw(p, c).iter().map(|&w| w * horizon.theta));
                } else {
                    dw.extend(std::iter::repeat_n(T::zero(), d));
                }
            }
        }
        Window { horizon, paths: m, n, d, x, dw }
    }

    pub fn x(&self, p: usize, idx: usize) -> &[T] {
        let at = (p * self.horizon.len() + idx) * self.n;
        &self.x[at..at + self.n]
    }

    pub fn dw(&self, p: usize, c: usize) -> &[T] {
        let at = (p * self.horizon.cells() + c) * self.d;
        &self.dw[at..at + self.d]
    }

    /// State at offset `w·dt` into cell `c`.
    pub fn x_at(&self, p: usize, c: usize, w: T, out: &mut [T]) {
        lerp_rows(self.x(p, c), self.x(p, c + 1), self.horizon.weight(c, w), out);
    }

    /// Variance of the increment over cell `c` (`θ²·dt` for the partial cell).
    pub fn dw_var(&self, c: usize) -> T {
        let f = self.horizon.frac(c);
        f * f * self.horizon.grid.dt()
    }

    pub fn deterministic(&self) -> bool {
        self.paths == 1 && self.dw.iter().all(|w| *w == T::zero())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoppingResult<T> {
    pub tau_hat: T,
    pub cross_index: Option<usize>,
    pub case: Case,
    pub m_curve: Curve<T>,
    pub h_curve: Curve<T>,
}

/// Locates the first node with `m(t_i) ≥ α` and interpolates linearly between
/// `t_{i-1}` and `t_i`. Crossings within `band_cells·dt` of `T` are `AtT`.
pub fn stopping_time<T: Real>(spec: &ProblemSpec<T>, ens: &PathEnsemble<T>, band_cells: usize) -> Result<StoppingResult<T>> {
    let phi = &spec.coef.phi;
    let dims = spec.dims;
    let m_curve = mean_functional(ens, |x| {
        let mut p = vec![T::zero(); dims.slots()];
        p[dims.x_offset()..dims.y_offset()].copy_from_slice(x);
        phi.value(&p)
    })?;
    let h_curve = h_process(spec, ens)?;
    let grid = *ens.grid();
    let alpha = spec.alpha;
    let cross = if spec.stopping_disabled() { None } else { m_curve.values.iter().position(|&m| m >= alpha) };
    let (tau_hat, case) = match cross {
        None => (grid.horizon(), Case::Never),
        Some(0) => (T::zero(), classify(T::zero(), &grid, band_cells)),
        Some(i) => {
            let (m0, m1) = (m_curve.values[i - 1], m_curve.values[i]);
            let w = ((alpha - m0) / (m1 - m0)).max(T::zero()).min(T::one());
            let tau = grid.node(i - 1) + w * grid.dt();
            (tau, classify(tau, &grid, band_cells))
        }
    };
    Ok(StoppingResult { tau_hat, cross_index: cross, case, m_curve, h_curve })
}

fn classify<T: Real>(tau: T, grid: &TimeGrid<T>, band_cells: usize) -> Case {
    if grid.horizon() - tau <= T::from_usize_lossy(band_cells) * grid.dt() {
        Case::AtT
    } else {
        Case::BeforeT
    }
}

/// Integrand of `h`: `Φ_x(x)ᵀ f + ½ Σ_j σ^jᵀ Φ_xx σ^j` at one point.
pub(crate) fn h_integrand<T: Real>(spec: &ProblemSpec<T>, ev: &mut Evaluator<'_, T>) -> Result<T> {
    let dims = spec.dims;
    let (n, d) = (dims.n, dims.d);
    let mut grad = vec![T::zero(); n];
    let mut f = vec![T::zero(); n];
    ev.grad(&spec.coef.phi, Block::X, &mut grad)?;
    ev.values(&spec.coef.f, &mut f)?;
    let mut h: T = grad.iter().zip(&f).map(|(&a, &b)| a * b).sum();
    if !spec.sigma_is_zero() {
        let mut sig = vec![T::zero(); n * d];
        ev.values(&spec.coef.sigma, &mut sig)?;
        let mut hess = vec![T::zero(); n * n];
        ev.hessian_x(&spec.coef.phi, &mut hess)?;
        let mut acc = T::zero();
        for j in 0..d {
            for a in 0..n {
                for b in 0..n {
                    acc += sig[a * d + j] * hess[a * n + b] * sig[b * d + j];
                }
            }
        }
        h += T::lit(0.5) * acc;
    }
    Ok(h)
}

/// Monte Carlo estimate of `h(t_i)` at every node; node `i` uses control cell `i`
/// (the last cell at `T`).
pub fn h_process<T: Real>(spec: &ProblemSpec<T>, ens: &PathEnsemble<T>) -> Result<Curve<T>> {
    let grid = *ens.grid();
    let control = ens.control();
    mean_over_paths(
        ens,
        || Evaluator::new(spec.dims, &spec.coef),
        |ev, _, i, x| {
            ev.set(grid.node(i), x, &[], &[], control.cell(i));
            h_integrand(spec, ev)
        },
    )
}

/// `h(τ)` evaluated directly at the interpolated tail state.
pub fn h_at_tau<T: Real>(spec: &ProblemSpec<T>, win: &Window<T>, control: &ControlPath<T>) -> Result<T> {
    let hz = &win.horizon;
    let u = control.cell(hz.control_cell(hz.j));
    let mut ev = Evaluator::new(spec.dims, &spec.coef);
    let mut vals = Vec::with_capacity(win.paths);
    for p in 0..win.paths {
        ev.set(hz.tau, win.x(p, hz.tail()), &[], &[], u);
        vals.push(h_integrand(spec, &mut ev)?);
    }
    Ok(mean_and_stderr(&vals).0)
}

/// Finite-difference steps used for `h̄`.
pub const HBAR_RHOS: [f64; 3] = [1e-2, 5e-3, 2.5e-3];

/// Richardson-extrapolated derivative of `map` at `u` along `v`, with common random
/// numbers left to `map`. Cells where `u + ρv` would leave the box are handled with a
/// backward difference along `-v`; the two parts add by linearity.
pub fn directional_fd<T, F>(spec: &ProblemSpec<T>, u: &ControlPath<T>, v: &ControlPath<T>, rhos: &[f64], map: F) -> Result<Vec<T>>
where
    T: Real,
    F: Fn(&ControlPath<T>) -> Result<Vec<T>>,
{
    let base = map(u)?;
    if v.is_zero() {
        return Ok(vec![T::zero(); base.len()]);
    }
    let k = spec.dims.k;
    let smallest = T::lit(rhos.iter().copied().fold(f64::INFINITY, f64::min));
    let mut forward = ControlPath::zeros(*u.grid(), k);
    let mut backward = ControlPath::zeros(*u.grid(), k);
    for (i, (&ui, &vi)) in u.values().iter().zip(v.values()).enumerate() {
        if vi == T::zero() {
            continue;
        }
        let c = i % k;
        let inside = |x: T| x >= spec.u_lo[c] && x <= spec.u_hi[c];
        if inside(ui + smallest * vi) {
            forward.values_mut()[i] = vi;
        } else if inside(ui - smallest * vi) {
            backward.values_mut()[i] = -vi;
        } else {
            return Err(Error::DirectionLeavesBox);
        }
    }
    let mut total = vec![T::zero(); base.len()];
    for (part, sign) in [(forward, T::one()), (backward, -T::one())] {
        if part.is_zero() {
            continue;
        }
        let usable: Vec<f64> = rhos.iter().copied().filter(|&r| spec.contains(&u.axpy(T::lit(r), &part))).collect();
        if usable.is_empty() {
            return Err(Error::DirectionLeavesBox);
        }
        let mut quotients = Vec::with_capacity(usable.len());
        for &r in &usable {
            let moved = map(&u.axpy(T::lit(r), &part))?;
            let rho = T::lit(r);
            quotients.push(moved.iter().zip(&base).map(|(&a, &b)| (a - b) / rho).collect::<Vec<T>>());
        }
        let d = richardson(&usable, quotients);
        for (t, v) in total.iter_mut().zip(d) {
            *t += sign * v;
        }
    }
    Ok(total)
}

/// Richardson tableau for quotients with error `a₁ρ + a₂ρ² + …`.
pub fn richardson<T: Real>(rhos: &[f64], mut rows: Vec<Vec<T>>) -> Vec<T> {
    let n = rows.len();
    for level in 1..n {
        for i in 0..(n - level) {
            let ratio = T::lit((rhos[i] / rhos[i + level]).powi(level as i32));
            let next = rows[i + 1].clone();
            for (a, b) in rows[i].iter_mut().zip(next) {
                *a = (ratio * b - *a) / (ratio - T::one());
            }
        }
    }
    rows.swap_remove(0)
}

/// `h̄(v, t_i) = lim (h^{u+ρv}(t_i) - h^u(t_i))/ρ` on every grid node, each
/// perturbed run reusing the seed.
pub fn h_bar<T: Real>(spec: &ProblemSpec<T>, control: &ControlPath<T>, v: &ControlPath<T>, paths: usize, seed: u64) -> Result<Curve<T>> {
    let values = directional_fd(spec, control, v, &HBAR_RHOS, |u| {
        let ens = simulate_forward(spec, u, paths, seed)?;
        Ok(h_process(spec, &ens)?.values)
    })?;
    let grid = *control.grid();
    Ok(Curve { grid, stderr: vec![T::zero(); values.len()], values })
}

/// `∫₀^τ h̄(v,t)/h(τ) dt` by the trapezoid rule, `h̄` interpolated at `τ`.
pub fn hbar_integral<T: Real>(hbar: &Curve<T>, horizon: &Horizon<T>, h_tau: T) -> T {
    let mut acc = T::zero();
    let vals = &hbar.values;
    for c in 0..horizon.cells() {
        let len = horizon.cell_len(c);
        if len == T::zero() {
            continue;
        }
        let a = vals[c];
        let b = if c < horizon.j { vals[c + 1] } else { a + horizon.theta * (vals[c + 1] - a) };
        acc += T::lit(0.5) * (a + b) * len;
    }
    acc / h_tau
}

/// Limit of `(τ^u - τ^{u+ρv})/ρ`. For `AtT` the second candidate (zero) is carried in
/// `alternative`; the two are never reconciled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauDerivative<T> {
    pub case: Case,
    pub value: T,
    pub alternative: Option<T>,
}

pub(crate) fn check_h<T: Real>(h_tau: T) -> Result<()> {
    if !(h_tau.abs() > T::lit(1e-8)) {
        return Err(Error::DegenerateH(h_tau.as_f64()));
    }
    Ok(())
}

pub fn tau_derivative_from<T: Real>(case: Case, hbar: &Curve<T>, horizon: &Horizon<T>, h_tau: T) -> Result<TauDerivative<T>> {
    match case {
        Case::Never => Ok(TauDerivative { case, value: T::zero(), alternative: None }),
        Case::BeforeT | Case::AtT => {
            check_h(h_tau)?;
            let value = hbar_integral(hbar, horizon, h_tau);
            let alternative = (case == Case::AtT).then(T::zero);
            Ok(TauDerivative { case, value, alternative })
        }
    }
}

/// Everything about `τ` for one control: ensemble, window, stopping result and `h(τ)`.
pub struct TerminalTime<T: Real> {
    pub ensemble: PathEnsemble<T>,
    pub stopping: StoppingResult<T>,
    pub window: Window<T>,
    pub h_tau: T,
}

impl<T: Real> TerminalTime<T> {
    pub fn compute(spec: &ProblemSpec<T>, control: &ControlPath<T>, paths: usize, seed: u64, band_cells: usize) -> Result<Self> {
        let ensemble = simulate_forward(spec, control, paths, seed)?;
        let stopping = stopping_time(spec, &ensemble, band_cells)?;
        let window = Window::new(&ensemble, stopping.tau_hat);
        let h_tau = h_at_tau(spec, &window, control)?;
        Ok(TerminalTime { ensemble, stopping, window, h_tau })
    }
}

/// `(τ^u - τ^{u+ρv})/ρ → ∫₀^τ h̄/h(τ)`, or `0` when the constraint is never met.
pub fn tau_derivative<T: Real>(
    spec: &ProblemSpec<T>,
    control: &ControlPath<T>,
    v: &ControlPath<T>,
    paths: usize,
    seed: u64,
    band_cells: usize,
) -> Result<TauDerivative<T>> {
    let tt = TerminalTime::compute(spec, control, paths, seed, band_cells)?;
    if tt.stopping.case == Case::Never {
        return Ok(TauDerivative { case: Case::Never, value: T::zero(), alternative: None });
    }
    check_h(tt.h_tau)?;
    let hbar = h_bar(spec, control, v, paths, seed)?;
    tau_derivative_from(tt.stopping.case, &hbar, &tt.window.horizon, tt.h_tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin;

    fn paper(steps: usize, u: f64) -> (ProblemSpec<f64>, ControlPath<f64>) {
        let spec = builtin::<f64>("paper-example").unwrap();
        let grid = spec.grid(steps).unwrap();
        (spec, ControlPath::constant(grid, &[u]))
    }

    #[test]
    fn horizon_geometry() {
        let grid = TimeGrid::<f64>::new(1.0, 10).unwrap();
        let h = Horizon::new(grid, 0.35);
        assert_eq!(h.j, 3);
        assert!((h.theta - 0.5).abs() < 1e-12);
        assert_eq!(h.len(), 5);
        let end = Horizon::new(grid, 1.0);
        assert_eq!((end.j, end.theta), (10, 0.0));
        assert_eq!(end.control_cell(end.j), 9);
    }

    #[test]
    fn paper_tau_is_ln2() {
        let (spec, u) = paper(10_000, 1.0);
        let ens = simulate_forward(&spec, &u, 1, 0).unwrap();
        let s = stopping_time(&spec, &ens, 2).unwrap();
        assert_eq!(s.case, Case::BeforeT);
        assert!((s.tau_hat - 2f64.ln()).abs() < 1e-3);
    }

    #[test]
    fn larger_control_stops_sooner() {
        let (spec, u) = paper(10_000, 2.0);
        let ens = simulate_forward(&spec, &u, 1, 0).unwrap();
        let s = stopping_time(&spec, &ens, 2).unwrap();
        assert!((s.tau_hat - 1.5f64.ln()).abs() < 1e-3);
    }

    #[test]
    fn unreachable_threshold_is_never() {
        let (mut spec, u) = paper(1000, 1.0);
        spec.alpha = 10.0;
        let ens = simulate_forward(&spec, &u, 1, 0).unwrap();
        let s = stopping_time(&spec, &ens, 2).unwrap();
        assert_eq!((s.case, s.tau_hat, s.cross_index), (Case::Never, 1.0, None));
    }

    #[test]
    fn met_at_start() {
        let (mut spec, u) = paper(1000, 1.0);
        spec.x0 = vec![1.0];
        let ens = simulate_forward(&spec, &u, 1, 0).unwrap();
        let s = stopping_time(&spec, &ens, 2).unwrap();
        assert_eq!((s.tau_hat, s.cross_index), (0.0, Some(0)));
    }

    #[test]
    fn classical_never_stops() {
        let spec = builtin::<f64>("classical-example").unwrap();
        let u = ControlPath::constant(spec.grid(100).unwrap(), &[2.0]);
        let ens = simulate_forward(&spec, &u, 1, 0).unwrap();
        let s = stopping_time(&spec, &ens, 2).unwrap();
        assert_eq!((s.case, s.tau_hat), (Case::Never, 1.0));
    }

    #[test]
    fn h_is_exponential_and_hbar_too() {
        let (spec, u) = paper(10_000, 1.0);
        let tt = TerminalTime::compute(&spec, &u, 1, 0, 2).unwrap();
        assert!((tt.h_tau - 2.0).abs() < 1e-3);
        let v = ControlPath::constant(*u.grid(), &[1.0]);
        let hb = h_bar(&spec, &u, &v, 1, 0).unwrap();
        let grid = u.grid();
        for i in (0..=grid.steps()).step_by(500) {
            assert!((hb.values[i] - grid.node(i).exp()).abs() < 1e-3);
        }
        let zero = h_bar(&spec, &u, &ControlPath::zeros(*grid, 1), 1, 0).unwrap();
        assert!(zero.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tau_derivative_cases() {
        let (spec, u) = paper(10_000, 1.0);
        let v = ControlPath::constant(*u.grid(), &[1.0]);
        let td = tau_derivative(&spec, &u, &v, 1, 0, 2).unwrap();
        assert!((td.value - 0.5).abs() < 0.01, "{}", td.value);
        let mut never = spec.clone();
        never.alpha = 10.0;
        let td = tau_derivative(&never, &u, &v, 1, 0, 2).unwrap();
        assert_eq!((td.case, td.value), (Case::Never, 0.0));
    }

    #[test]
    fn upper_bound_uses_backward_difference() {
        let (spec, u) = paper(2000, 2.0);
        let v = ControlPath::constant(*u.grid(), &[1.0]);
        let hb = h_bar(&spec, &u, &v, 1, 0).unwrap();
        assert!((hb.values[0] - 1.0).abs() < 1e-6);
        let stuck = {
            let mut s = spec.clone();
            s.u_lo = vec![2.0];
            s
        };
        assert_eq!(h_bar(&stuck, &u, &v, 1, 0).unwrap_err(), Error::DirectionLeavesBox);
    }
}

//! The limiting adjoint system: `q` forward from `−γ_y(Y(0))`, `(p, k)` backward
//! from `β_x − Ψ_xᵀq` at `τ̂`; the Hamiltonian and the terminal-time constant `𝓛`.

use crate::bsde::{mean_rows, regression_backward, rk4_backward, rk4_forward, BackwardSolution, SolverMode};
use crate::error::{Error, Result};
use crate::model::{Block, ControlPath, Evaluator, ProblemSpec};
use crate::real::Real;
use crate::stopping::{lerp_rows, Horizon, Window};

/// `(p, k, q)` on the truncated grid: `p` is `M × (j+2) × n`, `k` is
/// `M × (j+1) × n·d`, `q` is `M × (j+2) × m`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointSolution<T: Real> {
    pub horizon: Horizon<T>,
    pub paths: usize,
    pub n: usize,
    pub m: usize,
    pub d: usize,
    p: Vec<T>,
    k: Vec<T>,
    q: Vec<T>,
}

impl<T: Real> AdjointSolution<T> {
    pub fn p(&self, path: usize, idx: usize) -> &[T] {
        let at = (path * self.horizon.len() + idx) * self.n;
        &self.p[at..at + self.n]
    }

    pub fn k(&self, path: usize, c: usize) -> &[T] {
        let w = self.n * self.d;
        let at = (path * self.horizon.cells() + c) * w;
        &self.k[at..at + w]
    }

    pub fn q(&self, path: usize, idx: usize) -> &[T] {
        let at = (path * self.horizon.len() + idx) * self.m;
        &self.q[at..at + self.m]
    }

    pub fn mean_p(&self, idx: usize) -> Vec<T> {
        mean_rows(self.paths, self.n, |s| self.p(s, idx))
    }

    pub fn mean_k(&self, c: usize) -> Vec<T> {
        mean_rows(self.paths, self.n * self.d, |s| self.k(s, c))
    }

    pub fn mean_q(&self, idx: usize) -> Vec<T> {
        mean_rows(self.paths, self.m, |s| self.q(s, idx))
    }

    pub(crate) fn q_all(&self) -> &[T] {
        &self.q
    }

    /// Largest absolute entry of `p`, `k` and `q`.
    pub fn max_abs(&self) -> T {
        self.p.iter().chain(&self.k).chain(&self.q).fold(T::zero(), |a, &v| a.max(v.abs()))
    }
}

/// Cell whose `Z`-type value is used at truncated node `idx`.
pub(crate) fn node_cell<T: Real>(hz: &Horizon<T>, idx: usize) -> usize {
    if idx < hz.cells() && hz.frac(idx) > T::zero() {
        idx
    } else {
        hz.tail_cell()
    }
}

/// Control value active at truncated node `idx`.
pub(crate) fn node_control<'a, T: Real>(hz: &Horizon<T>, control: &'a ControlPath<T>, idx: usize) -> &'a [T] {
    control.cell(hz.control_cell(idx.min(hz.j)))
}

/// Copies per-node rows onto a shorter horizon, interpolating the new tail.
pub(crate) fn restrict_nodes<T: Real>(src: &[T], old: &Horizon<T>, new: &Horizon<T>, paths: usize, dim: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(paths * new.len() * dim);
    let mut tail = vec![T::zero(); dim];
    for p in 0..paths {
        let row = |i: usize| &src[(p * old.len() + i) * dim..(p * old.len() + i + 1) * dim];
        for i in 0..=new.j {
            out.extend_from_slice(row(i));
        }
        if new.j + 1 < old.len() && new.theta > T::zero() {
            lerp_rows(row(new.j), row(new.j + 1), old.weight(new.j, new.theta), &mut tail);
            out.extend_from_slice(&tail);
        } else {
            out.extend_from_slice(row(new.j.min(old.len() - 1)));
        }
    }
    out
}

/// Copies per-cell rows onto a shorter horizon.
pub(crate) fn restrict_cells<T: Real>(src: &[T], old: &Horizon<T>, new: &Horizon<T>, paths: usize, dim: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(paths * new.cells() * dim);
    for p in 0..paths {
        let base = p * old.cells() * dim;
        out.extend_from_slice(&src[base..base + new.cells() * dim]);
    }
    out
}

impl<T: Real> BackwardSolution<T> {
    /// The solution seen on `[0, s]` for `s ≤ τ̂`.
    pub fn restrict(&self, new: Horizon<T>) -> Self {
        let old = &self.horizon;
        let y = restrict_nodes(self.y_all(), old, &new, self.paths, self.m);
        let z = restrict_cells(self.z_all(), old, &new, self.paths, self.m * self.d);
        BackwardSolution::from_parts(self.mode, new, self.paths, self.m, self.d, y, z)
    }
}

impl<T: Real> AdjointSolution<T> {
    pub fn restrict(&self, new: Horizon<T>) -> Self {
        let old = &self.horizon;
        AdjointSolution {
            horizon: new,
            paths: self.paths,
            n: self.n,
            m: self.m,
            d: self.d,
            p: restrict_nodes(&self.p, old, &new, self.paths, self.n),
            k: restrict_cells(&self.k, old, &new, self.paths, self.n * self.d),
            q: restrict_nodes(&self.q, old, &new, self.paths, self.m),
        }
    }
}

/// Evaluator plus scratch for the linearised coefficient products the adjoint and
/// variational equations need. Callers position it with `ev.set`.
pub(crate) struct Lin<'a, T: Real> {
    pub ev: Evaluator<'a, T>,
    jac: Vec<T>,
    row: Vec<T>,
}

/// `out = Aᵀ v` for `A` stored `rows × cols`, accumulated.
fn add_t_mul<T: Real>(a: &[T], rows: usize, cols: usize, v: &[T], out: &mut [T]) {
    for r in 0..rows {
        let vr = v[r];
        if vr == T::zero() {
            continue;
        }
        for c in 0..cols {
            out[c] += a[r * cols + c] * vr;
        }
    }
}

/// `out += A w` for `A` stored `rows × cols`.
fn add_mul<T: Real>(a: &[T], rows: usize, cols: usize, w: &[T], out: &mut [T]) {
    for r in 0..rows {
        let mut s = T::zero();
        for c in 0..cols {
            s += a[r * cols + c] * w[c];
        }
        out[r] += s;
    }
}

impl<'a, T: Real> Lin<'a, T> {
    pub fn new(spec: &'a ProblemSpec<T>) -> Self {
        let d = spec.dims;
        let widest = d.slots();
        let rows = d.n.max(d.m).max(d.n * d.d);
        Lin { ev: Evaluator::new(d, &spec.coef), jac: vec![T::zero(); rows * widest], row: vec![T::zero(); widest] }
    }

    fn width(&self, b: Block) -> usize {
        let d = self.ev.dims;
        match b {
            Block::T => 1,
            Block::X => d.n,
            Block::Y => d.m,
            Block::Z => d.m * d.d,
            Block::U => d.k,
        }
    }

    /// `out = f_bᵀp + σ_bᵀk + g_bᵀq + l_b`, the gradient of `H` in block `b`.
    /// Any of `p`, `k`, `q` may be empty (zero).
    pub fn h_grad(&mut self, b: Block, p: &[T], k: &[T], q: &[T], out: &mut [T]) -> Result<()> {
        let dims = self.ev.dims;
        let w = self.width(b);
        let coef = self.ev.coef;
        self.forward_t_mul(b, p, k, out)?;
        if !q.is_empty() {
            self.ev.jacobian(&coef.g, b, &mut self.jac[..dims.m * w])?;
            add_t_mul(&self.jac, dims.m, w, q, out);
        }
        self.ev.grad(&coef.l, b, &mut self.row[..w])?;
        for (o, &v) in out.iter_mut().zip(&self.row[..w]) {
            *o += v;
        }
        Ok(())
    }

    /// `out = f_bᵀa + σ_bᵀs` with `s` in flat `n·d` layout; either may be empty.
    pub fn forward_t_mul(&mut self, b: Block, a: &[T], s: &[T], out: &mut [T]) -> Result<()> {
        let dims = self.ev.dims;
        let w = self.width(b);
        let coef = self.ev.coef;
        out.iter_mut().for_each(|o| *o = T::zero());
        if matches!(b, Block::Y | Block::Z) {
            return Ok(());
        }
        if !a.is_empty() {
            self.ev.jacobian(&coef.f, b, &mut self.jac[..dims.n * w])?;
            add_t_mul(&self.jac, dims.n, w, a, out);
        }
        if !s.is_empty() && !coef.sigma.iter().all(|c| c.is_zero()) {
            let rows = dims.n * dims.d;
            self.ev.jacobian(&coef.sigma, b, &mut self.jac[..rows * w])?;
            add_t_mul(&self.jac, rows, w, s, out);
        }
        Ok(())
    }

    /// `out += A_b · w` for the Jacobian of the vector function `cs` in block `b`.
    pub fn jac_mul(&mut self, cs: &'a [crate::model::Coef<T>], b: Block, w: &[T], out: &mut [T]) -> Result<()> {
        let cols = self.width(b);
        let rows = cs.len();
        if cs.iter().all(|c| c.is_zero()) {
            return Ok(());
        }
        self.ev.jacobian(cs, b, &mut self.jac[..rows * cols])?;
        add_mul(&self.jac, rows, cols, w, out);
        Ok(())
    }

    /// `∇_b c · w` for a scalar coefficient.
    pub fn grad_dot(&mut self, c: &crate::model::Coef<T>, b: Block, w: &[T]) -> Result<T> {
        let cols = self.width(b);
        if c.is_zero() {
            return Ok(T::zero());
        }
        self.ev.grad(c, b, &mut self.row[..cols])?;
        Ok(self.row[..cols].iter().zip(w).map(|(&a, &b)| a * b).sum())
    }

    /// `Ψ̃_a` (or `β̃`): `∇_x c · f + ½ Σ_j σ^jᵀ ∇²_x c σ^j` at the current point.
    pub fn ito_drift(&mut self, c: &crate::model::Coef<T>, f: &[T], sigma: Option<&[T]>) -> Result<T> {
        let dims = self.ev.dims;
        let mut v = self.grad_dot(c, Block::X, f)?;
        if let Some(sig) = sigma {
            if !c.is_zero() {
                let mut col = vec![T::zero(); dims.n];
                let mut acc = T::zero();
                for j in 0..dims.d {
                    for a in 0..dims.n {
                        col[a] = sig[a * dims.d + j];
                    }
                    acc += self.ev.second_x(c, &col, &col)?;
                }
                v += T::lit(0.5) * acc;
            }
        }
        Ok(v)
    }
}

/// A full argument list of the Hamiltonian.
#[derive(Debug, Clone, Copy)]
pub struct HamiltonianPoint<'a, T> {
    pub t: T,
    pub x: &'a [T],
    pub y: &'a [T],
    pub z: &'a [T],
    pub u: &'a [T],
    pub p: &'a [T],
    pub k: &'a [T],
    pub q: &'a [T],
}

/// `H = p·f + k·σ + q·g + l` and its gradient in `u`.
pub fn hamiltonian<T: Real>(spec: &ProblemSpec<T>, pt: &HamiltonianPoint<'_, T>) -> Result<(T, Vec<T>)> {
    let dims = spec.dims;
    let coef = &spec.coef;
    let mut lin = Lin::new(spec);
    lin.ev.set(pt.t, pt.x, pt.y, pt.z, pt.u);
    let dot = |ev: &Evaluator<'_, T>, cs: &[crate::model::Coef<T>], w: &[T]| -> Result<T> {
        if w.is_empty() {
            return Ok(T::zero());
        }
        let mut vals = vec![T::zero(); cs.len()];
        ev.values(cs, &mut vals)?;
        Ok(vals.iter().zip(w).map(|(&a, &b)| a * b).sum())
    };
    let h = dot(&lin.ev, &coef.f, pt.p)? + dot(&lin.ev, &coef.sigma, pt.k)? + dot(&lin.ev, &coef.g, pt.q)? + lin.ev.value(&coef.l)?;
    let mut hu = vec![T::zero(); dims.k];
    lin.h_grad(Block::U, pt.p, pt.k, pt.q, &mut hu)?;
    Ok((h, hu))
}

fn finite_or<T: Real>(v: &[T], step: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteAdjoint(step))
    }
}

/// Solves `dq = −(g_yᵀq + l_y)dt − (g_zᵀq + l_z)dW`, `q(0) = −γ_y(Ŷ(0))`.
pub fn solve_q<T: Real>(spec: &ProblemSpec<T>, win: &Window<T>, bwd: &BackwardSolution<T>, control: &ControlPath<T>) -> Result<Vec<T>> {
    let dims = spec.dims;
    let (m, d) = (dims.m, dims.d);
    let hz = win.horizon;
    let mut lin = Lin::new(spec);
    let y0 = bwd.y0();
    let mut q0 = vec![T::zero(); m];
    lin.ev.set(T::zero(), &[], &y0, &[], &[]);
    lin.ev.grad(&spec.coef.gamma, Block::Y, &mut q0)?;
    q0.iter_mut().for_each(|v| *v = -*v);
    finite_or(&q0, 0)?;
    match bwd.mode {
        SolverMode::Deterministic => {
            let mut x = vec![T::zero(); dims.n];
            let mut y = vec![T::zero(); m];
            rk4_forward(&hz, m, &q0, |c, w, q, out| {
                win.x_at(0, c, w, &mut x);
                bwd.y_at(0, c, w, &mut y);
                lin.ev.set(hz.time_in(c, w), &x, &y, &[], control.cell(hz.control_cell(c)));
                lin.h_grad(Block::Y, &[], &[], q, out)?;
                out.iter_mut().for_each(|v| *v = -*v);
                Ok(())
            })
            .map_err(|e| match e {
                Error::NonFiniteBackward(s) => Error::NonFiniteAdjoint(s),
                e => e,
            })
        }
        SolverMode::Regression { .. } => {
            let len = hz.len();
            let mut q = vec![T::zero(); win.paths * len * m];
            let mut drift = vec![T::zero(); m];
            let mut hz_row = vec![T::zero(); m * d];
            for p in 0..win.paths {
                let base = p * len * m;
                q[base..base + m].copy_from_slice(&q0);
                for c in 0..hz.cells() {
                    let delta = hz.cell_len(c);
                    let (head, tail) = q.split_at_mut(base + (c + 1) * m);
                    let qc = &head[base + c * m..];
                    let next = &mut tail[..m];
                    if delta == T::zero() {
                        next.copy_from_slice(qc);
                        continue;
                    }
                    lin.ev.set(hz.time(c), win.x(p, c), bwd.y(p, c), bwd.z(p, c), control.cell(hz.control_cell(c)));
                    lin.h_grad(Block::Y, &[], &[], qc, &mut drift)?;
                    lin.h_grad(Block::Z, &[], &[], qc, &mut hz_row)?;
                    let dw = win.dw(p, c);
                    for r in 0..m {
                        let mut v = qc[r] - drift[r] * delta;
                        for j in 0..d {
                            v -= hz_row[r * d + j] * dw[j];
                        }
                        next[r] = v;
                    }
                    finite_or(next, c + 1)?;
                }
            }
            Ok(q)
        }
    }
}

/// Solves `dp = −H_x dt + k dW`, `p(τ̂) = β_x(X(τ̂)) − Ψ_xᵀ q(τ̂)`, given `q`.
pub fn solve_p<T: Real>(
    spec: &ProblemSpec<T>,
    win: &Window<T>,
    bwd: &BackwardSolution<T>,
    q: &[T],
    control: &ControlPath<T>,
) -> Result<AdjointSolution<T>> {
    let dims = spec.dims;
    let (n, m, d) = (dims.n, dims.m, dims.d);
    let hz = win.horizon;
    let len = hz.len();
    let coef = &spec.coef;
    let q_row = |p: usize, idx: usize| &q[(p * len + idx) * m..(p * len + idx + 1) * m];

    let mut lin = Lin::new(spec);
    let mut terminal = vec![T::zero(); win.paths * n];
    let mut psi_x = vec![T::zero(); m * n];
    for p in 0..win.paths {
        let out = &mut terminal[p * n..(p + 1) * n];
        lin.ev.set(hz.tau, win.x(p, hz.tail()), &[], &[], &[]);
        lin.ev.grad(&coef.beta, Block::X, out)?;
        lin.ev.jacobian(&coef.psi, Block::X, &mut psi_x)?;
        let qt = q_row(p, hz.tail());
        for a in 0..m {
            for i in 0..n {
                out[i] -= psi_x[a * n + i] * qt[a];
            }
        }
        finite_or(out, hz.tail())?;
    }
    let as_adjoint = |e: Error| match e {
        Error::NonFiniteBackward(s) => Error::NonFiniteAdjoint(s),
        e => e,
    };
    let (p, k) = match bwd.mode {
        SolverMode::Deterministic => {
            let mut x = vec![T::zero(); n];
            let mut y = vec![T::zero(); m];
            let mut qi = vec![T::zero(); m];
            let p = rk4_backward(&hz, n, &terminal, |c, w, pv, out| {
                win.x_at(0, c, w, &mut x);
                bwd.y_at(0, c, w, &mut y);
                lerp_rows(q_row(0, c), q_row(0, c + 1), hz.weight(c, w), &mut qi);
                lin.ev.set(hz.time_in(c, w), &x, &y, &[], control.cell(hz.control_cell(c)));
                lin.h_grad(Block::X, pv, &[], &qi, out)?;
                out.iter_mut().for_each(|v| *v = -*v);
                Ok(())
            })
            .map_err(as_adjoint)?;
            (p, vec![T::zero(); hz.cells() * n * d])
        }
        SolverMode::Regression { degree } => regression_backward(
            win,
            degree,
            n,
            &terminal,
            || Lin::new(spec),
            |lin, p, c, pv, kv, out| {
                lin.ev.set(hz.time(c), win.x(p, c), bwd.y(p, c), bwd.z(p, c), control.cell(hz.control_cell(c)));
                lin.h_grad(Block::X, pv, kv, q_row(p, c), out)?;
                out.iter_mut().for_each(|v| *v = -*v);
                Ok(())
            },
        )
        .map_err(as_adjoint)?,
    };
    Ok(AdjointSolution { horizon: hz, paths: win.paths, n, m, d, p, k, q: q.to_vec() })
}

/// `q` then `(p, k)`.
pub fn solve_adjoint<T: Real>(spec: &ProblemSpec<T>, win: &Window<T>, bwd: &BackwardSolution<T>, control: &ControlPath<T>) -> Result<AdjointSolution<T>> {
    let q = solve_q(spec, win, bwd, control)?;
    solve_p(spec, win, bwd, &q, control)
}

/// Per-path quantities at the tail of the window.
#[derive(Debug, Clone, PartialEq)]
pub struct TailTerms<T> {
    /// `Ψ̃`, `M × m`.
    pub psi_tilde: Vec<T>,
    /// `g` at `τ̂`, `M × m`.
    pub g: Vec<T>,
    pub beta_tilde: Vec<T>,
    pub l: Vec<T>,
}

/// Evaluates `Ψ̃`, `g`, `β̃` and `l` at the tail of the window, per path.
pub fn tail_terms<T: Real>(spec: &ProblemSpec<T>, win: &Window<T>, bwd: &BackwardSolution<T>, control: &ControlPath<T>) -> Result<TailTerms<T>> {
    let dims = spec.dims;
    let (n, m, d) = (dims.n, dims.m, dims.d);
    let hz = win.horizon;
    let coef = &spec.coef;
    let noisy = !spec.sigma_is_zero();
    let mut lin = Lin::new(spec);
    let mut out = TailTerms {
        psi_tilde: vec![T::zero(); win.paths * m],
        g: vec![T::zero(); win.paths * m],
        beta_tilde: vec![T::zero(); win.paths],
        l: vec![T::zero(); win.paths],
    };
    let mut f = vec![T::zero(); n];
    let mut sig = vec![T::zero(); n * d];
    let tail = hz.tail();
    let zc = node_cell(&hz, tail);
    let u = node_control(&hz, control, tail);
    for p in 0..win.paths {
        lin.ev.set(hz.tau, win.x(p, tail), bwd.y(p, tail), bwd.z(p, zc), u);
        lin.ev.values(&coef.f, &mut f)?;
        if noisy {
            lin.ev.values(&coef.sigma, &mut sig)?;
        }
        let sigma = noisy.then_some(&sig[..]);
        for a in 0..m {
            out.psi_tilde[p * m + a] = lin.ito_drift(&coef.psi[a], &f, sigma)?;
        }
        lin.ev.values(&coef.g, &mut out.g[p * m..(p + 1) * m])?;
        out.beta_tilde[p] = lin.ito_drift(&coef.beta, &f, sigma)?;
        out.l[p] = lin.ev.value(&coef.l)?;
    }
    Ok(out)
}

/// `𝓛 = Ê[qᵀΨ̃] − Ê[qᵀg] − Ê[β̃] − Ê[l]`, all at `τ̂`.
pub fn script_l<T: Real>(
    spec: &ProblemSpec<T>,
    win: &Window<T>,
    bwd: &BackwardSolution<T>,
    adj: &AdjointSolution<T>,
    control: &ControlPath<T>,
) -> Result<T> {
    let m = spec.dims.m;
    let tt = tail_terms(spec, win, bwd, control)?;
    let tail = win.horizon.tail();
    let mut acc = T::zero();
    for p in 0..win.paths {
        let q = adj.q(p, tail);
        for a in 0..m {
            acc += q[a] * (tt.psi_tilde[p * m + a] - tt.g[p * m + a]);
        }
        acc -= tt.beta_tilde[p] + tt.l[p];
    }
    Ok(acc / T::from_usize_lossy(win.paths))
}

/// `Ê[H_u]` at truncated node `idx`.
pub fn mean_h_u<T: Real>(
    spec: &ProblemSpec<T>,
    win: &Window<T>,
    bwd: &BackwardSolution<T>,
    adj: &AdjointSolution<T>,
    control: &ControlPath<T>,
    idx: usize,
) -> Result<Vec<T>> {
    mean_h_u_at(spec, win, bwd, adj, idx, node_control(&win.horizon, control, idx))
}

/// `Ê[H_u]` at node `idx` with the control value `u` in place of the path's.
pub fn mean_h_u_at<T: Real>(
    spec: &ProblemSpec<T>,
    win: &Window<T>,
    bwd: &BackwardSolution<T>,
    adj: &AdjointSolution<T>,
    idx: usize,
    u: &[T],
) -> Result<Vec<T>> {
    let k = spec.dims.k;
    let hz = win.horizon;
    let zc = node_cell(&hz, idx);
    let mut lin = Lin::new(spec);
    let mut acc = vec![T::zero(); k];
    let mut hu = vec![T::zero(); k];
    for p in 0..win.paths {
        lin.ev.set(hz.time(idx), win.x(p, idx), bwd.y(p, idx), bwd.z(p, zc), u);
        lin.h_grad(Block::U, adj.p(p, idx), adj.k(p, zc), adj.q(p, idx), &mut hu)?;
        for (a, &v) in acc.iter_mut().zip(&hu) {
            *a += v;
        }
    }
    let mm = T::from_usize_lossy(win.paths);
    acc.iter_mut().for_each(|a| *a /= mm);
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::bsde::{resolve_mode, solve_backward};
    use crate::config::BsdeMode;
    use crate::model::{builtin, ExprFn};
    use crate::stopping::TerminalTime;

    fn pipeline(spec: &ProblemSpec<f64>, steps: usize, u: f64) -> (Window<f64>, BackwardSolution<f64>, ControlPath<f64>) {
        let grid = spec.grid(steps).unwrap();
        let control = ControlPath::constant(grid, &[u]);
        let tt = TerminalTime::compute(spec, &control, 1, 0, 2).unwrap();
        let mode = resolve_mode(spec, BsdeMode::Auto, 2).unwrap();
        let bwd = solve_backward(spec, &tt.window, &control, mode).unwrap();
        (tt.window, bwd, control)
    }

    fn set(spec: &mut ProblemSpec<f64>, which: &str, text: &str) {
        let c: crate::model::Coef<f64> = Arc::new(ExprFn::parse(text, spec.dims).unwrap());
        match which {
            "g" => spec.coef.g = vec![c],
            "f" => spec.coef.f = vec![c],
            "psi" => spec.coef.psi = vec![c],
            "l" => spec.coef.l = c,
            "beta" => spec.coef.beta = c,
            "gamma" => spec.coef.gamma = c,
            _ => unreachable!(),
        }
    }

    #[test]
    fn paper_example_adjoints_vanish() {
        let spec = builtin::<f64>("paper-example").unwrap();
        let (win, bwd, u) = pipeline(&spec, 1000, 1.0);
        let adj = solve_adjoint(&spec, &win, &bwd, &u).unwrap();
        assert!(adj.max_abs() < 1e-12);
        let l = script_l(&spec, &win, &bwd, &adj, &u).unwrap();
        assert!((l + 1.0).abs() < 1e-12);
        assert_eq!(mean_h_u(&spec, &win, &bwd, &adj, &u, 3).unwrap(), vec![1.0]);
    }

    #[test]
    fn q_closed_form() {
        let mut spec = builtin::<f64>("classical-example").unwrap();
        set(&mut spec, "g", "y1");
        set(&mut spec, "l", "0");
        set(&mut spec, "gamma", "y1");
        let (win, bwd, u) = pipeline(&spec, 10_000, 1.0);
        let q = solve_q(&spec, &win, &bwd, &u).unwrap();
        assert_eq!(q[0], -1.0);
        for i in (0..win.horizon.len()).step_by(500) {
            let t = win.horizon.time(i);
            assert!((q[i] + (-t).exp()).abs() < 1e-6);
        }
    }

    #[test]
    fn p_is_constant_for_linear_terminal_cost() {
        let mut spec = builtin::<f64>("classical-example").unwrap();
        set(&mut spec, "f", "u1");
        set(&mut spec, "g", "y1+u1");
        set(&mut spec, "l", "0");
        set(&mut spec, "beta", "x1");
        let (win, bwd, u) = pipeline(&spec, 100, 1.0);
        let adj = solve_adjoint(&spec, &win, &bwd, &u).unwrap();
        for i in 0..win.horizon.len() {
            assert!((adj.p(0, i)[0] - 1.0).abs() < 1e-12);
        }
        assert!((0..win.horizon.cells()).all(|c| adj.k(0, c)[0] == 0.0));
    }

    #[test]
    fn hamiltonian_values() {
        let spec = builtin::<f64>("paper-example").unwrap();
        let pt = HamiltonianPoint { t: 0.2, x: &[0.3], y: &[0.1], z: &[0.0], u: &[1.4], p: &[0.0], k: &[0.0], q: &[0.0] };
        let (h, hu) = hamiltonian(&spec, &pt).unwrap();
        assert_eq!((h, hu[0]), (1.4, 1.0));

        let lq = builtin::<f64>("lq-noise-1d").unwrap();
        let pt = HamiltonianPoint { t: 0.2, x: &[0.3], y: &[-0.4], z: &[0.5], u: &[0.25], p: &[0.7], k: &[-1.1], q: &[0.6] };
        let (_, hu) = hamiltonian(&lq, &pt).unwrap();
        let h = 1e-6;
        let at = |u: f64| hamiltonian(&lq, &HamiltonianPoint { u: &[u], ..pt }).unwrap().0;
        let fd = (at(0.25 + h) - at(0.25 - h)) / (2.0 * h);
        assert!((hu[0] - fd).abs() <= 1e-6 * fd.abs().max(1.0));
    }

    #[test]
    fn p_round_trip() {
        let mut spec = builtin::<f64>("classical-example").unwrap();
        set(&mut spec, "beta", "x1^2");
        set(&mut spec, "l", "u1*x1");
        let (win, bwd, u) = pipeline(&spec, 1000, 1.5);
        let adj = solve_adjoint(&spec, &win, &bwd, &u).unwrap();
        let hz = win.horizon;
        let mut lin = Lin::new(&spec);
        let mut x = [0.0];
        let fwd = rk4_forward(&hz, 1, adj.p(0, 0), |c, w, pv, out| {
            win.x_at(0, c, w, &mut x);
            lin.ev.set(hz.time_in(c, w), &x, &[], &[], u.cell(hz.control_cell(c)));
            lin.h_grad(Block::X, pv, &[], &[0.0], out)?;
            out[0] = -out[0];
            Ok(())
        })
        .unwrap();
        let want = adj.p(0, hz.tail())[0];
        assert!((fwd[hz.tail()] - want).abs() < 1e-9 * want.abs().max(1.0));
    }
}

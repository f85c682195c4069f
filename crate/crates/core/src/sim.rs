//! Euler–Maruyama simulation of the forward state and Monte Carlo means over it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{ControlPath, Evaluator, ProblemSpec, TimeGrid};
use crate::real::Real;

/// `M` simulated state paths with the Brownian increments that drove them.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble<T: Real> {
    grid: TimeGrid<T>,
    paths: usize,
    n: usize,
    d: usize,
    /// `M × (N+1) × n`.
    x: Vec<T>,
    /// `M × N × d`.
    dw: Vec<T>,
    seed: u64,
    control: ControlPath<T>,
}

impl<T: Real> PathEnsemble<T> {
    pub fn grid(&self) -> &TimeGrid<T> {
        &self.grid
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn control(&self) -> &ControlPath<T> {
        &self.control
    }

    pub fn x(&self, path: usize, node: usize) -> &[T] {
        let at = (path * (self.grid.steps() + 1) + node) * self.n;
        &self.x[at..at + self.n]
    }

    pub fn dw(&self, path: usize, cell: usize) -> &[T] {
        let at = (path * self.grid.steps() + cell) * self.d;
        &self.dw[at..at + self.d]
    }

    pub fn states(&self) -> &[T] {
        &self.x
    }

    pub fn increments(&self) -> &[T] {
        &self.dw
    }
}

/// Values and standard errors of a Monte Carlo mean on the grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve<T> {
    pub grid: TimeGrid<T>,
    pub values: Vec<T>,
    pub stderr: Vec<T>,
}

impl<T: Real> Curve<T> {
    pub fn at(&self, i: usize) -> T {
        self.values[i]
    }
}

/// Simulates `X_{i+1} = X_i + f(t_i, X_i, u_i)·dt + σ(t_i, X_i, u_i)·dW_i` on the
/// control's grid. A structurally zero diffusion collapses the ensemble to one path.
///
/// Path `p` draws its increments from a ChaCha stream keyed by `(seed, p)`, so the
/// result does not depend on how paths are scheduled across threads.
pub fn simulate_forward<T: Real>(
    spec: &ProblemSpec<T>,
    control: &ControlPath<T>,
    paths: usize,
    seed: u64,
) -> Result<PathEnsemble<T>> {
    if paths == 0 {
        return Err(Error::InvalidArgument("path count must be positive".into()));
    }
    spec.check_control(control)?;
    let grid = *control.grid();
    let dims = spec.dims;
    let (n, d, steps) = (dims.n, dims.d, grid.steps());
    let deterministic = spec.sigma_is_zero();
    let paths = if deterministic { 1 } else { paths };
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();

    let mut x = vec![T::zero(); paths * (steps + 1) * n];
    let mut dw = vec![T::zero(); paths * steps * d];
    let outcomes: Vec<Result<()>> = x
        .par_chunks_mut((steps + 1) * n)
        .zip(dw.par_chunks_mut(steps * d))
        .enumerate()
        .map(|(p, (xs, ws))| {
            if !deterministic {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(p as u64);
                for w in ws.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *w = T::lit(z) * sqrt_dt;
                }
            }
            let mut ev = Evaluator::new(dims, &spec.coef);
            let mut f = vec![T::zero(); n];
            let mut sig = vec![T::zero(); n * d];
            xs[..n].copy_from_slice(&spec.x0);
            for i in 0..steps {
                let (head, tail) = xs.split_at_mut((i + 1) * n);
                let xi = &head[i * n..];
                ev.set(grid.node(i), xi, &[], &[], control.cell(i));
                ev.values(&spec.coef.f, &mut f)?;
                if !deterministic {
                    ev.values(&spec.coef.sigma, &mut sig)?;
                }
                let wi = &ws[i * d..(i + 1) * d];
                let next = &mut tail[..n];
                for r in 0..n {
                    let mut v = xi[r] + f[r] * dt;
                    if !deterministic {
                        for j in 0..d {
                            v += sig[r * d + j] * wi[j];
                        }
                    }
                    if !v.is_finite() {
                        return Err(Error::NonFiniteState { path: p, step: i + 1 });
                    }
                    next[r] = v;
                }
            }
            Ok(())
        })
        .collect();
    outcomes.into_iter().collect::<Result<()>>()?;
    Ok(PathEnsemble { grid, paths, n, d, x, dw, seed, control: control.clone() })
}

/// Mean and standard error of a per-state quantity at every node.
///
/// `value(scratch, path, node, x)` is evaluated for each path, with `scratch` built
/// once per node by `init`. Nodes are reduced in parallel, paths in index order,
/// so the result is thread-count independent.
pub fn mean_over_paths<T, S, I, F>(ens: &PathEnsemble<T>, init: I, value: F) -> Result<Curve<T>>
where
    T: Real,
    I: Fn() -> S + Sync,
    F: Fn(&mut S, usize, usize, &[T]) -> Result<T> + Sync,
{
    let nodes = ens.grid.steps() + 1;
    let stats: Vec<Result<(T, T)>> = (0..nodes)
        .into_par_iter()
        .map(|i| {
            let mut scratch = init();
            let mut vals = Vec::with_capacity(ens.paths);
            for p in 0..ens.paths {
                vals.push(value(&mut scratch, p, i, ens.x(p, i))?);
            }
            Ok(mean_and_stderr(&vals))
        })
        .collect();
    let mut values = Vec::with_capacity(nodes);
    let mut stderr = Vec::with_capacity(nodes);
    for s in stats {
        let (m, e) = s?;
        values.push(m);
        stderr.push(e);
    }
    Ok(Curve { grid: ens.grid, values, stderr })
}

/// `(1/M) Σ_p φ(X_p(t_i))` with standard error `sd/√M`.
pub fn mean_functional<T, F>(ens: &PathEnsemble<T>, phi: F) -> Result<Curve<T>>
where
    T: Real,
    F: Fn(&[T]) -> Result<T> + Sync,
{
    mean_over_paths(ens, || (), |_, _, _, x| phi(x))
}

/// Sample mean and standard error of the mean (zero for a single sample).
pub fn mean_and_stderr<T: Real>(vals: &[T]) -> (T, T) {
    let m = T::from_usize_lossy(vals.len());
    let mean = vals.iter().copied().sum::<T>() / m;
    if vals.len() < 2 {
        return (mean, T::zero());
    }
    let ss: T = vals.iter().map(|&v| (v - mean) * (v - mean)).sum();
    let var = ss / (m - T::one());
    (mean, (var / m).sqrt())
}

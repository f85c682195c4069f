use crate::error::{Error, Result};
use crate::real::Real;

/// Uniform grid `t_i = i·T/N`, `i = 0..=N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid<T> {
    steps: usize,
    horizon: T,
    dt: T,
}

impl<T: Real> TimeGrid<T> {
    pub fn new(horizon: T, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("grid needs at least one step".into()));
        }
        if !(horizon > T::zero()) || !horizon.is_finite() {
            return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
        }
        Ok(TimeGrid { steps, horizon, dt: horizon / T::from_usize_lossy(steps) })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn horizon(&self) -> T {
        self.horizon
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    /// Node time; computed as `T·i/N` so that the last node is exactly `T`.
    pub fn node(&self, i: usize) -> T {
        self.horizon * T::from_usize_lossy(i) / T::from_usize_lossy(self.steps)
    }

    pub fn nodes(&self) -> Vec<T> {
        (0..=self.steps).map(|i| self.node(i)).collect()
    }

    /// Index of the cell containing `t`, clamped to the grid.
    pub fn cell_of(&self, t: T) -> usize {
        if t <= T::zero() {
            return 0;
        }
        let i = (t / self.dt).floor().to_usize().unwrap_or(self.steps);
        i.min(self.steps - 1)
    }
}

/// Piecewise-constant control: row `i` (length `k`) is active on `[t_i, t_{i+1})`.
///
/// The same shape also carries control directions and gradients, so the box is
/// not enforced here; see [`ProblemSpec::check_control`](super::ProblemSpec::check_control).
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPath<T> {
    grid: TimeGrid<T>,
    k: usize,
    values: Vec<T>,
}

impl<T: Real> ControlPath<T> {
    pub fn constant(grid: TimeGrid<T>, value: &[T]) -> Self {
        let mut values = Vec::with_capacity(grid.steps() * value.len());
        for _ in 0..grid.steps() {
            values.extend_from_slice(value);
        }
        ControlPath { grid, k: value.len(), values }
    }

    pub fn zeros(grid: TimeGrid<T>, k: usize) -> Self {
        ControlPath { grid, k, values: vec![T::zero(); grid.steps() * k] }
    }

    pub fn from_values(grid: TimeGrid<T>, k: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != grid.steps() * k {
            return Err(Error::DimensionMismatch(format!(
                "control has {} values, grid needs {}×{}",
                values.len(),
                grid.steps(),
                k
            )));
        }
        Ok(ControlPath { grid, k, values })
    }

    /// Samples `f(t_i)` at every cell start.
    pub fn from_fn(grid: TimeGrid<T>, k: usize, mut f: impl FnMut(T) -> Vec<T>) -> Self {
        let mut values = Vec::with_capacity(grid.steps() * k);
        for i in 0..grid.steps() {
            let row = f(grid.node(i));
            assert_eq!(row.len(), k, "control row length");
            values.extend(row);
        }
        ControlPath { grid, k, values }
    }

    pub fn grid(&self) -> &TimeGrid<T> {
        &self.grid
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn cells(&self) -> usize {
        self.grid.steps()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    /// Control row of cell `i`; the last cell also serves the final node.
    pub fn cell(&self, i: usize) -> &[T] {
        let i = i.min(self.grid.steps() - 1);
        &self.values[i * self.k..(i + 1) * self.k]
    }

    pub fn cell_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.values[i * self.k..(i + 1) * self.k]
    }

    pub fn at(&self, t: T) -> &[T] {
        self.cell(self.grid.cell_of(t))
    }

    /// `self + rho·v`.
    pub fn axpy(&self, rho: T, v: &ControlPath<T>) -> Self {
        let values = self.values.iter().zip(&v.values).map(|(&a, &b)| a + rho * b).collect();
        ControlPath { grid: self.grid, k: self.k, values }
    }

    pub fn scaled(&self, s: T) -> Self {
        ControlPath { grid: self.grid, k: self.k, values: self.values.iter().map(|&a| a * s).collect() }
    }

    /// Grid inner product `Σ_i dt·⟨a_i, b_i⟩`.
    pub fn dot(&self, other: &ControlPath<T>) -> T {
        let s: T = self.values.iter().zip(&other.values).map(|(&a, &b)| a * b).sum();
        s * self.grid.dt()
    }

    pub fn max_abs(&self) -> T {
        self.values.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == T::zero())
    }
}

//! One evaluation of a control: forward ensemble, terminal time, backward
//! solution and cost, with the derived quantities computed on demand.

use crate::adjoint::{script_l, solve_adjoint, AdjointSolution};
use crate::bsde::{cost, resolve_mode, solve_backward, BackwardSolution, SolverMode};
use crate::config::{BsdeMode, RunConfig};
use crate::error::Result;
use crate::model::{ControlPath, ProblemSpec};
use crate::real::Real;
use crate::sim::Curve;
use crate::stopping::{check_h, h_bar, tau_derivative_from, Case, Horizon, TauDerivative, TerminalTime, Window};

/// Monte Carlo and solver settings shared by every run of a study.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub paths: usize,
    pub seed: u64,
    pub mode: BsdeMode,
    pub basis_degree: usize,
    pub band_cells: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Settings::from_config(&RunConfig::builtin("paper-example"))
    }
}

impl Settings {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Settings {
            paths: cfg.mc.paths,
            seed: cfg.mc.seed,
            mode: cfg.bsde.mode,
            basis_degree: cfg.bsde.basis_degree,
            band_cells: cfg.stopping.at_t_band_cells,
        }
    }

    pub fn with_paths(mut self, paths: usize) -> Self {
        self.paths = paths;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

pub struct Pipeline<'a, T: Real> {
    pub spec: &'a ProblemSpec<T>,
    pub control: ControlPath<T>,
    pub settings: Settings,
    pub mode: SolverMode,
    pub terminal: TerminalTime<T>,
    pub backward: BackwardSolution<T>,
    pub cost: T,
}

impl<'a, T: Real> Pipeline<'a, T> {
    pub fn run(spec: &'a ProblemSpec<T>, control: &ControlPath<T>, settings: &Settings) -> Result<Self> {
        let mode = resolve_mode(spec, settings.mode, settings.basis_degree)?;
        let terminal = TerminalTime::compute(spec, control, settings.paths, settings.seed, settings.band_cells)?;
        let backward = solve_backward(spec, &terminal.window, control, mode)?;
        let cost = cost(spec, &terminal.window, &backward, control)?;
        Ok(Pipeline { spec, control: control.clone(), settings: settings.clone(), mode, terminal, backward, cost })
    }

    pub fn case(&self) -> Case {
        self.terminal.stopping.case
    }

    pub fn tau(&self) -> T {
        self.terminal.stopping.tau_hat
    }

    pub fn window(&self) -> &Window<T> {
        &self.terminal.window
    }

    pub fn horizon(&self) -> &Horizon<T> {
        &self.terminal.window.horizon
    }

    pub fn h_tau(&self) -> T {
        self.terminal.h_tau
    }

    pub fn adjoint(&self) -> Result<AdjointSolution<T>> {
        solve_adjoint(self.spec, self.window(), &self.backward, &self.control)
    }

    pub fn script_l(&self, adj: &AdjointSolution<T>) -> Result<T> {
        script_l(self.spec, self.window(), &self.backward, adj, &self.control)
    }

    pub fn h_bar(&self, v: &ControlPath<T>) -> Result<Curve<T>> {
        h_bar(self.spec, &self.control, v, self.settings.paths, self.settings.seed)
    }

    pub fn tau_derivative(&self, v: &ControlPath<T>) -> Result<TauDerivative<T>> {
        let case = self.case();
        if case == Case::Never {
            return Ok(TauDerivative { case, value: T::zero(), alternative: None });
        }
        check_h(self.h_tau())?;
        let hbar = self.h_bar(v)?;
        tau_derivative_from(case, &hbar, self.horizon(), self.h_tau())
    }
}

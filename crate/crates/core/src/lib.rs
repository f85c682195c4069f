//! Controlled forward-backward SDEs whose terminal time is the first instant a
//! mean state constraint `E[Φ(X(t))] ≥ α` is met, capped at the horizon `T`.
//!
//! The crate simulates the state, locates the terminal time, solves the backward
//! equation and the adjoint system, checks the first-order necessary conditions
//! of the maximum principle and optimizes piecewise-constant controls.
//!
//! Everything numerical is generic over [`Real`] (`f32` or `f64`); the aliases at
//! the crate root fix the scalar to `f64`, with `F32` variants for single precision.

pub mod adjoint;
pub mod bsde;
pub mod config;
pub mod error;
pub mod expr;
pub mod model;
pub mod opt;
pub mod pipeline;
pub mod real;
pub mod regress;
pub mod sim;
pub mod smp;
pub mod stopping;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use pipeline::Settings;
pub use real::Real;

/// `f64` problem description.
pub type ProblemSpec = model::ProblemSpec<f64>;
pub type ControlPath = model::ControlPath<f64>;
pub type TimeGrid = model::TimeGrid<f64>;
pub type PathEnsemble = sim::PathEnsemble<f64>;
pub type Curve = sim::Curve<f64>;
pub type StoppingResult = stopping::StoppingResult<f64>;
pub type BackwardSolution = bsde::BackwardSolution<f64>;
pub type AdjointSolution = adjoint::AdjointSolution<f64>;
pub type SmpReport = smp::SmpReport<f64>;
pub type Pipeline<'a> = pipeline::Pipeline<'a, f64>;

/// Single-precision variants.
pub type ProblemSpecF32 = model::ProblemSpec<f32>;
pub type ControlPathF32 = model::ControlPath<f32>;
pub type TimeGridF32 = model::TimeGrid<f32>;
pub type PathEnsembleF32 = sim::PathEnsemble<f32>;
pub type CurveF32 = sim::Curve<f32>;
pub type StoppingResultF32 = stopping::StoppingResult<f32>;
pub type BackwardSolutionF32 = bsde::BackwardSolution<f32>;
pub type AdjointSolutionF32 = adjoint::AdjointSolution<f32>;
pub type SmpReportF32 = smp::SmpReport<f32>;
pub type PipelineF32<'a> = pipeline::Pipeline<'a, f32>;

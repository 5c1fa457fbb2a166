//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A physical parameter fails a validity requirement.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// The equilibrium solver ran out of iterations.
    #[error(
        "equilibrium solver did not converge after {iterations} iterations \
         (residual force {residual:.3e} N, tolerance {tolerance:.3e} N)"
    )]
    NonConvergence {
        iterations: usize,
        residual: f64,
        tolerance: f64,
    },

    /// The crystal is unstable against transverse buckling.
    #[error("drumhead mode {mode} has non-positive eigenvalue {eigenvalue:.6e} (rad/s)^2; crystal is not a stable planar configuration")]
    Unstable { mode: usize, eigenvalue: f64 },

    /// Dimension mismatch between coupled inputs.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Fock-space truncation limit reached during density-matrix evolution.
    #[error("top Fock level population {population:.3e} exceeds truncation tolerance {tolerance:.3e} at t = {t:.3e} s; increase n_max")]
    Truncation { population: f64, tolerance: f64, t: f64 },

    /// Trace drift beyond tolerance during density-matrix evolution.
    #[error("trace error {drift:.3e} exceeds 1e-6 at t = {t:.3e} s; reduce dt")]
    TraceDrift { drift: f64, t: f64 },

    /// A moment derivative became non-finite.
    #[error("non-finite derivative in moment '{moment}' at t = {t:.3e} s")]
    NumericalBlowup { moment: String, t: f64 },

    /// Too many sampling trajectories failed.
    #[error("{failed} of {total} trajectories diverged (more than 1% of the ensemble)")]
    TrajectoryFailures { failed: usize, total: usize },

    /// A linear solve hit a (near-)singular matrix.
    #[error("linear solve failed: {0}")]
    Singular(String),

    /// A least-squares fit failed to converge.
    #[error("fit did not converge; residual history: {history:?}")]
    FitNonConvergence { history: Vec<f64> },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

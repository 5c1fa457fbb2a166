//! Simulation of EIT (electromagnetically-induced-transparency) cooling of
//! the transverse "drumhead" modes of planar ion crystals in a Penning trap.
//!
//! The crate is organized around the stages of such a simulation:
//!
//! - [`crystal`]: rotating-frame equilibrium configurations of an N-ion
//!   planar crystal and the transverse (drumhead) normal-mode decomposition.
//! - [`eitmodel`]: laser geometry, detunings with rotation-induced Doppler
//!   modulation, Lamb-Dicke parameters and electronic-motional coupling
//!   tensors.
//! - [`exact`]: reference solver evolving the full density matrix of a single
//!   ion (three internal levels times one truncated harmonic mode) under the
//!   second-order Lamb-Dicke master equation.
//! - [`moments`]: the right-hand-side kernel for the coupled moment equations
//!   of the multi-ion problem, with cached partial sums for an O(N^3)
//!   per-step cost.
//! - [`engines`]: drivers for the Gaussian (single deterministic run) and
//!   Sampling (trajectory-averaged) closures, plus cooling-rate fits.
//! - [`spectrum`]: weak-probe absorption spectrum of the dressed three-level
//!   system.
//!
//! All internal quantities are SI; angular frequencies are rad/s. Interfaces
//! that speak to humans (CLI, CSV) use cyclic frequencies in Hz and convert
//! at the boundary.

pub mod constants;
pub mod crystal;
pub mod eitmodel;
pub mod engines;
pub mod error;
pub mod exact;
pub mod integrate;
pub mod linalg;
pub mod moments;
pub mod output;
pub mod spectrum;

pub use error::{Error, Result};

//! Physical constants (SI, CODATA 2018) and values specific to the modeled
//! NIST Penning-trap experiment on ⁹Be⁺.

/// Reduced Planck constant [J s].
pub const HBAR: f64 = 1.054_571_817e-34;

/// Boltzmann constant [J/K].
pub const KB: f64 = 1.380_649e-23;

/// Coulomb constant 1/(4 π ε₀) [N m²/C²].
pub const K_E: f64 = 8.987_551_792_3e9;

/// Elementary charge [C].
pub const Q_E: f64 = 1.602_176_634e-19;

/// Atomic mass unit [kg].
pub const AMU: f64 = 1.660_539_066_60e-27;

/// Electron mass [kg].
pub const M_ELECTRON: f64 = 9.109_383_701_5e-31;

/// Mass of a ⁹Be⁺ ion [kg] (atomic mass of ⁹Be minus one electron).
pub const M_BE9_ION: f64 = 9.012_183_1 * AMU - M_ELECTRON;

/// Wavelength of the g₁ ↔ e cooling transition of ⁹Be⁺ [m]
/// (transition frequency ≈ 957 THz).
pub const LAMBDA_BE9: f64 = 313.13e-9;

/// Magnetic field of the modeled trap [T].
pub const B_FIELD_NIST: f64 = 4.46;

/// Convert a cyclic frequency in Hz to an angular frequency in rad/s.
#[inline]
pub fn hz(f: f64) -> f64 {
    2.0 * std::f64::consts::PI * f
}

/// Convert an angular frequency in rad/s to a cyclic frequency in Hz.
#[inline]
pub fn to_hz(w: f64) -> f64 {
    w / (2.0 * std::f64::consts::PI)
}

//! Atomic parameters, laser geometry, Doppler-modulated detunings, and the
//! dimensionless electronic-motional coupling tensors.
//!
//! Both EIT beams propagate in the x-z plane at angles ±θ to the crystal
//! plane; their difference wavevector is along z when perfectly aligned. A
//! misalignment δθ rotates beam 2 in the x-z plane, which makes the two
//! Doppler modulations unequal.

use ndarray::{Array1, Array2, Array3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::constants::HBAR;
use crate::crystal::{IonCrystal, ModeDecomposition};
use crate::error::{Error, Result};

/// Three-level atom: two long-lived ground states g₁, g₂ and an excited
/// state e with decay channels e→g₁ (rate γ₁) and e→g₂ (rate γ₂).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AtomParams {
    /// Decay rate e→g₁ [rad/s].
    pub gamma1: f64,
    /// Decay rate e→g₂ [rad/s].
    pub gamma2: f64,
    /// Variance of cos θ_sc over the e→g₁ dipole emission pattern.
    pub u2_1: f64,
    /// Variance of cos θ_sc over the e→g₂ dipole emission pattern.
    pub u2_2: f64,
    /// Wavelength of the g₁↔e transition [m].
    pub wavelength: f64,
    /// Ion mass [kg].
    pub ion_mass: f64,
}

impl AtomParams {
    /// ⁹Be⁺ values for the modeled experiment.
    pub fn be9() -> Self {
        AtomParams {
            gamma1: crate::constants::hz(6.0e6),
            gamma2: crate::constants::hz(12.0e6),
            u2_1: 2.0 / 5.0,
            u2_2: 1.0 / 5.0,
            wavelength: crate::constants::LAMBDA_BE9,
            ion_mass: crate::constants::M_BE9_ION,
        }
    }

    /// Total decay rate Γ = γ₁ + γ₂ [rad/s].
    pub fn gamma_total(&self) -> f64 {
        self.gamma1 + self.gamma2
    }

    /// Magnitude of the optical wavevector 2π/λ [rad/m].
    pub fn k_mag(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.wavelength
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma1 >= 0.0 && self.gamma2 >= 0.0 && self.gamma_total() > 0.0) {
            return Err(Error::Parameter("decay rates must be non-negative and not both zero".into()));
        }
        for (name, u2) in [("u2_1", self.u2_1), ("u2_2", self.u2_2)] {
            if !(u2 > 0.0 && u2 <= 1.0) {
                return Err(Error::Parameter(format!("{name} must lie in (0, 1], got {u2}")));
            }
        }
        if !(self.wavelength > 0.0 && self.ion_mass > 0.0) {
            return Err(Error::Parameter("wavelength and mass must be positive".into()));
        }
        Ok(())
    }
}

/// Dressing-laser configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LaserGeometry {
    /// Common blue detuning Δ⁰ of both beams [rad/s]; must be positive.
    pub detuning0: f64,
    /// Beam half-angle from the crystal plane [rad].
    pub theta: f64,
    /// Misalignment rotation applied to beam 2 [rad].
    pub misalign: f64,
    /// Real Rabi amplitude of beam 1 [rad/s].
    pub rabi1: f64,
    /// Real Rabi amplitude of beam 2 [rad/s].
    pub rabi2: f64,
    /// Wavevector of beam 1 [rad/m].
    pub k1: [f64; 3],
    /// Wavevector of beam 2, including misalignment [rad/m].
    pub k2: [f64; 3],
}

impl LaserGeometry {
    pub fn new(
        detuning0: f64,
        theta: f64,
        misalign: f64,
        rabi1: f64,
        rabi2: f64,
        atom: &AtomParams,
    ) -> Result<Self> {
        if !(detuning0 > 0.0) {
            return Err(Error::Parameter("detuning0 must be positive (blue-detuned two-photon resonance)".into()));
        }
        let mut g = LaserGeometry { detuning0, theta, misalign, rabi1, rabi2, k1: [0.0; 3], k2: [0.0; 3] };
        let (k1, k2) = build_wavevectors(&g, atom);
        g.k1 = k1;
        g.k2 = k2;
        Ok(g)
    }

    pub fn k_x(&self, beam: usize) -> f64 {
        match beam {
            0 => self.k1[0],
            _ => self.k2[0],
        }
    }

    pub fn k_z(&self, beam: usize) -> f64 {
        match beam {
            0 => self.k1[2],
            _ => self.k2[2],
        }
    }

    pub fn rabi(&self, beam: usize) -> f64 {
        match beam {
            0 => self.rabi1,
            _ => self.rabi2,
        }
    }
}

/// Beam wavevectors: k₁ = |k| (cos θ, 0, sin θ) and k₂ = |k| (cos θ, 0,
/// −sin θ) rotated in the x-z plane by the misalignment δθ:
///
/// ```text
/// k₂ₓ ← k₂ₓ cos δθ + k₂_z sin δθ
/// k₂_z ← k₂_z cos δθ − k₂ₓ sin δθ
/// ```
pub fn build_wavevectors(geometry: &LaserGeometry, atom: &AtomParams) -> ([f64; 3], [f64; 3]) {
    let k = atom.k_mag();
    let k1 = [k * geometry.theta.cos(), 0.0, k * geometry.theta.sin()];
    let (k2x0, k2z0) = (k * geometry.theta.cos(), -k * geometry.theta.sin());
    let (c, s) = (geometry.misalign.cos(), geometry.misalign.sin());
    let k2 = [k2x0 * c + k2z0 * s, 0.0, k2z0 * c - k2x0 * s];
    (k1, k2)
}

/// Optimum dressing Rabi frequency Ω_opt = √(2 ω_COM (ω_COM + Δ⁰)) placing
/// the bright absorption peak at the COM frequency.
pub fn optimum_rabi(detuning0: f64, omega_com: f64) -> Result<f64> {
    if !(detuning0 > 0.0 && omega_com > 0.0) {
        return Err(Error::Parameter("optimum_rabi requires positive detuning and COM frequency".into()));
    }
    Ok((2.0 * omega_com * (omega_com + detuning0)).sqrt())
}

/// Instantaneous detuning of beam `beam` (0 or 1) seen by an ion that was at
/// (x0, y0) at t = 0 and co-rotates at ω_r:
///
/// Δ_μ(t) = Δ⁰ − k_{μ,x} v_x(t),  v_x(t) = ω_r (y0 cos ω_r t − x0 sin ω_r t).
pub fn doppler_detuning(
    geometry: &LaserGeometry,
    ion_position_at_0: (f64, f64),
    omega_r: f64,
    t: f64,
    beam: usize,
) -> f64 {
    let (x0, y0) = ion_position_at_0;
    let (s, c) = (omega_r * t).sin_cos();
    let vx = omega_r * (y0 * c - x0 * s);
    geometry.detuning0 - geometry.k_x(beam) * vx
}

/// Lamb-Dicke parameter η = k_z √(ħ / 2 M ω) for a mode at frequency ω.
pub fn lamb_dicke(k_z: f64, omega_n: f64, mass: f64) -> Result<f64> {
    if !(omega_n > 0.0) {
        return Err(Error::Parameter(format!("mode frequency must be positive, got {omega_n}")));
    }
    Ok(k_z * (HBAR / (2.0 * mass * omega_n)).sqrt())
}

/// Per-beam and recoil coupling tensors plus the complex per-ion Rabi
/// frequencies carrying the initial-position phase factors.
#[derive(Debug, Clone)]
pub struct CouplingTensor {
    /// λ_{jn}^μ = η_n^{k_{μ,z}} · M_{jn}; index [μ][j][n].
    pub lambda_laser: Array3<f64>,
    /// λ_{jn}^sc = η_n^{|k|} · M_{jn}; index [j][n].
    pub lambda_sc: Array2<f64>,
    /// Ω_{μ,j} = Ω_μ exp(i k_{μ,x} x_j(0)); index [μ][j].
    pub rabi_complex: Array2<Complex64>,
    /// Mode frequencies [rad/s], copied from the decomposition.
    pub freqs: Array1<f64>,
    /// Initial in-plane positions feeding the detunings; index [j] of (x0, y0).
    pub positions0: Vec<(f64, f64)>,
}

impl CouplingTensor {
    pub fn n_ions(&self) -> usize {
        self.lambda_sc.nrows()
    }

    pub fn n_modes(&self) -> usize {
        self.lambda_sc.ncols()
    }
}

/// Assemble the coupling tensors from a mode decomposition and geometry.
pub fn build_couplings(
    modes: &ModeDecomposition,
    geometry: &LaserGeometry,
    atom: &AtomParams,
    crystal: &IonCrystal,
) -> Result<CouplingTensor> {
    let n = modes.n_modes();
    if crystal.n_ions() != n {
        return Err(Error::Dimension(format!(
            "crystal has {} ions but mode decomposition has {}",
            crystal.n_ions(),
            n
        )));
    }
    let mut lambda_laser = Array3::<f64>::zeros((2, n, n));
    let mut lambda_sc = Array2::<f64>::zeros((n, n));
    let k_sc = atom.k_mag();
    for nn in 0..n {
        let eta_sc = lamb_dicke(k_sc, modes.freqs[nn], atom.ion_mass)?;
        let eta1 = lamb_dicke(geometry.k_z(0), modes.freqs[nn], atom.ion_mass)?;
        let eta2 = lamb_dicke(geometry.k_z(1), modes.freqs[nn], atom.ion_mass)?;
        for j in 0..n {
            let m = modes.mode_matrix[[j, nn]];
            lambda_laser[[0, j, nn]] = eta1 * m;
            lambda_laser[[1, j, nn]] = eta2 * m;
            lambda_sc[[j, nn]] = eta_sc * m;
        }
    }
    let mut rabi_complex = Array2::<Complex64>::zeros((2, n));
    let mut positions0 = Vec::with_capacity(n);
    for j in 0..n {
        let x0 = crystal.positions[[j, 0]];
        let y0 = crystal.positions[[j, 1]];
        positions0.push((x0, y0));
        for mu in 0..2 {
            let phase = Complex64::new(0.0, geometry.k_x(mu) * x0).exp();
            rabi_complex[[mu, j]] = geometry.rabi(mu) * phase;
        }
    }
    Ok(CouplingTensor {
        lambda_laser,
        lambda_sc,
        rabi_complex,
        freqs: Array1::from_vec(modes.freqs.clone()),
        positions0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constants::{hz, to_hz, M_BE9_ION};
    use crate::crystal::{solve_equilibrium, drumhead_modes, TrapParams};
    use approx::assert_abs_diff_eq;

    fn nist_trap(n: usize) -> TrapParams {
        TrapParams {
            ion_mass: M_BE9_ION,
            charge: crate::constants::Q_E,
            b_field: crate::constants::B_FIELD_NIST,
            omega_z: hz(1.59e6),
            omega_r: hz(180e3),
            wall_strength: 0.0045 * 2.83e12,
            n_ions: n,
        }
    }

    #[test]
    fn optimum_rabi_reference_points() {
        let wcom = hz(1.59e6);
        assert_abs_diff_eq!(to_hz(optimum_rabi(hz(180e6), wcom).unwrap()), 24.0e6, epsilon = 0.1e6);
        assert_abs_diff_eq!(to_hz(optimum_rabi(hz(360e6), wcom).unwrap()), 33.9e6, epsilon = 0.1e6);
        assert_abs_diff_eq!(to_hz(optimum_rabi(hz(400e6), wcom).unwrap()), 35.7e6, epsilon = 0.1e6);
        assert!(optimum_rabi(-1.0, wcom).is_err());
    }

    #[test]
    fn wavevectors_aligned_and_quarter_turn() {
        let atom = AtomParams::be9();
        let g = LaserGeometry::new(hz(360e6), 10f64.to_radians(), 0.0, 1.0, 1.0, &atom).unwrap();
        assert_abs_diff_eq!(g.k2[0], g.k1[0], epsilon = g.k1[0].abs() * 1e-12);
        assert_abs_diff_eq!(g.k2[2], -g.k1[2], epsilon = g.k1[2].abs() * 1e-12);

        let g90 = LaserGeometry::new(hz(360e6), 10f64.to_radians(), 90f64.to_radians(), 1.0, 1.0, &atom).unwrap();
        // Quarter rotation maps (k2x, k2z) -> (k2z, -k2x).
        assert_abs_diff_eq!(g90.k2[0], g.k2[2], epsilon = 1e-7);
        assert_abs_diff_eq!(g90.k2[2], -g.k2[0], epsilon = 1e-7);
    }

    /// Misalignment rotation against a direct 2×2 rotation-matrix evaluation.
    #[test]
    fn misalignment_matches_rotation_matrix() {
        let atom = AtomParams::be9();
        let (theta, dtheta) = (10f64.to_radians(), 0.5f64.to_radians());
        let g = LaserGeometry::new(hz(360e6), theta, dtheta, 1.0, 1.0, &atom).unwrap();
        let k = atom.k_mag();
        let v = [k * theta.cos(), -k * theta.sin()];
        let rot = [[dtheta.cos(), dtheta.sin()], [-dtheta.sin(), dtheta.cos()]];
        let expect = [rot[0][0] * v[0] + rot[0][1] * v[1], rot[1][0] * v[0] + rot[1][1] * v[1]];
        assert_abs_diff_eq!(g.k2[0], expect[0], epsilon = k * 1e-14);
        assert_abs_diff_eq!(g.k2[2], expect[1], epsilon = k * 1e-14);
    }

    #[test]
    fn doppler_detuning_cases() {
        let atom = AtomParams::be9();
        let g = LaserGeometry::new(hz(180e6), 10f64.to_radians(), 0.0, 1.0, 1.0, &atom).unwrap();
        let wr = hz(180e3);
        // Ion at the center sees the bare detuning at all times.
        for t in [0.0, 1e-6, 3.7e-6] {
            assert_abs_diff_eq!(doppler_detuning(&g, (0.0, 0.0), wr, t, 0), g.detuning0, epsilon = 1e-6);
        }
        // Modulation amplitude |k_x| ω_r r; at r = 50 μm this is ≈ 2π·178 MHz
        // (evaluated at λ = 313 nm as an independent arithmetic check).
        let r = 50e-6;
        let k313 = 2.0 * std::f64::consts::PI / 313e-9;
        let amp_oracle = k313 * 10f64.to_radians().cos() * wr * r;
        assert_abs_diff_eq!(to_hz(amp_oracle), 177.9e6, epsilon = 0.5e6);
        let amp = g.k_x(0) * wr * r;
        assert_abs_diff_eq!(amp / amp_oracle, 1.0, epsilon = 1e-3);
        // Periodicity.
        let period = 2.0 * std::f64::consts::PI / wr;
        let d0 = doppler_detuning(&g, (r, 0.0), wr, 0.37e-6, 0);
        let d1 = doppler_detuning(&g, (r, 0.0), wr, 0.37e-6 + period, 0);
        assert_abs_diff_eq!(d0, d1, epsilon = g.detuning0 * 1e-12);
        // Aligned beams see identical detunings.
        let e0 = doppler_detuning(&g, (r, 0.3 * r), wr, 1.1e-6, 0);
        let e1 = doppler_detuning(&g, (r, 0.3 * r), wr, 1.1e-6, 1);
        assert_abs_diff_eq!(e0, e1, epsilon = g.detuning0 * 1e-12);
    }

    #[test]
    fn lamb_dicke_reference_and_scaling() {
        assert_eq!(lamb_dicke(0.0, hz(1.59e6), M_BE9_ION).unwrap(), 0.0);
        let atom = AtomParams::be9();
        let kz = atom.k_mag() * 10f64.to_radians().sin();
        let eta = lamb_dicke(kz, hz(1.59e6), M_BE9_ION).unwrap();
        assert_abs_diff_eq!(eta, 0.066, epsilon = 1e-3);
        let eta4 = lamb_dicke(kz, 4.0 * hz(1.59e6), M_BE9_ION).unwrap();
        assert_abs_diff_eq!(eta / eta4, 2.0, epsilon = 1e-12);
        assert!(lamb_dicke(kz, 0.0, M_BE9_ION).is_err());
    }

    #[test]
    fn couplings_single_ion_and_normalization() {
        let atom = AtomParams::be9();
        let trap = nist_trap(1);
        let g = LaserGeometry::new(hz(360e6), 10f64.to_radians(), 0.0, hz(33.9e6), hz(33.9e6), &atom).unwrap();
        let c = solve_equilibrium(&trap, 0).unwrap();
        let modes = drumhead_modes(&c, &trap).unwrap();
        let t = build_couplings(&modes, &g, &atom, &c).unwrap();
        let eta1 = lamb_dicke(g.k_z(0), modes.freqs[0], atom.ion_mass).unwrap();
        assert_abs_diff_eq!(t.lambda_laser[[0, 0, 0]], eta1, epsilon = 1e-15);
        // Aligned: k2z = -k1z, so the second-beam coupling flips sign.
        assert_abs_diff_eq!(t.lambda_laser[[1, 0, 0]], -eta1, epsilon = eta1.abs() * 1e-10);
    }

    #[test]
    fn couplings_match_elementwise_reconstruction() {
        let atom = AtomParams::be9();
        let trap = nist_trap(7);
        let g = LaserGeometry::new(hz(360e6), 10f64.to_radians(), 0.3f64.to_radians(), hz(30e6), hz(30e6), &atom).unwrap();
        let c = solve_equilibrium(&trap, 0).unwrap();
        let modes = drumhead_modes(&c, &trap).unwrap();
        let t = build_couplings(&modes, &g, &atom, &c).unwrap();
        for mu in 0..2 {
            let kz = g.k_z(mu);
            for j in 0..7 {
                for n in 0..7 {
                    let eta = kz * (HBAR / (2.0 * atom.ion_mass * modes.freqs[n])).sqrt();
                    let expect = eta * modes.mode_matrix[[j, n]];
                    assert_abs_diff_eq!(t.lambda_laser[[mu, j, n]], expect, epsilon = 1e-15);
                }
            }
            // Σ_j (λ_jn^μ)² = (η_n^μ)² by eigenvector normalization.
            for n in 0..7 {
                let eta = kz * (HBAR / (2.0 * atom.ion_mass * modes.freqs[n])).sqrt();
                let sum: f64 = (0..7).map(|j| t.lambda_laser[[mu, j, n]].powi(2)).sum();
                assert_abs_diff_eq!(sum, eta * eta, epsilon = eta * eta * 1e-10);
            }
            // Pure phases: |Ω_{μ,j}| equals the beam amplitude everywhere.
            for j in 0..7 {
                assert_abs_diff_eq!(t.rabi_complex[[mu, j]].norm(), g.rabi(mu), epsilon = g.rabi(mu) * 1e-12);
            }
        }
        // COM coupling identical across ions (uniform eigenvector).
        let com = modes.com_index;
        for j in 1..7 {
            assert_abs_diff_eq!(
                t.lambda_laser[[0, j, com]],
                t.lambda_laser[[0, 0, com]],
                epsilon = t.lambda_laser[[0, 0, com]].abs() * 1e-8
            );
        }
    }
}

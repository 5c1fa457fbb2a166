//! Rotating-frame equilibrium configurations of a planar ion crystal and the
//! transverse ("drumhead") normal-mode decomposition.
//!
//! In the frame co-rotating with the crystal at the rotating-wall frequency
//! ω_r, the in-plane motion is governed by the effective pseudo-potential
//! with squared frequencies
//!
//! ```text
//! ω_{x,y}² = ω_r (Ω_c − ω_r) − ω_z²/2 ∓ δ_wall,     Ω_c = qB/M,
//! ```
//!
//! where δ_wall parametrizes the rotating-wall anisotropy (x is the soft
//! axis). Equilibria minimize the sum of this harmonic confinement and the
//! pairwise Coulomb repulsion. The drumhead modes follow from the transverse
//! stiffness matrix evaluated at the equilibrium.

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constants::K_E;
use crate::error::{Error, Result};
use crate::linalg::eigh;

/// Static trap parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrapParams {
    /// Ion mass [kg].
    pub ion_mass: f64,
    /// Ion charge [C].
    pub charge: f64,
    /// Magnetic field [T].
    pub b_field: f64,
    /// Transverse (axial) trap frequency = COM drumhead frequency [rad/s].
    pub omega_z: f64,
    /// Rotating-wall rotation frequency [rad/s].
    pub omega_r: f64,
    /// Rotating-wall in-plane anisotropy [rad²/s²].
    pub wall_strength: f64,
    /// Number of ions.
    pub n_ions: usize,
}

impl TrapParams {
    /// Cyclotron frequency Ω_c = qB/M [rad/s].
    pub fn cyclotron(&self) -> f64 {
        self.charge * self.b_field / self.ion_mass
    }

    /// Isotropic part of the in-plane squared trap frequency [rad²/s²].
    pub fn in_plane_base(&self) -> f64 {
        self.omega_r * (self.cyclotron() - self.omega_r) - 0.5 * self.omega_z * self.omega_z
    }

    /// Squared frequency of the soft in-plane axis (x) [rad²/s²].
    pub fn omega_x_sq(&self) -> f64 {
        self.in_plane_base() - self.wall_strength
    }

    /// Squared frequency of the stiff in-plane axis (y) [rad²/s²].
    pub fn omega_y_sq(&self) -> f64 {
        self.in_plane_base() + self.wall_strength
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ion_mass > 0.0 && self.charge > 0.0) {
            return Err(Error::Parameter("ion mass and charge must be positive".into()));
        }
        if !(self.omega_z > 0.0) {
            return Err(Error::Parameter("omega_z must be positive".into()));
        }
        if !(self.omega_r > 0.0) {
            return Err(Error::Parameter("omega_r must be positive".into()));
        }
        if self.n_ions == 0 {
            return Err(Error::Parameter("need at least one ion".into()));
        }
        if self.omega_x_sq() <= 0.0 {
            return Err(Error::Parameter(format!(
                "in-plane confinement is not positive: ω_r(Ω_c−ω_r) − ω_z²/2 − δ_wall = {:.4e} rad²/s²",
                self.omega_x_sq()
            )));
        }
        Ok(())
    }

    /// Characteristic inter-ion length scale (k_e q² / M ω_z²)^{1/3} [m].
    pub fn length_scale(&self) -> f64 {
        (K_E * self.charge * self.charge / (self.ion_mass * self.omega_z * self.omega_z)).cbrt()
    }

    /// Default force tolerance for the equilibrium solver [N].
    ///
    /// Scaled so that the residual displacement it permits is ~1e-7 of the
    /// characteristic inter-ion distance at the soft in-plane stiffness.
    pub fn default_tol_force(&self) -> f64 {
        let ell = (K_E * self.charge * self.charge / (self.ion_mass * self.omega_x_sq())).cbrt();
        1e-7 * self.ion_mass * self.omega_x_sq() * ell
    }
}

/// A converged (or explicitly constructed) planar crystal configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IonCrystal {
    /// Rotating-frame positions, N×2 [m].
    pub positions: Array2<f64>,
    /// Total potential energy at the configuration [J].
    pub potential_energy: f64,
    /// Largest force-component magnitude at the configuration [N].
    pub residual_gradient: f64,
    /// Whether this configuration came out of the equilibrium solver.
    pub solved: bool,
}

impl IonCrystal {
    pub fn n_ions(&self) -> usize {
        self.positions.nrows()
    }

    /// Build a crystal from explicitly chosen positions (toy configurations
    /// such as one or two ions revolving at a fixed radius). The residual
    /// gradient is evaluated but not required to vanish.
    pub fn from_positions(positions: Array2<f64>, trap: &TrapParams) -> Self {
        let energy = potential_energy(&positions, trap);
        let mut grad = Array2::<f64>::zeros(positions.raw_dim());
        gradient(&positions, trap, &mut grad);
        let residual = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        IonCrystal { positions, potential_energy: energy, residual_gradient: residual, solved: false }
    }

    /// One ion at radius `r` on the x axis, or two ions diametrically
    /// opposite at radius `r`.
    pub fn ring(n: usize, radius: f64, trap: &TrapParams) -> Result<Self> {
        if n == 0 || n > 2 {
            return Err(Error::Parameter("ring configurations support 1 or 2 ions".into()));
        }
        let mut pos = Array2::<f64>::zeros((n, 2));
        pos[[0, 0]] = radius;
        if n == 2 {
            pos[[1, 0]] = -radius;
        }
        Ok(Self::from_positions(pos, trap))
    }

    /// Smallest pairwise distance [m].
    pub fn min_distance(&self) -> f64 {
        let n = self.n_ions();
        let mut dmin = f64::INFINITY;
        for j in 0..n {
            for k in j + 1..n {
                let dx = self.positions[[j, 0]] - self.positions[[k, 0]];
                let dy = self.positions[[j, 1]] - self.positions[[k, 1]];
                dmin = dmin.min((dx * dx + dy * dy).sqrt());
            }
        }
        dmin
    }
}

/// Drumhead normal-mode data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeDecomposition {
    /// Mode frequencies, sorted descending [rad/s].
    pub freqs: Vec<f64>,
    /// N×N orthonormal matrix; column n is the eigenvector of mode n.
    pub mode_matrix: Array2<f64>,
    /// Index of the uniform center-of-mass mode (always 0 after sorting).
    pub com_index: usize,
    /// Spread max − min of the drumhead band [rad/s].
    pub bandwidth: f64,
}

impl ModeDecomposition {
    pub fn n_modes(&self) -> usize {
        self.freqs.len()
    }
}

fn potential_energy(pos: &Array2<f64>, trap: &TrapParams) -> f64 {
    let n = pos.nrows();
    let (wx2, wy2) = (trap.omega_x_sq(), trap.omega_y_sq());
    let kq2 = K_E * trap.charge * trap.charge;
    let mut v = 0.0;
    for j in 0..n {
        v += 0.5 * trap.ion_mass * (wx2 * pos[[j, 0]] * pos[[j, 0]] + wy2 * pos[[j, 1]] * pos[[j, 1]]);
    }
    for j in 0..n {
        for k in j + 1..n {
            let dx = pos[[j, 0]] - pos[[k, 0]];
            let dy = pos[[j, 1]] - pos[[k, 1]];
            v += kq2 / (dx * dx + dy * dy).sqrt();
        }
    }
    v
}

fn gradient(pos: &Array2<f64>, trap: &TrapParams, grad: &mut Array2<f64>) {
    let n = pos.nrows();
    let (wx2, wy2) = (trap.omega_x_sq(), trap.omega_y_sq());
    let kq2 = K_E * trap.charge * trap.charge;
    for j in 0..n {
        grad[[j, 0]] = trap.ion_mass * wx2 * pos[[j, 0]];
        grad[[j, 1]] = trap.ion_mass * wy2 * pos[[j, 1]];
    }
    for j in 0..n {
        for k in j + 1..n {
            let dx = pos[[j, 0]] - pos[[k, 0]];
            let dy = pos[[j, 1]] - pos[[k, 1]];
            let d2 = dx * dx + dy * dy;
            let f = kq2 / (d2 * d2.sqrt());
            grad[[j, 0]] -= f * dx;
            grad[[j, 1]] -= f * dy;
            grad[[k, 0]] += f * dx;
            grad[[k, 1]] += f * dy;
        }
    }
}

/// Triangular-lattice seed: the `n` lattice sites closest to the origin,
/// rescaled to the optimal isotropic breathing factor.
fn lattice_seed(trap: &TrapParams, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = trap.n_ions;
    let wbar2 = (trap.omega_x_sq() * trap.omega_y_sq()).sqrt();
    let a = (2.0 * K_E * trap.charge * trap.charge / (trap.ion_mass * wbar2)).cbrt();
    let mut sites: Vec<(f64, f64, f64)> = Vec::new();
    let reach = (n as f64).sqrt() as i64 + 3;
    for i in -reach..=reach {
        for j in -reach..=reach {
            let x = a * (i as f64 + 0.5 * j as f64);
            let y = a * (3.0f64.sqrt() / 2.0) * j as f64;
            sites.push((x * x + y * y, x, y));
        }
    }
    sites.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.total_cmp(&q.1)).then(p.2.total_cmp(&q.2)));
    let mut pos = Array2::<f64>::zeros((n, 2));
    for (row, site) in sites.iter().take(n).enumerate() {
        pos[[row, 0]] = site.1;
        pos[[row, 1]] = site.2;
    }
    // Optimal isotropic rescale: V(s·X) = A s² + B/s minimized at (B/2A)^{1/3}.
    let mut harm = 0.0;
    let mut coul = 0.0;
    let kq2 = K_E * trap.charge * trap.charge;
    for j in 0..n {
        harm += 0.5
            * trap.ion_mass
            * (trap.omega_x_sq() * pos[[j, 0]] * pos[[j, 0]]
                + trap.omega_y_sq() * pos[[j, 1]] * pos[[j, 1]]);
        for k in j + 1..n {
            let dx = pos[[j, 0]] - pos[[k, 0]];
            let dy = pos[[j, 1]] - pos[[k, 1]];
            coul += kq2 / (dx * dx + dy * dy).sqrt();
        }
    }
    if n > 1 && harm > 0.0 {
        let s = (coul / (2.0 * harm)).cbrt();
        pos.mapv_inplace(|x| x * s);
    }
    // Small random perturbation to break lattice symmetries.
    for x in pos.iter_mut() {
        *x += a * 1e-3 * rng.gen_range(-1.0..1.0);
    }
    pos
}

/// Solve for the rotating-frame equilibrium configuration.
///
/// Barzilai-Borwein gradient descent with an Armijo backtracking safeguard,
/// started from a seeded triangular lattice, followed by a Newton polish that
/// pushes the residual force to the tolerance (plain descent stalls once the
/// energy decrease per step drops below f64 resolution). Deterministic for a
/// fixed seed.
pub fn solve_equilibrium(trap: &TrapParams, rng_seed: u64) -> Result<IonCrystal> {
    solve_equilibrium_with(trap, rng_seed, trap.default_tol_force(), 200_000)
}

pub fn solve_equilibrium_with(
    trap: &TrapParams,
    rng_seed: u64,
    tol_force: f64,
    max_iter: usize,
) -> Result<IonCrystal> {
    trap.validate()?;
    let n = trap.n_ions;
    if n == 1 {
        return Ok(IonCrystal {
            positions: Array2::zeros((1, 2)),
            potential_energy: 0.0,
            residual_gradient: 0.0,
            solved: true,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut pos = lattice_seed(trap, &mut rng);
    let mut grad = Array2::<f64>::zeros((n, 2));
    let mut energy = potential_energy(&pos, trap);
    gradient(&pos, trap, &mut grad);

    let alpha0 = 1.0 / (trap.ion_mass * (trap.omega_x_sq() + trap.omega_y_sq()));
    let mut alpha = alpha0;
    let mut prev_pos = pos.clone();
    let mut prev_grad = grad.clone();
    let mut have_prev = false;

    // Coarse target for the descent phase; Newton takes it the rest of the way.
    let ell = (K_E * trap.charge * trap.charge / (trap.ion_mass * trap.omega_x_sq())).cbrt();
    let coarse_tol = (1e-4 * trap.ion_mass * trap.omega_x_sq() * ell).max(tol_force);

    let mut stalled = false;
    for iter in 0..max_iter {
        let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if gmax < coarse_tol || stalled {
            break;
        }
        if iter + 1 == max_iter {
            return Err(Error::NonConvergence { iterations: max_iter, residual: gmax, tolerance: tol_force });
        }

        if have_prev {
            // BB2 step length (Δx·Δg)/(Δg·Δg), safeguarded.
            let mut sy = 0.0;
            let mut yy = 0.0;
            for j in 0..n {
                for d in 0..2 {
                    let s = pos[[j, d]] - prev_pos[[j, d]];
                    let y = grad[[j, d]] - prev_grad[[j, d]];
                    sy += s * y;
                    yy += y * y;
                }
            }
            if sy > 0.0 && yy > 0.0 {
                alpha = (sy / yy).clamp(1e-4 * alpha0, 1e4 * alpha0);
            } else {
                alpha = alpha0;
            }
        }

        prev_pos.assign(&pos);
        prev_grad.assign(&grad);
        have_prev = true;

        let gnorm2: f64 = grad.iter().map(|g| g * g).sum();
        let mut step = alpha;
        let mut accepted = false;
        for _ in 0..80 {
            let trial = &prev_pos - &(step * &prev_grad);
            let etrial = potential_energy(&trial, trap);
            if etrial <= energy - 1e-4 * step * gnorm2 {
                pos = trial;
                energy = etrial;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // Energy decrease fell below f64 resolution; hand over to Newton.
            pos = prev_pos.clone();
            stalled = true;
        }
        gradient(&pos, trap, &mut grad);
    }

    // Newton polish: solve H δ = g on the in-plane Hessian. Near the minimum
    // H is positive definite and convergence is quadratic.
    for _ in 0..40 {
        gradient(&pos, trap, &mut grad);
        let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if gmax < tol_force {
            energy = potential_energy(&pos, trap);
            return Ok(IonCrystal { positions: pos, potential_energy: energy, residual_gradient: gmax, solved: true });
        }
        let h = in_plane_hessian(&pos, trap);
        let hvec: Vec<f64> = h.iter().copied().collect();
        let gvec: Vec<f64> = grad.iter().copied().collect();
        match crate::linalg::lu_solve_real(hvec, gvec) {
            Ok(delta) => {
                for (i, x) in pos.iter_mut().enumerate() {
                    *x -= delta[i];
                }
            }
            Err(_) => break,
        }
    }
    gradient(&pos, trap, &mut grad);
    let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    if gmax < tol_force {
        energy = potential_energy(&pos, trap);
        return Ok(IonCrystal { positions: pos, potential_energy: energy, residual_gradient: gmax, solved: true });
    }
    Err(Error::NonConvergence { iterations: max_iter, residual: gmax, tolerance: tol_force })
}

/// Transverse stiffness matrix divided by the ion mass, i.e. the matrix whose
/// eigenvalues are the squared drumhead frequencies.
fn stiffness_over_mass(crystal: &IonCrystal, trap: &TrapParams) -> Array2<f64> {
    let n = crystal.n_ions();
    let kq2m = K_E * trap.charge * trap.charge / trap.ion_mass;
    let mut k = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        k[[j, j]] = trap.omega_z * trap.omega_z;
    }
    for j in 0..n {
        for l in j + 1..n {
            let dx = crystal.positions[[j, 0]] - crystal.positions[[l, 0]];
            let dy = crystal.positions[[j, 1]] - crystal.positions[[l, 1]];
            let d3 = (dx * dx + dy * dy).powf(1.5);
            let c = kq2m / d3;
            k[[j, l]] += c;
            k[[l, j]] += c;
            k[[j, j]] -= c;
            k[[l, l]] -= c;
        }
    }
    k
}

/// Diagonalize the transverse stiffness matrix.
///
/// Every row of the stiffness matrix sums to M ω_z², so the uniform vector is
/// an exact eigenvector at ω_z, and since the Coulomb part is negative
/// semidefinite it is also the highest drumhead mode.
pub fn drumhead_modes(crystal: &IonCrystal, trap: &TrapParams) -> Result<ModeDecomposition> {
    let n = crystal.n_ions();
    let k = stiffness_over_mass(crystal, trap);
    let (w2, vecs) = eigh(&k)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| w2[b].total_cmp(&w2[a]));

    let mut freqs = Vec::with_capacity(n);
    let mut mode_matrix = Array2::<f64>::zeros((n, n));
    for (slot, &src) in order.iter().enumerate() {
        if w2[src] <= 0.0 {
            return Err(Error::Unstable { mode: slot, eigenvalue: w2[src] });
        }
        freqs.push(w2[src].sqrt());
        // Sign convention: make the largest-magnitude component positive.
        let col = vecs.column(src);
        let mut lead = 0usize;
        for i in 0..n {
            if col[i].abs() > col[lead].abs() {
                lead = i;
            }
        }
        let sgn = if col[lead] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            mode_matrix[[i, slot]] = sgn * col[i];
        }
    }

    // The COM mode has the largest overlap with the uniform vector; after
    // descending sort it must sit in slot 0.
    let mut com_index = 0usize;
    let mut best = -1.0;
    let uniform = 1.0 / (n as f64).sqrt();
    for slot in 0..n {
        let ov: f64 = (0..n).map(|i| mode_matrix[[i, slot]] * uniform).sum::<f64>().abs();
        if ov > best {
            best = ov;
            com_index = slot;
        }
    }

    let bandwidth = freqs[0] - freqs[n - 1];
    Ok(ModeDecomposition { freqs, mode_matrix, com_index, bandwidth })
}

/// Scan a logarithmic grid for the smallest rotating-wall strength at which
/// the crystal is rigid: the minimizer converges, the in-plane Hessian has a
/// positive gap (orientation locked), and all drumhead modes are stable.
///
/// Returns the selected wall strength [rad²/s²].
pub fn auto_wall_strength(trap_no_wall: &TrapParams, rng_seed: u64) -> Result<f64> {
    let base = trap_no_wall.in_plane_base();
    if base <= 0.0 {
        return Err(Error::Parameter("in-plane confinement is not positive even without a wall".into()));
    }
    let fracs: Vec<f64> = (0..14).map(|i| 10f64.powf(-4.0 + i as f64 * (3.5 / 13.0))).collect();
    for frac in fracs {
        let wall = frac * base;
        let mut trap = *trap_no_wall;
        trap.wall_strength = wall;
        if trap.validate().is_err() {
            continue;
        }
        let Ok(crystal) = solve_equilibrium(&trap, rng_seed) else { continue };
        if drumhead_modes(&crystal, &trap).is_err() {
            continue;
        }
        if in_plane_rigidity_gap(&crystal, &trap)? > 1e-6 {
            return Ok(wall);
        }
    }
    Err(Error::Parameter("no wall strength on the scan grid produced a rigid planar crystal".into()))
}

/// In-plane Hessian of the potential at the given positions (2N×2N, ordered
/// x₀ y₀ x₁ y₁ …).
fn in_plane_hessian(pos: &Array2<f64>, trap: &TrapParams) -> Array2<f64> {
    let n = pos.nrows();
    let m = trap.ion_mass;
    let kq2 = K_E * trap.charge * trap.charge;
    let mut h = Array2::<f64>::zeros((2 * n, 2 * n));
    for j in 0..n {
        h[[2 * j, 2 * j]] = m * trap.omega_x_sq();
        h[[2 * j + 1, 2 * j + 1]] = m * trap.omega_y_sq();
    }
    for j in 0..n {
        for l in j + 1..n {
            let dx = pos[[j, 0]] - pos[[l, 0]];
            let dy = pos[[j, 1]] - pos[[l, 1]];
            let d2 = dx * dx + dy * dy;
            let d5 = d2 * d2 * d2.sqrt();
            // Second derivative of k_e q² / d: (3 u uᵀ − d² I)/d⁵.
            let txx = kq2 * (3.0 * dx * dx - d2) / d5;
            let tyy = kq2 * (3.0 * dy * dy - d2) / d5;
            let txy = kq2 * 3.0 * dx * dy / d5;
            for (a, b, t) in [(0, 0, txx), (1, 1, tyy), (0, 1, txy), (1, 0, txy)] {
                h[[2 * j + a, 2 * j + b]] += t;
                h[[2 * l + a, 2 * l + b]] += t;
                h[[2 * j + a, 2 * l + b]] -= t;
                h[[2 * l + a, 2 * j + b]] -= t;
            }
        }
    }
    h
}

/// Smallest over largest eigenvalue of the in-plane Hessian of the potential.
fn in_plane_rigidity_gap(crystal: &IonCrystal, trap: &TrapParams) -> Result<f64> {
    let h = in_plane_hessian(&crystal.positions, trap);
    let (vals, _) = eigh(&h)?;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in vals {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Ok(lo / hi)
}

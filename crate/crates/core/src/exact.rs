//! Reference solver: exact time evolution of the density matrix of a single
//! revolving ion — three internal levels {e, g₁, g₂} tensored with one
//! truncated harmonic mode — under the second-order Lamb-Dicke master
//! equation with time-dependent Doppler-modulated detunings.
//!
//! "Exact" refers to the evolution of the second-order-expanded master
//! equation (the starting point of the moment hierarchy), not of the
//! un-expanded recoil integral: the recoil enters through its second-moment
//! form, weighted by the ⟨u²⟩ variance of the dipole emission pattern. This
//! solver is the oracle against which the moment kernel is validated.
//!
//! The Hamiltonian splits into a time-dependent diagonal (mode energy plus
//! instantaneous detunings) and a static block-banded coupling
//! σ_{eg_μ} ⊗ C_μ + h.c. with
//!
//! ```text
//! C_μ = (Ω_μ/2) (1 + i λ_μ X − λ_μ²/2 X²),     X = b + b†,
//! ```
//!
//! so a right-hand-side evaluation is a handful of banded-times-dense block
//! products plus elementwise work, all O(d²) in the total dimension d.

use num_complex::Complex64 as C64;

use crate::constants::to_hz;
use crate::crystal::TrapParams;
use crate::eitmodel::{doppler_detuning, lamb_dicke, AtomParams, LaserGeometry};
use crate::engines::CoolingCurve;
use crate::error::{Error, Result};
use crate::integrate::{rk4_step, Rk4Workspace};
use crate::moments::{MomentState, SigmaLabel, SIGMA_LABELS};

/// Internal-state ordering within the tensor basis |s⟩ ⊗ |n⟩.
pub const S_E: usize = 0;
pub const S_G1: usize = 1;
pub const S_G2: usize = 2;

/// Density matrix on the {e, g₁, g₂} ⊗ Fock(n_max) space.
#[derive(Debug, Clone)]
pub struct DensityMatrix {
    /// Row-major dim×dim with dim = 3 (n_max + 1).
    pub data: Vec<C64>,
    pub n_max: usize,
}

impl DensityMatrix {
    pub fn dim(&self) -> usize {
        3 * (self.n_max + 1)
    }

    #[inline]
    pub fn idx(&self, s: usize, n: usize) -> usize {
        s * (self.n_max + 1) + n
    }

    /// ρ(0) = |g₁⟩⟨g₁| ⊗ thermal(n̄), renormalized on the truncated ladder.
    pub fn thermal_g1(nbar0: f64, n_max: usize) -> Self {
        let nf = n_max + 1;
        let mut rho = DensityMatrix { data: vec![C64::new(0.0, 0.0); 9 * nf * nf], n_max };
        let mut weights = vec![0.0; nf];
        let mut z = 0.0;
        for (n, w) in weights.iter_mut().enumerate() {
            *w = if nbar0 > 0.0 {
                (nbar0 / (1.0 + nbar0)).powi(n as i32) / (1.0 + nbar0)
            } else if n == 0 {
                1.0
            } else {
                0.0
            };
            z += *w;
        }
        let dim = rho.dim();
        for n in 0..nf {
            let i = rho.idx(S_G1, n);
            rho.data[i * dim + i] = C64::new(weights[n] / z, 0.0);
        }
        rho
    }

    pub fn trace(&self) -> C64 {
        let dim = self.dim();
        (0..dim).map(|i| self.data[i * dim + i]).sum()
    }

    pub fn hermiticity_error(&self) -> f64 {
        let dim = self.dim();
        let mut e = 0.0f64;
        for r in 0..dim {
            for c in r..dim {
                e = e.max((self.data[r * dim + c] - self.data[c * dim + r].conj()).norm());
            }
        }
        e
    }

    /// tr(ρ²); equals 1 for pure states.
    pub fn purity(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Total population of the top Fock level, over all internal states.
    pub fn top_fock_population(&self) -> f64 {
        let dim = self.dim();
        (0..3).map(|s| self.data[self.idx(s, self.n_max) * dim + self.idx(s, self.n_max)].re).sum()
    }

    /// ⟨b†b⟩.
    pub fn nbar(&self) -> f64 {
        let dim = self.dim();
        let mut acc = 0.0;
        for s in 0..3 {
            for n in 0..=self.n_max {
                acc += n as f64 * self.data[self.idx(s, n) * dim + self.idx(s, n)].re;
            }
        }
        acc
    }

    /// Populations (p_e, p_g1, p_g2).
    pub fn populations(&self) -> (f64, f64, f64) {
        let dim = self.dim();
        let pop = |s: usize| -> f64 {
            (0..=self.n_max).map(|n| self.data[self.idx(s, n) * dim + self.idx(s, n)].re).sum()
        };
        (pop(S_E), pop(S_G1), pop(S_G2))
    }

    /// Smallest eigenvalue, from the real-symmetric embedding
    /// [[Re ρ, −Im ρ], [Im ρ, Re ρ]] of the Hermitian matrix.
    pub fn min_eigenvalue(&self) -> Result<f64> {
        let dim = self.dim();
        let mut m = ndarray::Array2::<f64>::zeros((2 * dim, 2 * dim));
        for r in 0..dim {
            for c in 0..dim {
                let z = self.data[r * dim + c];
                m[[r, c]] = z.re;
                m[[r + dim, c + dim]] = z.re;
                m[[r + dim, c]] = z.im;
                m[[r, c + dim]] = -z.im;
            }
        }
        let (vals, _) = crate::linalg::eigh(&m)?;
        Ok(vals.into_iter().fold(f64::INFINITY, f64::min))
    }
}

/// Real symmetric banded ladder operators on the Fock space.
struct FockOps {
    nf: usize,
    /// X off-diagonal band: x[n] couples |n⟩ ↔ |n+1⟩ with weight √(n+1).
    x1: Vec<f64>,
    /// X² diagonal (2n+1) and second band √((n+1)(n+2)).
    x2_diag: Vec<f64>,
    x2_band: Vec<f64>,
}

impl FockOps {
    fn new(nf: usize) -> Self {
        let x1: Vec<f64> = (0..nf.saturating_sub(1)).map(|n| ((n + 1) as f64).sqrt()).collect();
        // X² of the *truncated* X, so that the recoil superoperator is
        // exactly trace-preserving on the truncated ladder: the top diagonal
        // element is n_max rather than 2 n_max + 1.
        let x2_diag: Vec<f64> = (0..nf)
            .map(|n| n as f64 + if n + 1 < nf { (n + 1) as f64 } else { 0.0 })
            .collect();
        let x2_band: Vec<f64> =
            (0..nf.saturating_sub(2)).map(|n| (((n + 1) * (n + 2)) as f64).sqrt()).collect();
        FockOps { nf, x1, x2_diag, x2_band }
    }
}

/// Pentadiagonal complex operator stored by band offsets −2..=+2.
/// `band[d][i]` is the element (i, i + d − 2) where valid.
#[derive(Clone)]
struct Banded5 {
    nf: usize,
    band: [Vec<C64>; 5],
}

impl Banded5 {
    fn zero(nf: usize) -> Self {
        Banded5 { nf, band: std::array::from_fn(|_| vec![C64::new(0.0, 0.0); nf]) }
    }

    /// C_μ = (Ω/2)(1 + iλX − (λ²/2)X²).
    fn coupling(nf: usize, ops: &FockOps, omega_half: C64, lambda: f64) -> Self {
        let mut c = Banded5::zero(nf);
        let i = C64::new(0.0, 1.0);
        for n in 0..nf {
            c.band[2][n] = omega_half * (1.0 - 0.5 * lambda * lambda * ops.x2_diag[n]);
        }
        for n in 0..nf - 1 {
            // (i λ X): symmetric band √(n+1) at (n, n+1) and (n+1, n).
            c.band[3][n] = omega_half * i * lambda * ops.x1[n];
            c.band[1][n + 1] = omega_half * i * lambda * ops.x1[n];
        }
        for n in 0..nf.saturating_sub(2) {
            let v = omega_half * (-0.5 * lambda * lambda) * ops.x2_band[n];
            c.band[4][n] = v;
            c.band[0][n + 2] = v;
        }
        c
    }

    fn adjoint(&self) -> Self {
        let mut a = Banded5::zero(self.nf);
        for d in 0..5i64 {
            let o = d - 2;
            for i in 0..self.nf {
                let jj = i as i64 + o;
                if jj < 0 || jj >= self.nf as i64 {
                    continue;
                }
                // A†[j, i] = conj(A[i, j]); offset flips sign.
                a.band[(2 - o) as usize][jj as usize] = self.band[d as usize][i].conj();
            }
        }
        a
    }
}

/// Accumulate `dst_block_rows += B · src_block_rows` where the blocks are
/// groups of `nf` consecutive rows of a dim-column matrix.
#[inline]
fn banded_block_mul_add(
    b: &Banded5,
    src: &[C64],
    src_row0: usize,
    dst: &mut [C64],
    dst_row0: usize,
    dim: usize,
) {
    let nf = b.nf;
    for d in 0..5usize {
        let o = d as i64 - 2;
        for i in 0..nf {
            let jj = i as i64 + o;
            if jj < 0 || jj >= nf as i64 {
                continue;
            }
            let coeff = b.band[d][i];
            if coeff.re == 0.0 && coeff.im == 0.0 {
                continue;
            }
            let srow = (src_row0 + jj as usize) * dim;
            let drow = (dst_row0 + i) * dim;
            for c in 0..dim {
                dst[drow + c] += coeff * src[srow + c];
            }
        }
    }
}

/// Precomputed operator data for the single-ion master equation.
pub struct ExactSystem {
    nf: usize,
    dim: usize,
    omega_mode: f64,
    geometry: LaserGeometry,
    omega_r: f64,
    position0: (f64, f64),
    c1: Banded5,
    c2: Banded5,
    c1_dag: Banded5,
    c2_dag: Banded5,
    gamma: [f64; 2],
    gamma_tot: f64,
    /// Γ_μ ⟨u²⟩_μ λ_sc² recoil weights.
    w_rec: [f64; 2],
    ops: FockOps,
    /// Scratch: V·ρ and the extracted ee block with its X-transforms.
    w_buf: Vec<C64>,
    ee: Vec<C64>,
    xe: Vec<C64>,
    xex: Vec<C64>,
    x2e_sym: Vec<C64>,
}

impl ExactSystem {
    /// Build the system for one ion revolving at `radius` (placed on the
    /// x-axis at t = 0).
    pub fn new(
        trap: &TrapParams,
        atom: &AtomParams,
        geometry: &LaserGeometry,
        radius: f64,
        n_max: usize,
    ) -> Result<Self> {
        atom.validate()?;
        let nf = n_max + 1;
        let dim = 3 * nf;
        let omega_mode = trap.omega_z;
        let ops = FockOps::new(nf);
        let lambda1 = lamb_dicke(geometry.k_z(0), omega_mode, atom.ion_mass)?;
        let lambda2 = lamb_dicke(geometry.k_z(1), omega_mode, atom.ion_mass)?;
        let lambda_sc = lamb_dicke(atom.k_mag(), omega_mode, atom.ion_mass)?;
        let phase1 = C64::new(0.0, geometry.k_x(0) * radius).exp();
        let phase2 = C64::new(0.0, geometry.k_x(1) * radius).exp();
        let c1 = Banded5::coupling(nf, &ops, 0.5 * geometry.rabi1 * phase1, lambda1);
        let c2 = Banded5::coupling(nf, &ops, 0.5 * geometry.rabi2 * phase2, lambda2);
        let c1_dag = c1.adjoint();
        let c2_dag = c2.adjoint();
        Ok(ExactSystem {
            nf,
            dim,
            omega_mode,
            geometry: *geometry,
            omega_r: trap.omega_r,
            position0: (radius, 0.0),
            c1,
            c2,
            c1_dag,
            c2_dag,
            gamma: [atom.gamma1, atom.gamma2],
            gamma_tot: atom.gamma_total(),
            w_rec: [
                atom.gamma1 * atom.u2_1 * lambda_sc * lambda_sc,
                atom.gamma2 * atom.u2_2 * lambda_sc * lambda_sc,
            ],
            ops,
            w_buf: vec![C64::new(0.0, 0.0); dim * dim],
            ee: vec![C64::new(0.0, 0.0); nf * nf],
            xe: vec![C64::new(0.0, 0.0); nf * nf],
            xex: vec![C64::new(0.0, 0.0); nf * nf],
            x2e_sym: vec![C64::new(0.0, 0.0); nf * nf],
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Master-equation right-hand side dρ/dt at time `t`.
    pub fn rhs(&mut self, t: f64, rho: &[C64], drho: &mut [C64]) {
        let nf = self.nf;
        let dim = self.dim;
        debug_assert_eq!(rho.len(), dim * dim);
        let d1 = doppler_detuning(&self.geometry, self.position0, self.omega_r, t, 0);
        let d2 = doppler_detuning(&self.geometry, self.position0, self.omega_r, t, 1);

        // W = V ρ with V the static off-diagonal coupling.
        self.w_buf.fill(C64::new(0.0, 0.0));
        banded_block_mul_add(&self.c1, rho, S_G1 * nf, &mut self.w_buf, S_E * nf, dim);
        banded_block_mul_add(&self.c2, rho, S_G2 * nf, &mut self.w_buf, S_E * nf, dim);
        banded_block_mul_add(&self.c1_dag, rho, S_E * nf, &mut self.w_buf, S_G1 * nf, dim);
        banded_block_mul_add(&self.c2_dag, rho, S_E * nf, &mut self.w_buf, S_G2 * nf, dim);

        // dρ = −i (Wρ − (Wρ)†) − i (D_r − D_c) ρ with the diagonal D.
        let mi = C64::new(0.0, -1.0);
        for r in 0..dim {
            let (sr, nr) = (r / nf, r % nf);
            let dr = self.omega_mode * nr as f64
                + if sr == S_G1 { d1 } else if sr == S_G2 { d2 } else { 0.0 };
            for c in 0..dim {
                let (scs, ncs) = (c / nf, c % nf);
                let dc = self.omega_mode * ncs as f64
                    + if scs == S_G1 { d1 } else if scs == S_G2 { d2 } else { 0.0 };
                let w = self.w_buf[r * dim + c] - self.w_buf[c * dim + r].conj();
                drho[r * dim + c] = mi * (w + (dr - dc) * rho[r * dim + c]);
            }
        }

        // Flat decay: Γ_μ (σ_{gμe} ρ σ_{egμ} − ½{σ_ee, ρ}).
        let half_g = 0.5 * self.gamma_tot;
        for i in 0..nf {
            let re = (S_E * nf + i) * dim;
            for c in 0..dim {
                drho[re + c] -= half_g * rho[re + c];
            }
        }
        for r in 0..dim {
            let row = r * dim;
            for j in 0..nf {
                drho[row + S_E * nf + j] -= half_g * rho[row + S_E * nf + j];
            }
        }
        for i in 0..nf {
            for j in 0..nf {
                let src = rho[(S_E * nf + i) * dim + S_E * nf + j];
                drho[(S_G1 * nf + i) * dim + S_G1 * nf + j] += self.gamma[0] * src;
                drho[(S_G2 * nf + i) * dim + S_G2 * nf + j] += self.gamma[1] * src;
            }
        }

        // Recoil: add w_μ (X ρ_ee X − ½{X², ρ_ee}) into the gμgμ blocks.
        for i in 0..nf {
            for j in 0..nf {
                self.ee[i * nf + j] = rho[(S_E * nf + i) * dim + S_E * nf + j];
            }
        }
        apply_x_left(&self.ops, &self.ee, &mut self.xe);
        apply_x_right(&self.ops, &self.xe, &mut self.xex);
        apply_x2_sym(&self.ops, &self.ee, &mut self.x2e_sym);
        for i in 0..nf {
            for j in 0..nf {
                let d = self.xex[i * nf + j] - 0.5 * self.x2e_sym[i * nf + j];
                drho[(S_G1 * nf + i) * dim + S_G1 * nf + j] += self.w_rec[0] * d;
                drho[(S_G2 * nf + i) * dim + S_G2 * nf + j] += self.w_rec[1] * d;
            }
        }
    }
}

/// out = X · m (X tridiagonal, zero diagonal).
fn apply_x_left(ops: &FockOps, m: &[C64], out: &mut [C64]) {
    let nf = ops.nf;
    out.fill(C64::new(0.0, 0.0));
    for i in 0..nf {
        if i + 1 < nf {
            let c = ops.x1[i];
            for j in 0..nf {
                out[i * nf + j] += c * m[(i + 1) * nf + j];
            }
        }
        if i >= 1 {
            let c = ops.x1[i - 1];
            for j in 0..nf {
                out[i * nf + j] += c * m[(i - 1) * nf + j];
            }
        }
    }
}

/// out = m · X.
fn apply_x_right(ops: &FockOps, m: &[C64], out: &mut [C64]) {
    let nf = ops.nf;
    out.fill(C64::new(0.0, 0.0));
    for i in 0..nf {
        for j in 0..nf {
            let v = m[i * nf + j];
            if v.re == 0.0 && v.im == 0.0 {
                continue;
            }
            if j + 1 < nf {
                out[i * nf + j + 1] += v * ops.x1[j];
            }
            if j >= 1 {
                out[i * nf + j - 1] += v * ops.x1[j - 1];
            }
        }
    }
}

/// out = X²·m + m·X².
fn apply_x2_sym(ops: &FockOps, m: &[C64], out: &mut [C64]) {
    let nf = ops.nf;
    out.fill(C64::new(0.0, 0.0));
    for i in 0..nf {
        for j in 0..nf {
            let v = m[i * nf + j];
            if v.re == 0.0 && v.im == 0.0 {
                continue;
            }
            out[i * nf + j] += v * (ops.x2_diag[i] + ops.x2_diag[j]);
            if i + 2 < nf {
                out[(i + 2) * nf + j] += ops.x2_band[i] * v;
            }
            if i >= 2 {
                out[(i - 2) * nf + j] += ops.x2_band[i - 2] * v;
            }
            if j + 2 < nf {
                out[i * nf + j + 2] += v * ops.x2_band[j];
            }
            if j >= 2 {
                out[i * nf + j - 2] += v * ops.x2_band[j - 2];
            }
        }
    }
}

/// Configuration for a single exact run.
#[derive(Debug, Clone)]
pub struct ExactConfig {
    /// Distance of the ion from the trap center [m].
    pub radius: f64,
    /// Initial thermal occupation.
    pub nbar0: f64,
    /// Evolution time [s].
    pub t_final: f64,
    /// Fock truncation (inclusive top level).
    pub n_max: usize,
    /// Step size [s]; when None, 1/(20 f_max) with
    /// f_max = max(Δ⁰, Ω₁, Ω₂, Γ)/2π.
    pub dt: Option<f64>,
    /// Record every so many steps; None targets ~600 samples.
    pub sample_every: Option<usize>,
    /// Truncation flag threshold on the top-Fock population.
    pub trunc_tol: f64,
}

impl ExactConfig {
    pub fn new(radius: f64, nbar0: f64, t_final: f64) -> Self {
        ExactConfig { radius, nbar0, t_final, n_max: 40, dt: None, sample_every: None, trunc_tol: 1e-4 }
    }
}

/// Default stability-bounded RK4 step for the given drive parameters.
pub fn default_dt(geometry: &LaserGeometry, atom: &AtomParams) -> f64 {
    let f_max = to_hz(
        geometry
            .detuning0
            .max(geometry.rabi1)
            .max(geometry.rabi2)
            .max(atom.gamma_total()),
    );
    1.0 / (20.0 * f_max)
}

/// Evolve the second-order master equation for one revolving ion and record
/// the cooling curve.
pub fn evolve_exact(
    trap: &TrapParams,
    atom: &AtomParams,
    geometry: &LaserGeometry,
    cfg: &ExactConfig,
) -> Result<CoolingCurve> {
    if cfg.nbar0 < 0.0 {
        return Err(Error::Parameter("nbar0 must be non-negative".into()));
    }
    // Thermal-tail check on the truncation.
    if cfg.nbar0 > 0.0 {
        let tail = (cfg.nbar0 / (1.0 + cfg.nbar0)).powi(cfg.n_max as i32 + 1);
        if tail >= 1e-3 {
            return Err(Error::Parameter(format!(
                "n_max = {} leaves a thermal tail of {tail:.2e} at nbar0 = {}; increase n_max",
                cfg.n_max, cfg.nbar0
            )));
        }
    }
    let dt = cfg.dt.unwrap_or_else(|| default_dt(geometry, atom));
    let n_steps = (cfg.t_final / dt).ceil() as usize;
    let sample_every = cfg.sample_every.unwrap_or_else(|| (n_steps / 600).max(1));

    let mut sys = ExactSystem::new(trap, atom, geometry, cfg.radius, cfg.n_max)?;
    let mut rho = DensityMatrix::thermal_g1(cfg.nbar0, cfg.n_max);
    let dim = sys.dim();
    let mut ws = Rk4Workspace::new(dim * dim);

    let mut times = Vec::new();
    let mut nbars = Vec::new();
    let mut pops = Vec::new();
    let mut trace_err = Vec::new();
    let mut truncation_flag = false;

    let mut record = |rho: &DensityMatrix, t: f64, trunc: &mut bool| -> Result<()> {
        let tr = rho.trace();
        let drift = (tr.re - 1.0).abs().max(tr.im.abs());
        if drift > 1e-6 {
            return Err(Error::TraceDrift { drift, t });
        }
        if rho.top_fock_population() > cfg.trunc_tol {
            *trunc = true;
        }
        times.push(t);
        nbars.push(rho.nbar());
        let (pe, pg1, pg2) = rho.populations();
        pops.push([pg1, pg2, pe]);
        trace_err.push(drift);
        Ok(())
    };

    record(&rho, 0.0, &mut truncation_flag)?;
    let mut rhs = |t: f64, y: &[C64], dy: &mut [C64]| sys.rhs(t, y, dy);
    for step in 0..n_steps {
        let t = step as f64 * dt;
        rk4_step(&mut rhs, t, dt, &mut rho.data, &mut ws);
        if (step + 1) % sample_every == 0 || step + 1 == n_steps {
            record(&rho, (step + 1) as f64 * dt, &mut truncation_flag)?;
        }
    }

    let n_samples = times.len();
    let mut nbar = ndarray::Array2::<f64>::zeros((n_samples, 1));
    for (i, v) in nbars.iter().enumerate() {
        nbar[[i, 0]] = *v;
    }
    let mut populations = ndarray::Array2::<f64>::zeros((n_samples, 3));
    for (i, p) in pops.iter().enumerate() {
        for k in 0..3 {
            populations[[i, k]] = p[k];
        }
    }
    let mut warnings = Vec::new();
    if truncation_flag {
        warnings.push(format!(
            "top Fock level exceeded trunc_tol = {:.1e} during evolution",
            cfg.trunc_tol
        ));
    }
    Ok(CoolingCurve {
        times,
        nbar,
        ci_low: None,
        ci_high: None,
        populations: Some(populations),
        trace_err: Some(trace_err),
        warnings,
        metadata: serde_json::json!({
            "solver": "exact",
            "radius_m": cfg.radius,
            "nbar0": cfg.nbar0,
            "n_max": cfg.n_max,
            "dt_s": dt,
            "t_final_s": cfg.t_final,
            "detuning0_hz": to_hz(geometry.detuning0),
            "rabi1_hz": to_hz(geometry.rabi1),
            "rabi2_hz": to_hz(geometry.rabi2),
            "misalign_rad": geometry.misalign,
        }),
    })
}

/// Extract the full set of single-ion moments from a density matrix by
/// tracing against the corresponding operators. Linear in ρ, so it can also
/// be applied to dρ/dt to obtain moment derivatives.
pub fn moments_from_rho(rho: &DensityMatrix) -> MomentState {
    let nf = rho.n_max + 1;
    let dim = rho.dim();
    let d = &rho.data;
    let mut st = MomentState::zero(1);
    let lay = st.layout;

    // ⟨σ_αβ⟩ = Σ_n ρ[(β,n),(α,n)].
    let sigma = |alpha: usize, beta: usize| -> C64 {
        (0..nf).map(|n| d[(beta * nf + n) * dim + alpha * nf + n]).sum()
    };
    st.data[lay.sg1g1(0)] = sigma(S_G1, S_G1);
    st.data[lay.sg2g2(0)] = sigma(S_G2, S_G2);
    st.data[lay.sg1g2(0)] = sigma(S_G1, S_G2);
    st.data[lay.sg1e(0)] = sigma(S_G1, S_E);
    st.data[lay.sg2e(0)] = sigma(S_G2, S_E);

    // ⟨b⟩ = Σ_{s,n≥1} √n ρ[(s,n),(s,n−1)].
    let mut b_mean = C64::new(0.0, 0.0);
    let mut bb = C64::new(0.0, 0.0);
    let mut bdb = C64::new(0.0, 0.0);
    for s in 0..3 {
        for n in 1..nf {
            b_mean += (n as f64).sqrt() * d[(s * nf + n) * dim + s * nf + n - 1];
        }
        for n in 2..nf {
            bb += ((n * (n - 1)) as f64).sqrt() * d[(s * nf + n) * dim + s * nf + n - 2];
        }
        for n in 0..nf {
            bdb += n as f64 * d[(s * nf + n) * dim + s * nf + n];
        }
    }
    st.data[lay.b(0)] = b_mean;
    st.data[lay.bb(0, 0)] = bb;
    st.data[lay.bdb(0, 0)] = bdb;

    // ⟨b σ_αβ⟩ = Σ_{n≥1} √n ρ[(β,n),(α,n−1)].
    let hybrid = |alpha: usize, beta: usize| -> C64 {
        (1..nf).map(|n| (n as f64).sqrt() * d[(beta * nf + n) * dim + alpha * nf + n - 1]).sum()
    };
    for lbl in SIGMA_LABELS {
        let (alpha, beta) = match lbl {
            SigmaLabel::G1G1 => (S_G1, S_G1),
            SigmaLabel::G2G2 => (S_G2, S_G2),
            SigmaLabel::G1G2 => (S_G1, S_G2),
            SigmaLabel::G2G1 => (S_G2, S_G1),
            SigmaLabel::G1E => (S_G1, S_E),
            SigmaLabel::EG1 => (S_E, S_G1),
            SigmaLabel::G2E => (S_G2, S_E),
            SigmaLabel::EG2 => (S_E, S_G2),
        };
        st.data[lay.hybrid(lbl, 0, 0)] = hybrid(alpha, beta);
    }
    st
}

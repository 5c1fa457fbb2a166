//! Shared fixtures for the integration and acceptance tests.

use ndarray::Array2;
use num_complex::Complex64 as C64;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use eitcool::constants::{hz, B_FIELD_NIST, M_BE9_ION, Q_E};
use eitcool::crystal::TrapParams;
use eitcool::eitmodel::{AtomParams, LaserGeometry};
use eitcool::exact::DensityMatrix;

/// Trap at the modeled operating point. `wall_strength` of zero requests the
/// fixed rigid default used across the tests.
pub fn nist_trap(n: usize, wall_strength: Option<f64>) -> TrapParams {
    let mut t = TrapParams {
        ion_mass: M_BE9_ION,
        charge: Q_E,
        b_field: B_FIELD_NIST,
        omega_z: hz(1.59e6),
        omega_r: hz(180e3),
        wall_strength: 0.0,
        n_ions: n,
    };
    t.wall_strength = wall_strength.unwrap_or(0.0265 * t.in_plane_base());
    t
}

/// Dressing geometry at the optimum Rabi condition.
pub fn opt_geometry(detuning_hz: f64, misalign_deg: f64, atom: &AtomParams) -> LaserGeometry {
    let rabi = eitcool::eitmodel::optimum_rabi(hz(detuning_hz), hz(1.59e6)).unwrap();
    LaserGeometry::new(
        hz(detuning_hz),
        10f64.to_radians(),
        misalign_deg.to_radians(),
        rabi,
        rabi,
        atom,
    )
    .unwrap()
}

/// Matrix exponential by scaling and squaring with a Taylor series.
pub fn expm(a: &Array2<C64>) -> Array2<C64> {
    let n = a.nrows();
    let norm: f64 = (0..n)
        .map(|i| (0..n).map(|j| a[[i, j]].norm()).sum::<f64>())
        .fold(0.0, f64::max);
    let s = norm.log2().ceil().max(0.0) as u32 + 1;
    let scaled = a.mapv(|z| z / 2f64.powi(s as i32));
    let mut result = Array2::<C64>::eye(n);
    let mut term = Array2::<C64>::eye(n);
    for k in 1..=20 {
        term = term.dot(&scaled).mapv(|z| z / k as f64);
        result = result + &term;
    }
    for _ in 0..s {
        result = result.dot(&result);
    }
    result
}

/// Displacement operator D(α) = exp(α b† − α* b) on the truncated ladder.
pub fn displacement(alpha: C64, nf: usize) -> Array2<C64> {
    let mut gen = Array2::<C64>::zeros((nf, nf));
    for n in 0..nf - 1 {
        let s = ((n + 1) as f64).sqrt();
        gen[[n + 1, n]] = alpha * s;
        gen[[n, n + 1]] = -alpha.conj() * s;
    }
    expm(&gen)
}

/// Random internal 3×3 density matrix.
pub fn random_internal(rng: &mut ChaCha8Rng) -> Array2<C64> {
    let mut a = Array2::<C64>::zeros((3, 3));
    for v in a.iter_mut() {
        *v = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    }
    let at = a.t().mapv(|z| z.conj());
    let mut rho = a.dot(&at);
    let tr: C64 = (0..3).map(|i| rho[[i, i]]).sum();
    rho.mapv_inplace(|z| z / tr);
    rho
}

/// ρ_int ⊗ D(α) thermal(n̄) D†(α) in the (internal ⊗ Fock) basis.
pub fn product_state(rho_int: &Array2<C64>, nbar: f64, alpha: C64, n_max: usize) -> DensityMatrix {
    let nf = n_max + 1;
    let mut th = Array2::<C64>::zeros((nf, nf));
    let mut z = 0.0;
    for n in 0..nf {
        let w = if nbar > 0.0 {
            (nbar / (1.0 + nbar)).powi(n as i32) / (1.0 + nbar)
        } else if n == 0 {
            1.0
        } else {
            0.0
        };
        th[[n, n]] = C64::new(w, 0.0);
        z += w;
    }
    th.mapv_inplace(|v| v / z);
    let d = displacement(alpha, nf);
    let ddag = d.t().mapv(|v| v.conj());
    let motional = d.dot(&th).dot(&ddag);

    let mut rho = DensityMatrix { data: vec![C64::new(0.0, 0.0); 9 * nf * nf], n_max };
    let dim = 3 * nf;
    for s in 0..3 {
        for sp in 0..3 {
            for n in 0..nf {
                for np in 0..nf {
                    rho.data[(s * nf + n) * dim + sp * nf + np] =
                        rho_int[[s, sp]] * motional[[n, np]];
                }
            }
        }
    }
    rho
}

/// Random single-ion problem for the derivative oracle.
pub struct OracleDraw {
    pub trap: TrapParams,
    pub atom: AtomParams,
    pub geometry: LaserGeometry,
    pub radius: f64,
    pub t0: f64,
    pub nbar: f64,
    pub alpha: C64,
}

pub fn random_draw(rng: &mut ChaCha8Rng) -> OracleDraw {
    let atom = AtomParams {
        gamma1: hz(rng.gen_range(2.0e6..10.0e6)),
        gamma2: hz(rng.gen_range(4.0e6..16.0e6)),
        u2_1: rng.gen_range(0.1..0.6),
        u2_2: rng.gen_range(0.1..0.6),
        wavelength: 313.13e-9,
        ion_mass: M_BE9_ION,
    };
    let trap = TrapParams {
        ion_mass: M_BE9_ION,
        charge: Q_E,
        b_field: B_FIELD_NIST,
        omega_z: hz(rng.gen_range(1.0e6..2.0e6)),
        omega_r: hz(rng.gen_range(120e3..220e3)),
        wall_strength: 7.5e10,
        n_ions: 1,
    };
    let geometry = LaserGeometry::new(
        hz(rng.gen_range(100e6..420e6)),
        rng.gen_range(5f64..15f64).to_radians(),
        rng.gen_range(-2f64..2f64).to_radians(),
        hz(rng.gen_range(10e6..40e6)),
        hz(rng.gen_range(10e6..40e6)),
        &atom,
    )
    .unwrap();
    OracleDraw {
        trap,
        atom,
        geometry,
        radius: rng.gen_range(5e-6..60e-6),
        t0: rng.gen_range(0.0..5.0e-6),
        nbar: rng.gen_range(0.0..1.5),
        alpha: C64::new(rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2)),
    }
}

/// Run the full derivative-oracle comparison for `n_draws` random problems.
/// Returns the worst relative deviation observed.
pub fn run_kernel_oracle(n_draws: usize, seed: u64, rel_tol: f64) -> f64 {
    use eitcool::crystal::{drumhead_modes, IonCrystal};
    use eitcool::eitmodel::build_couplings;
    use eitcool::exact::{moments_from_rho, ExactSystem};
    use eitcool::integrate::{rk4_step, Rk4Workspace};
    use eitcool::moments::{MomentKernel, MomentState};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_max = 60;
    let eps = 1.0e-12;
    let mut worst = 0.0f64;
    for draw_idx in 0..n_draws {
        let d = random_draw(&mut rng);
        let crystal = IonCrystal::ring(1, d.radius, &d.trap).unwrap();
        let modes = drumhead_modes(&crystal, &d.trap).unwrap();
        let couplings = build_couplings(&modes, &d.geometry, &d.atom, &crystal).unwrap();
        let mut kernel = MomentKernel::new(&couplings, &d.geometry, &d.atom, d.trap.omega_r);

        let rho_int = random_internal(&mut rng);
        let rho0 = product_state(&rho_int, d.nbar, d.alpha, n_max);
        assert!(rho0.top_fock_population() < 1e-9, "draw {draw_idx}: truncation too coarse");

        let mut sys = ExactSystem::new(&d.trap, &d.atom, &d.geometry, d.radius, n_max).unwrap();
        let dim = rho0.dim();
        let mut ws = Rk4Workspace::new(dim * dim);
        // Fourth-order central finite difference of the moment evolution.
        let mut evolve_to = |steps: i64| -> MomentState {
            let mut rho = rho0.clone();
            let dt = if steps >= 0 { eps } else { -eps };
            let mut t = d.t0;
            let mut rhs = |tt: f64, y: &[C64], dy: &mut [C64]| sys.rhs(tt, y, dy);
            for _ in 0..steps.unsigned_abs() {
                rk4_step(&mut rhs, t, dt, &mut rho.data, &mut ws);
                t += dt;
            }
            moments_from_rho(&rho)
        };
        let mp1 = evolve_to(1);
        let mp2 = evolve_to(2);
        let mm1 = evolve_to(-1);
        let mm2 = evolve_to(-2);
        let mut fd = MomentState::zero(1);
        for i in 0..fd.data.len() {
            fd.data[i] = (-mp2.data[i] + 8.0 * mp1.data[i] - 8.0 * mm1.data[i] + mm2.data[i])
                / (12.0 * eps);
        }

        let m0 = moments_from_rho(&rho0);
        let mut dm = vec![C64::new(0.0, 0.0); m0.data.len()];
        kernel.rhs(d.t0, &m0.data, &mut dm);

        let scale: f64 = fd.data.iter().map(|z| z.norm()).fold(0.0, f64::max);
        for (i, (got, want)) in dm.iter().zip(&fd.data).enumerate() {
            let denom = want.norm().max(1e-4 * scale);
            let rel = (got - want).norm() / denom;
            worst = worst.max(rel);
            assert!(
                rel < rel_tol,
                "draw {draw_idx}, moment {}: kernel = {got}, fd = {want}, rel = {rel:.3e}",
                m0.layout.describe(i)
            );
        }
    }
    worst
}

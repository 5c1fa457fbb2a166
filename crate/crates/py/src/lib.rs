//! Python bindings for the main types and operations of the simulator.
//!
//! Frequencies cross this boundary in cyclic Hz, lengths in μm and times in
//! μs, matching the command-line interface.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use eitcool::constants::{hz, to_hz, B_FIELD_NIST, M_BE9_ION, Q_E};
use eitcool::crystal::{self, TrapParams};
use eitcool::eitmodel::{self, AtomParams, LaserGeometry};
use eitcool::engines::{self, Model, SimConfig};
use eitcool::exact::{self, ExactConfig};
use eitcool::spectrum::{self, ProbeTarget};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn trap_params(
    n_ions: usize,
    omega_z_hz: f64,
    omega_r_hz: f64,
    wall_strength: Option<f64>,
    seed: u64,
) -> PyResult<TrapParams> {
    let mut trap = TrapParams {
        ion_mass: M_BE9_ION,
        charge: Q_E,
        b_field: B_FIELD_NIST,
        omega_z: hz(omega_z_hz),
        omega_r: hz(omega_r_hz),
        wall_strength: 0.0,
        n_ions,
    };
    trap.wall_strength = match wall_strength {
        Some(w) => w,
        None => {
            if n_ions <= 2 {
                0.0265 * trap.in_plane_base()
            } else {
                crystal::auto_wall_strength(&trap, seed).map_err(err)?
            }
        }
    };
    trap.validate().map_err(err)?;
    Ok(trap)
}

fn geometry(detuning0_hz: f64, theta_deg: f64, misalign_deg: f64, omega_z_hz: f64) -> PyResult<(AtomParams, LaserGeometry)> {
    let atom = AtomParams::be9();
    let rabi = eitmodel::optimum_rabi(hz(detuning0_hz), hz(omega_z_hz)).map_err(err)?;
    let g = LaserGeometry::new(
        hz(detuning0_hz),
        theta_deg.to_radians(),
        misalign_deg.to_radians(),
        rabi,
        rabi,
        &atom,
    )
    .map_err(err)?;
    Ok((atom, g))
}

/// Equilibrium crystal and drumhead-mode data.
#[pyclass]
struct CrystalModes {
    /// Rotating-frame positions [μm], one (x, y) pair per ion.
    #[pyo3(get)]
    positions_um: Vec<(f64, f64)>,
    /// Drumhead frequencies [Hz], sorted descending (COM first).
    #[pyo3(get)]
    freqs_hz: Vec<f64>,
    /// Orthonormal mode matrix, row per ion, column per mode.
    #[pyo3(get)]
    mode_matrix: Vec<Vec<f64>>,
    #[pyo3(get)]
    bandwidth_hz: f64,
    #[pyo3(get)]
    com_index: usize,
    #[pyo3(get)]
    wall_strength: f64,
}

/// Solve the planar-crystal equilibrium and diagonalize the drumhead modes.
#[pyfunction]
#[pyo3(signature = (n_ions, omega_z_hz=1.59e6, omega_r_hz=180e3, wall_strength=None, seed=0))]
fn solve_crystal(
    n_ions: usize,
    omega_z_hz: f64,
    omega_r_hz: f64,
    wall_strength: Option<f64>,
    seed: u64,
) -> PyResult<CrystalModes> {
    let trap = trap_params(n_ions, omega_z_hz, omega_r_hz, wall_strength, seed)?;
    let c = crystal::solve_equilibrium(&trap, seed).map_err(err)?;
    let modes = crystal::drumhead_modes(&c, &trap).map_err(err)?;
    Ok(CrystalModes {
        positions_um: (0..n_ions)
            .map(|j| (c.positions[[j, 0]] * 1e6, c.positions[[j, 1]] * 1e6))
            .collect(),
        freqs_hz: modes.freqs.iter().map(|&w| to_hz(w)).collect(),
        mode_matrix: (0..n_ions)
            .map(|j| (0..n_ions).map(|m| modes.mode_matrix[[j, m]]).collect())
            .collect(),
        bandwidth_hz: to_hz(modes.bandwidth),
        com_index: modes.com_index,
        wall_strength: trap.wall_strength,
    })
}

/// Optimum dressing Rabi frequency √(2 ω_COM (ω_COM + Δ⁰)) in Hz.
#[pyfunction]
#[pyo3(signature = (detuning0_hz, omega_com_hz=1.59e6))]
fn optimum_rabi_hz(detuning0_hz: f64, omega_com_hz: f64) -> PyResult<f64> {
    Ok(to_hz(eitmodel::optimum_rabi(hz(detuning0_hz), hz(omega_com_hz)).map_err(err)?))
}

/// Lamb-Dicke parameter of a beam at angle θ from the plane for a mode at
/// the given frequency.
#[pyfunction]
#[pyo3(signature = (omega_hz=1.59e6, theta_deg=10.0))]
fn lamb_dicke(omega_hz: f64, theta_deg: f64) -> PyResult<f64> {
    let atom = AtomParams::be9();
    let kz = atom.k_mag() * theta_deg.to_radians().sin();
    eitmodel::lamb_dicke(kz, hz(omega_hz), atom.ion_mass).map_err(err)
}

/// Weak-probe absorption spectrum of the dressed three-level system.
/// Returns (offsets_hz, absorption, peak_offset_hz, transparency_residual).
#[pyfunction]
#[pyo3(signature = (detuning0_hz=360e6, probe_fraction=0.05, omega_com_hz=1.59e6))]
fn absorption_spectrum(
    detuning0_hz: f64,
    probe_fraction: f64,
    omega_com_hz: f64,
) -> PyResult<(Vec<f64>, Vec<f64>, f64, f64)> {
    let atom = AtomParams::be9();
    let rabi = eitmodel::optimum_rabi(hz(detuning0_hz), hz(omega_com_hz)).map_err(err)?;
    let spec = spectrum::absorption_spectrum(
        hz(detuning0_hz),
        rabi,
        rabi,
        &atom,
        probe_fraction * rabi,
        &spectrum::default_offsets(),
        ProbeTarget::G1,
    )
    .map_err(err)?;
    Ok((
        spec.probe_offsets.iter().map(|&d| to_hz(d)).collect(),
        spec.absorption,
        to_hz(spec.peak_offset),
        spec.transparency_residual,
    ))
}

/// A cooling curve: sample times [μs] and per-mode occupations.
#[pyclass]
struct Curve {
    #[pyo3(get)]
    times_us: Vec<f64>,
    /// nbar[sample][mode]
    #[pyo3(get)]
    nbar: Vec<Vec<f64>>,
    #[pyo3(get)]
    ci_low: Option<Vec<Vec<f64>>>,
    #[pyo3(get)]
    ci_high: Option<Vec<Vec<f64>>>,
}

impl Curve {
    fn from_core(c: &engines::CoolingCurve) -> Self {
        let grab = |m: &ndarray::Array2<f64>| -> Vec<Vec<f64>> {
            (0..m.nrows()).map(|i| m.row(i).to_vec()).collect()
        };
        Curve {
            times_us: c.times.iter().map(|&t| t * 1e6).collect(),
            nbar: grab(&c.nbar),
            ci_low: c.ci_low.as_ref().map(&grab),
            ci_high: c.ci_high.as_ref().map(&grab),
        }
    }
}

/// Moment-equation cooling run ("gm" or "sm").
#[pyfunction]
#[pyo3(signature = (model, n_ions, detuning0_hz=360e6, t_final_us=100.0, nbar0=5.0,
                    n_traj=256, seed=0, radius_um=20.0, misalign_deg=0.0))]
#[allow(clippy::too_many_arguments)]
fn cooling_curve(
    model: &str,
    n_ions: usize,
    detuning0_hz: f64,
    t_final_us: f64,
    nbar0: f64,
    n_traj: usize,
    seed: u64,
    radius_um: f64,
    misalign_deg: f64,
) -> PyResult<Curve> {
    let m = match model {
        "gm" => Model::Gm,
        "sm" => Model::Sm,
        other => return Err(PyValueError::new_err(format!("model must be gm or sm, got {other}"))),
    };
    let trap = trap_params(n_ions, 1.59e6, 180e3, None, seed)?;
    let (atom, g) = geometry(detuning0_hz, 10.0, misalign_deg, 1.59e6)?;
    let crystal = if n_ions <= 2 {
        crystal::IonCrystal::ring(n_ions, radius_um * 1e-6, &trap).map_err(err)?
    } else {
        crystal::solve_equilibrium(&trap, seed).map_err(err)?
    };
    let mut cfg = SimConfig::new(trap, atom, g, m);
    cfg.nbar_com0 = nbar0;
    cfg.t_final = t_final_us * 1e-6;
    cfg.n_traj = n_traj;
    cfg.rng_seed = seed;
    let curve = engines::run_model(&cfg, &crystal).map_err(err)?;
    Ok(Curve::from_core(&curve))
}

/// Exact single-ion density-matrix run.
#[pyfunction]
#[pyo3(signature = (radius_um=0.0, detuning0_hz=180e6, t_final_us=100.0, nbar0=5.0,
                    n_max=40, misalign_deg=0.0, seed=0))]
fn exact_curve(
    radius_um: f64,
    detuning0_hz: f64,
    t_final_us: f64,
    nbar0: f64,
    n_max: usize,
    misalign_deg: f64,
    seed: u64,
) -> PyResult<Curve> {
    let trap = trap_params(1, 1.59e6, 180e3, Some(0.0265 * 2.8246e12), seed)?;
    let (atom, g) = geometry(detuning0_hz, 10.0, misalign_deg, 1.59e6)?;
    let mut ecfg = ExactConfig::new(radius_um * 1e-6, nbar0, t_final_us * 1e-6);
    ecfg.n_max = n_max;
    let curve = exact::evolve_exact(&trap, &atom, &g, &ecfg).map_err(err)?;
    Ok(Curve::from_core(&curve))
}

#[pymodule]
fn eitcool_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<CrystalModes>()?;
    m.add_class::<Curve>()?;
    m.add_function(wrap_pyfunction!(solve_crystal, m)?)?;
    m.add_function(wrap_pyfunction!(optimum_rabi_hz, m)?)?;
    m.add_function(wrap_pyfunction!(lamb_dicke, m)?)?;
    m.add_function(wrap_pyfunction!(absorption_spectrum, m)?)?;
    m.add_function(wrap_pyfunction!(cooling_curve, m)?)?;
    m.add_function(wrap_pyfunction!(exact_curve, m)?)?;
    Ok(())
}

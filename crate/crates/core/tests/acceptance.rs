//! Acceptance suite: one test per release criterion, each printing a
//! PASS line with the measured quantities. Criteria marked `#[ignore]` are
//! extended runs whose cost exceeds a desk-scale budget; they are exercised
//! explicitly via `cargo test --test acceptance -- --ignored`.
//!
//! Most of these are long-running numerical computations (tens of minutes
//! each on one core); build with optimizations (the workspace test profile
//! already is).

mod support;

use eitcool::constants::{hz, to_hz};
use eitcool::crystal::{auto_wall_strength, drumhead_modes, solve_equilibrium, IonCrystal};
use eitcool::eitmodel::{lamb_dicke, optimum_rabi, AtomParams};
use eitcool::engines::{
    fit_rate, power_law_exponent, run_model, CoolingCurve, Model, SimConfig,
};
use eitcool::exact::{evolve_exact, ExactConfig};
use eitcool::spectrum::{absorption_spectrum, default_offsets, ProbeTarget};

/// Steady-state estimate: mean occupation over the trailing five rotation
/// periods, washing out the Doppler limit cycle.
fn tail_nbar(curve: &CoolingCurve, mode: usize) -> f64 {
    let period = 2.0 * std::f64::consts::PI / hz(180e3);
    let t_end = *curve.times.last().unwrap();
    let mut acc = 0.0;
    let mut cnt = 0usize;
    for (i, &t) in curve.times.iter().enumerate() {
        if t >= t_end - 5.0 * period {
            acc += curve.nbar[[i, mode]];
            cnt += 1;
        }
    }
    acc / cnt as f64
}

#[test]
fn criterion_01_transparency_point() {
    let start = std::time::Instant::now();
    let atom = AtomParams::be9();
    let rabi = optimum_rabi(hz(360e6), hz(1.59e6)).unwrap();
    let offsets = default_offsets();
    let spec = absorption_spectrum(
        hz(360e6),
        rabi,
        rabi,
        &atom,
        0.05 * rabi,
        &offsets,
        ProbeTarget::G1,
    )
    .unwrap();
    assert!(
        spec.transparency_residual < 1e-8,
        "transparency residual {:.2e}",
        spec.transparency_residual
    );
    // Bright peak within one grid step of the COM frequency, searching the
    // physical window (0, 2 ω_COM].
    let step = offsets[1] - offsets[0];
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, (&d, &a)) in offsets.iter().zip(&spec.absorption).enumerate() {
        if d > 0.0 && d <= 2.0 * hz(1.59e6) && a > best.1 {
            best = (i, a);
        }
    }
    let peak = offsets[best.0];
    assert!(
        (peak - hz(1.59e6)).abs() <= step + 1e-9,
        "peak at {:.4} MHz",
        to_hz(peak) / 1e6
    );
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 10.0, "runtime {elapsed:.1} s exceeds 10 s");
    println!(
        "criterion 01 PASS: |A(0)|/max|A| = {:.2e}, peak at {:.4} MHz (grid step {:.1} kHz), {:.2} s",
        spec.transparency_residual,
        to_hz(peak) / 1e6,
        to_hz(step) / 1e3,
        elapsed
    );
}

#[test]
fn criterion_02_optimum_rabi_values() {
    let w = hz(1.59e6);
    let cases = [(180e6, 24.0e6), (360e6, 33.9e6), (400e6, 35.7e6)];
    for (det, expect) in cases {
        let got = to_hz(optimum_rabi(hz(det), w).unwrap());
        assert!(
            (got - expect).abs() <= 0.1e6,
            "detuning {det:.0}: got {got:.3e}, expected {expect:.3e}"
        );
    }
    println!(
        "criterion 02 PASS: omega_opt/2pi = {:.2}, {:.2}, {:.2} MHz at 180, 360, 400 MHz",
        to_hz(optimum_rabi(hz(180e6), w).unwrap()) / 1e6,
        to_hz(optimum_rabi(hz(360e6), w).unwrap()) / 1e6,
        to_hz(optimum_rabi(hz(400e6), w).unwrap()) / 1e6
    );
}

#[test]
fn criterion_03_lamb_dicke_value() {
    let atom = AtomParams::be9();
    let kz = atom.k_mag() * 10f64.to_radians().sin();
    let eta = lamb_dicke(kz, hz(1.59e6), atom.ion_mass).unwrap();
    assert!((eta - 0.066).abs() <= 0.001, "eta = {eta}");
    println!("criterion 03 PASS: eta = {eta:.4}");
}

#[test]
fn criterion_04_crystal_invariants() {
    // COM mode exactness for small crystals at the fixed rigid wall.
    for n in [1usize, 7, 19, 37] {
        let trap = support::nist_trap(n, None);
        let c = solve_equilibrium(&trap, 0).unwrap();
        let modes = drumhead_modes(&c, &trap).unwrap();
        assert!(
            ((modes.freqs[modes.com_index] - trap.omega_z) / trap.omega_z).abs() < 1e-10,
            "N = {n}: COM frequency off"
        );
        let u = 1.0 / (n as f64).sqrt();
        for j in 0..n {
            assert!(
                (modes.mode_matrix[[j, modes.com_index]].abs() - u).abs() < 1e-8,
                "N = {n}: COM eigenvector not uniform"
            );
        }
        // Orthonormality within 1e-10.
        let mt = modes.mode_matrix.t().dot(&modes.mode_matrix);
        for a in 0..n {
            for b in 0..n {
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((mt[[a, b]] - expect).abs() < 1e-10);
            }
        }
    }

    // Bandwidths at the auto-selected (smallest rigid) wall strength.
    let base37 = support::nist_trap(37, Some(0.0));
    let wall37 = auto_wall_strength(&base37, 0).unwrap();
    let trap37 = support::nist_trap(37, Some(wall37));
    let c37 = solve_equilibrium(&trap37, 0).unwrap();
    let b37 = to_hz(drumhead_modes(&c37, &trap37).unwrap().bandwidth);
    assert!(
        (b37 - 185e3).abs() <= 0.1 * 185e3,
        "N=37 bandwidth {:.1} kHz outside 185 kHz +- 10%",
        b37 / 1e3
    );

    let base120 = support::nist_trap(120, Some(0.0));
    let wall120 = auto_wall_strength(&base120, 0).unwrap();
    let trap120 = support::nist_trap(120, Some(wall120));
    let c120 = solve_equilibrium(&trap120, 0).unwrap();
    let b120 = to_hz(drumhead_modes(&c120, &trap120).unwrap().bandwidth);
    assert!(
        (b120 - 376e3).abs() <= 0.1 * 376e3,
        "N=120 bandwidth {:.1} kHz outside 376 kHz +- 10%",
        b120 / 1e3
    );
    println!(
        "criterion 04 PASS: COM exact for N in {{1,7,19,37}}; B(37) = {:.1} kHz, B(120) = {:.1} kHz",
        b37 / 1e3,
        b120 / 1e3
    );
}

#[test]
fn criterion_05_kernel_oracle() {
    let worst = support::run_kernel_oracle(20, 51, 1e-6);
    println!("criterion 05 PASS: 20 random draws, worst relative deviation {worst:.2e} < 1e-6");
}

#[test]
fn criterion_06_exact_radius_trend() {
    let atom = AtomParams::be9();
    let trap = support::nist_trap(1, None);
    let geometry = support::opt_geometry(180e6, 0.0, &atom);
    let radii = [0.0e-6, 20.0e-6, 40.0e-6, 60.0e-6];
    let mut steady = Vec::new();
    for &r in &radii {
        let cfg = ExactConfig::new(r, 5.0, 300e-6);
        let curve = evolve_exact(&trap, &atom, &geometry, &cfg).unwrap();
        let n_end = tail_nbar(&curve, 0);
        // Cooling from nbar = 5 is visible within the window at every radius.
        assert!(
            n_end < 0.8 * 5.0,
            "r = {:.0} um: no visible cooling (nbar end {:.2})",
            r * 1e6,
            n_end
        );
        steady.push(n_end);
    }
    for i in 1..steady.len() {
        assert!(
            steady[i] > steady[i - 1],
            "steady-state nbar not strictly increasing: {steady:?}"
        );
    }
    println!(
        "criterion 06 PASS: steady nbar = {:.3}, {:.3}, {:.3}, {:.3} at r = 0, 20, 40, 60 um",
        steady[0], steady[1], steady[2], steady[3]
    );
}

#[test]
fn criterion_07_sm_vs_exact() {
    let atom = AtomParams::be9();
    let trap = support::nist_trap(1, None);
    let geometry = support::opt_geometry(360e6, 0.0, &atom);
    let t_final = 150e-6;
    let dt = 1.0 / (20.0 * to_hz(geometry.detuning0));
    let n_steps = (t_final / dt).ceil() as usize;
    let sample_every = (n_steps / 300).max(1);

    let mut results = Vec::new();
    for &r in &[0.0e-6, 40.0e-6] {
        let mut ecfg = ExactConfig::new(r, 5.0, t_final);
        ecfg.dt = Some(dt);
        ecfg.sample_every = Some(sample_every);
        let exact_curve = evolve_exact(&trap, &atom, &geometry, &ecfg).unwrap();

        let crystal = IonCrystal::ring(1, r, &trap).unwrap();
        let mut sim = SimConfig::new(trap, atom, geometry, Model::Sm);
        sim.nbar_com0 = 5.0;
        sim.t_final = t_final;
        sim.dt = Some(dt);
        sim.sample_every = Some(sample_every);
        sim.n_traj = 256;
        sim.rng_seed = 7;
        let sm = run_model(&sim, &crystal).unwrap();

        assert_eq!(sm.times.len(), exact_curve.times.len(), "sample grids must match");
        let lo = sm.ci_low.as_ref().unwrap();
        let hi = sm.ci_high.as_ref().unwrap();
        let mut inside = 0usize;
        for i in 0..sm.times.len() {
            let ex = exact_curve.nbar[[i, 0]];
            if ex >= lo[[i, 0]] && ex <= hi[[i, 0]] {
                inside += 1;
            }
        }
        let frac = inside as f64 / sm.times.len() as f64;
        assert!(
            frac >= 0.95,
            "r = {:.0} um: exact inside the SM 1-sigma band at only {:.1}% of samples",
            r * 1e6,
            frac * 100.0
        );
        results.push((r, frac));
    }
    println!(
        "criterion 07 PASS: exact within SM band at {:.1}% (r=0) and {:.1}% (r=40 um) of samples",
        results[0].1 * 100.0,
        results[1].1 * 100.0
    );
}

#[test]
fn criterion_08_gm_collapse_sm_enhancement() {
    let atom = AtomParams::be9();
    let det = 360e6;

    // Gaussian model: COM cooling curves collapse across ion numbers.
    let t_gm = 100e-6;
    let mut gm_curves: Vec<(usize, CoolingCurve)> = Vec::new();
    for &n in &[1usize, 2, 19] {
        let trap = support::nist_trap(n, None);
        let geometry = support::opt_geometry(det, 0.0, &atom);
        let crystal = if n <= 2 {
            IonCrystal::ring(n, 20e-6, &trap).unwrap()
        } else {
            solve_equilibrium(&trap, 0).unwrap()
        };
        let mut sim = SimConfig::new(trap, atom, geometry, Model::Gm);
        sim.nbar_com0 = 5.0;
        sim.t_final = t_gm;
        gm_curves.push((n, run_model(&sim, &crystal).unwrap()));
    }
    let mut max_dev = 0.0f64;
    for a in 0..gm_curves.len() {
        for b in a + 1..gm_curves.len() {
            let (ca, cb) = (&gm_curves[a].1, &gm_curves[b].1);
            assert_eq!(ca.times.len(), cb.times.len());
            for i in 0..ca.times.len() {
                max_dev = max_dev.max((ca.nbar[[i, 0]] - cb.nbar[[i, 0]]).abs());
            }
        }
    }
    assert!(
        max_dev < 0.10 * 5.0,
        "GM COM curves deviate by {max_dev:.3} (limit 0.5)"
    );

    // Sampling model: the cooling rate grows with ion number. A common seed
    // correlates the initial COM draws across N, reducing ratio variance.
    let t_sm = 100e-6;
    let mut ns = Vec::new();
    let mut rates = Vec::new();
    for &n in &[1usize, 2, 7, 19] {
        let trap = support::nist_trap(n, None);
        let geometry = support::opt_geometry(det, 0.0, &atom);
        let crystal = if n <= 2 {
            IonCrystal::ring(n, 20e-6, &trap).unwrap()
        } else {
            solve_equilibrium(&trap, 0).unwrap()
        };
        let mut sim = SimConfig::new(trap, atom, geometry, Model::Sm);
        sim.nbar_com0 = 5.0;
        sim.t_final = t_sm;
        sim.n_traj = 16;
        sim.rng_seed = 8;
        let curve = run_model(&sim, &crystal).unwrap();
        let fit = fit_rate(&curve, 0, 2e-6).unwrap();
        println!(
            "  SM N = {n}: rate {:.3e} 1/s (tau {:.1} us, ss {:.2})",
            fit.rate,
            fit.tau * 1e6,
            fit.nbar_ss
        );
        ns.push(n as f64);
        rates.push(fit.rate);
    }
    assert!(rates[1] > rates[0], "R_2 = {:.3e} not above R_1 = {:.3e}", rates[1], rates[0]);
    assert!(rates[3] > rates[1], "R_19 = {:.3e} not above R_2 = {:.3e}", rates[3], rates[1]);
    let expo = power_law_exponent(&ns, &rates);
    assert!(
        (0.15..=0.45).contains(&expo),
        "power-law exponent {expo:.3} outside [0.15, 0.45]"
    );
    println!(
        "criterion 08 PASS: GM COM max deviation {max_dev:.3} < 0.5; SM rate exponent {expo:.3}"
    );
}

#[test]
fn criterion_09_full_bandwidth_gm_n19() {
    let atom = AtomParams::be9();
    let trap = support::nist_trap(19, None);
    let geometry = support::opt_geometry(360e6, 0.0, &atom);
    let crystal = solve_equilibrium(&trap, 0).unwrap();
    let mut sim = SimConfig::new(trap, atom, geometry, Model::Gm);
    sim.nbar_com0 = 5.0;
    sim.t_final = 300e-6;
    let curve = run_model(&sim, &crystal).unwrap();
    let last = curve.times.len() - 1;
    let mut worst = (0usize, 0.0f64);
    for m in 0..curve.n_modes() {
        let v = curve.nbar[[last, m]];
        if v > worst.1 {
            worst = (m, v);
        }
        assert!(v < 0.15, "mode {m} ends at nbar = {v:.3} >= 0.15");
    }
    println!(
        "criterion 09 PASS: all 19 drumhead modes below 0.15 by 300 us (hottest mode {} at {:.3})",
        worst.0, worst.1
    );
}

/// Extended, optional: the full 120-ion Gaussian run cooling every mode
/// below 0.1. At roughly 115 ms per step and 2.4e6 steps this is a
/// multi-day single-core computation, so it is ignored by default.
#[test]
#[ignore]
fn criterion_09_extended_full_bandwidth_gm_n120() {
    let atom = AtomParams::be9();
    let base = support::nist_trap(120, Some(0.0));
    let wall = auto_wall_strength(&base, 0).unwrap();
    let trap = support::nist_trap(120, Some(wall));
    let geometry = support::opt_geometry(400e6, 0.0, &atom);
    let crystal = solve_equilibrium(&trap, 0).unwrap();
    let mut sim = SimConfig::new(trap, atom, geometry, Model::Gm);
    sim.nbar_com0 = 5.0;
    sim.t_final = 300e-6;
    let curve = run_model(&sim, &crystal).unwrap();
    let last = curve.times.len() - 1;
    for m in 0..curve.n_modes() {
        let v = curve.nbar[[last, m]];
        assert!(v < 0.1, "mode {m} ends at nbar = {v:.3} >= 0.1");
    }
    println!("criterion 09 (extended) PASS: all 120 modes below 0.1 by 300 us");
}

#[test]
fn criterion_10_misalignment_robustness() {
    let atom = AtomParams::be9();
    let trap = support::nist_trap(1, None);
    let radii_um = [25.0, 50.0, 75.0];
    let angles_deg = [-1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0];
    let mut table = Vec::new();
    for &r in &radii_um {
        let mut per_radius = Vec::new();
        for &a in &angles_deg {
            let geometry = support::opt_geometry(400e6, a, &atom);
            // The steady state does not depend on the initial occupation, so
            // start already cold in a small Fock space.
            let mut cfg = ExactConfig::new(r * 1e-6, 1.0, 150e-6);
            cfg.n_max = 14;
            let curve = evolve_exact(&trap, &atom, &geometry, &cfg).unwrap();
            per_radius.push(tail_nbar(&curve, 0));
        }
        table.push(per_radius);
    }
    for (ri, per_radius) in table.iter().enumerate() {
        // |misalign| <= 1 degree keeps the steady state below 0.3.
        for (ai, &a) in angles_deg.iter().enumerate() {
            if a.abs() <= 1.0 + 1e-9 {
                assert!(
                    per_radius[ai] < 0.3,
                    "r = {} um, misalign {a} deg: nbar_ss = {:.3}",
                    radii_um[ri],
                    per_radius[ai]
                );
            }
        }
        // Monotone growth from 1 to 2 degrees.
        let i1 = angles_deg.iter().position(|&x| x == 1.0).unwrap();
        assert!(
            per_radius[i1 + 1] > per_radius[i1] && per_radius[i1 + 2] > per_radius[i1 + 1],
            "r = {} um: nbar_ss not increasing over 1..2 deg: {:?}",
            radii_um[ri],
            &per_radius[i1..]
        );
    }
    println!("criterion 10 PASS: nbar_ss grid (rows r = 25, 50, 75 um; cols -1..2 deg):");
    for (ri, per_radius) in table.iter().enumerate() {
        let cells: Vec<String> = per_radius.iter().map(|v| format!("{v:.3}")).collect();
        println!("  r = {:>2} um: {}", radii_um[ri], cells.join("  "));
    }
}

#[test]
fn criterion_11_gm_sm_common_fixed_point() {
    let atom = AtomParams::be9();
    let trap = support::nist_trap(1, None);
    let geometry = support::opt_geometry(360e6, 0.0, &atom);
    let crystal = IonCrystal::ring(1, 0.0, &trap).unwrap();
    let t_final = 150e-6;

    let mut gm = SimConfig::new(trap, atom, geometry, Model::Gm);
    gm.nbar_com0 = 5.0;
    gm.t_final = t_final;
    let gm_curve = run_model(&gm, &crystal).unwrap();
    let gm_ss = tail_nbar(&gm_curve, 0);

    let mut sm = SimConfig::new(trap, atom, geometry, Model::Sm);
    sm.nbar_com0 = 5.0;
    sm.t_final = t_final;
    sm.n_traj = 256;
    sm.rng_seed = 11;
    let sm_curve = run_model(&sm, &crystal).unwrap();
    let sm_ss = tail_nbar(&sm_curve, 0);
    let last = sm_curve.times.len() - 1;
    let se = sm_curve.ci_high.as_ref().unwrap()[[last, 0]] - sm_curve.nbar[[last, 0]];

    let tol = (2.0 * se).max(0.02);
    assert!(
        (gm_ss - sm_ss).abs() < tol,
        "GM steady state {gm_ss:.4} vs SM {sm_ss:.4} (tolerance {tol:.4})"
    );
    println!(
        "criterion 11 PASS: nbar_ss GM = {gm_ss:.4}, SM = {sm_ss:.4} +- {se:.4} (tolerance {tol:.4})"
    );
}

/// Extended, optional: the 37-ion SM COM time constant. At ~20 minutes per
/// trajectory this is a multi-hour run, ignored by default.
#[test]
#[ignore]
fn criterion_12_extended_time_constant_n37() {
    let atom = AtomParams::be9();
    let trap = support::nist_trap(37, None);
    let geometry = support::opt_geometry(360e6, 0.0, &atom);
    let crystal = solve_equilibrium(&trap, 0).unwrap();
    let mut sim = SimConfig::new(trap, atom, geometry, Model::Sm);
    sim.nbar_com0 = 5.0;
    sim.t_final = 50e-6;
    sim.n_traj = 16;
    sim.rng_seed = 12;
    let curve = run_model(&sim, &crystal).unwrap();
    let fit = fit_rate(&curve, 0, 2e-6).unwrap();
    let tau_us = fit.tau * 1e6;
    assert!(
        (10.5..=31.5).contains(&tau_us),
        "tau = {tau_us:.1} us outside 21 us +- 50%"
    );
    println!("criterion 12 (extended) PASS: tau = {tau_us:.1} us");
}

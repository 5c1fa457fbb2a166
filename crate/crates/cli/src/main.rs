//! Command-line driver: experiment presets, deterministic batch execution,
//! CSV emission and run manifests.
//!
//! Exit codes: 0 success, 2 parameter/validation failure, 3 numerical
//! failure.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use config::Config;
use eitcool::constants::to_hz;
use eitcool::crystal::{drumhead_modes, solve_equilibrium, IonCrystal};
use eitcool::eitmodel::build_couplings;
use eitcool::engines::{
    fit_rate, gm_initial_state, power_law_exponent, run_sm_into, CoolingCurve, IntegratorSnapshot,
    Model, MomentIntegrator, SimConfig, SmAccumulator,
};
use eitcool::exact::{evolve_exact, ExactConfig};
use eitcool::output::{
    write_cooling_csv, write_crystal_csv, write_csv, write_modes_csv, write_spectrum_csv,
    RunManifest,
};
use eitcool::spectrum::{absorption_spectrum, default_offsets, ProbeTarget};

#[derive(Parser)]
#[command(name = "eitcool", about = "EIT cooling of planar ion crystals in a Penning trap")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,

    /// Built-in parameter preset (fig1..fig8).
    #[arg(long, global = true)]
    preset: Option<String>,

    /// TOML configuration file; applied on top of the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,

    /// RNG seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Trajectory-count override (sampling model).
    #[arg(long, global = true)]
    n_traj: Option<usize>,

    /// Worker threads for trajectory parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Integrator step override [s].
    #[arg(long, global = true)]
    dt: Option<f64>,

    /// Evolution time override [s].
    #[arg(long, global = true)]
    t_final: Option<f64>,

    /// Dotted-key configuration overrides, e.g. --set trap.omega-z-hz=1.57e6.
    /// Bare --section.key=value arguments are accepted as well.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Resume from a checkpoint left in the output directory.
    #[arg(long, global = true)]
    resume: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve the crystal equilibrium and export positions and drumhead modes.
    Crystal,
    /// Weak-probe absorption spectrum of the dressed three-level system.
    Spectrum,
    /// Exact single-ion density-matrix evolution over the configured radii.
    Exact,
    /// Gaussian-model cooling run.
    Gm,
    /// Sampling-model cooling run.
    Sm,
    /// Steady-state occupation versus misalignment angle over the radius list.
    ScanMisalign,
    /// Cooling rate versus ion number (sampling model).
    ScanN,
}

fn main() -> ExitCode {
    // Pull `--section.key=value` style arguments out before clap sees them.
    let mut args: Vec<String> = Vec::new();
    let mut dotted: Vec<String> = Vec::new();
    for a in std::env::args() {
        let body = a.strip_prefix("--").unwrap_or(&a);
        if a.starts_with("--") && body.contains('.') && body.contains('=') {
            dotted.push(body.to_string());
        } else {
            args.push(a);
        }
    }
    let cli = Cli::parse_from(args);
    match run(cli, dotted) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = classify(&e);
            ExitCode::from(code)
        }
    }
}

/// 2 for validation problems, 3 for numerical failures.
fn classify(e: &anyhow::Error) -> u8 {
    if let Some(core) = e.downcast_ref::<eitcool::Error>() {
        return match core {
            eitcool::Error::Parameter(_) | eitcool::Error::Dimension(_) => 2,
            _ => 3,
        };
    }
    // Configuration parse/override problems arrive as plain anyhow errors.
    2
}

fn run(cli: Cli, dotted: Vec<String>) -> Result<()> {
    let mut cfg = match &cli.preset {
        Some(p) => config::preset(p)?,
        None => Config::default(),
    };
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        cfg = Config::from_toml(&text)?;
    }
    for ov in dotted.iter().chain(&cli.overrides) {
        cfg.apply_override(ov)?;
    }
    if let Some(seed) = cli.seed {
        cfg.sim.seed = seed;
    }
    if let Some(n) = cli.n_traj {
        cfg.sim.n_traj = n;
    }
    if let Some(dt) = cli.dt {
        cfg.sim.dt_s = config::OrAuto::Value(dt);
    }
    if let Some(tf) = cli.t_final {
        cfg.sim.t_final_us = tf * 1e6;
    }
    if let Some(threads) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    fs::create_dir_all(&cli.out_dir)?;

    match cli.cmd {
        Cmd::Crystal => cmd_crystal(&cfg, &cli.out_dir),
        Cmd::Spectrum => cmd_spectrum(&cfg, &cli.out_dir),
        Cmd::Exact => cmd_exact(&cfg, &cli.out_dir),
        Cmd::Gm => cmd_gm(&cfg, &cli.out_dir, cli.resume),
        Cmd::Sm => cmd_sm(&cfg, &cli.out_dir, cli.resume),
        Cmd::ScanMisalign => cmd_scan_misalign(&cfg, &cli.out_dir),
        Cmd::ScanN => cmd_scan_n(&cfg, &cli.out_dir),
    }
}

fn manifest_base(cfg: &Config, wall: f64) -> RunManifest {
    let mut m = RunManifest::new(
        serde_json::json!({
            "toml": cfg.to_toml(),
            "resolved": cfg,
            "wall_strength_rad2_s2": wall,
        }),
        vec![cfg.sim.seed],
    );
    m.warnings = Vec::new();
    m
}

/// Build the crystal for the configured ion number: solved equilibria for
/// N > 2, ring placements at the first configured radius otherwise.
fn build_crystal(cfg: &Config, wall: f64) -> Result<IonCrystal> {
    let trap = cfg.trap_params(wall);
    trap.validate()?;
    if cfg.trap.n_ions <= 2 {
        let r = cfg.sim.radius_um.first().copied().unwrap_or(20.0) * 1e-6;
        Ok(IonCrystal::ring(cfg.trap.n_ions, r, &trap)?)
    } else {
        Ok(solve_equilibrium(&trap, cfg.sim.seed)?)
    }
}

fn sim_config(cfg: &Config, model: Model, wall: f64) -> Result<SimConfig> {
    let mut sim = SimConfig::new(cfg.trap_params(wall), cfg.atom_params(), cfg.laser_geometry()?, model);
    sim.nbar_com0 = cfg.sim.nbar_com0;
    sim.t_final = cfg.sim.t_final_us * 1e-6;
    if let config::OrAuto::Value(dt) = cfg.sim.dt_s {
        sim.dt = Some(dt);
    }
    if let config::OrAuto::Value(se) = cfg.sim.sample_every {
        sim.sample_every = Some(se as usize);
    }
    sim.n_traj = cfg.sim.n_traj;
    sim.rng_seed = cfg.sim.seed;
    Ok(sim)
}

fn cmd_crystal(cfg: &Config, out: &Path) -> Result<()> {
    let wall = cfg.resolve_wall()?;
    let trap = cfg.trap_params(wall);
    let crystal = solve_equilibrium(&trap, cfg.sim.seed)?;
    let modes = drumhead_modes(&crystal, &trap)?;
    let crystal_path = out.join("crystal.csv");
    let modes_path = out.join("modes.csv");
    write_crystal_csv(&crystal_path, &crystal)?;
    write_modes_csv(&modes_path, &modes)?;
    let mut manifest = manifest_base(cfg, wall);
    manifest.outputs = vec![crystal_path, modes_path];
    if let Some(obj) = manifest.config.as_object_mut() {
        obj.insert("bandwidth_hz".into(), serde_json::json!(to_hz(modes.bandwidth)));
        obj.insert("com_freq_hz".into(), serde_json::json!(to_hz(modes.freqs[modes.com_index])));
        obj.insert("residual_gradient_n".into(), serde_json::json!(crystal.residual_gradient));
    }
    manifest.finish();
    manifest.write(&out.join("manifest.json"))?;
    println!(
        "N = {}: bandwidth {:.1} kHz, COM {:.4} MHz, residual {:.2e} N",
        trap.n_ions,
        to_hz(modes.bandwidth) / 1e3,
        to_hz(modes.freqs[modes.com_index]) / 1e6,
        crystal.residual_gradient
    );
    Ok(())
}

fn cmd_spectrum(cfg: &Config, out: &Path) -> Result<()> {
    let wall = cfg.resolve_wall()?;
    let atom = cfg.atom_params();
    let geometry = cfg.laser_geometry()?;
    let spec = absorption_spectrum(
        geometry.detuning0,
        geometry.rabi1,
        geometry.rabi2,
        &atom,
        cfg.lasers.probe_fraction * geometry.rabi1,
        &default_offsets(),
        ProbeTarget::G1,
    )?;
    let path = out.join("spectrum.csv");
    write_spectrum_csv(&path, &spec)?;
    let mut manifest = manifest_base(cfg, wall);
    manifest.outputs = vec![path];
    if let Some(obj) = manifest.config.as_object_mut() {
        obj.insert("peak_offset_hz".into(), serde_json::json!(to_hz(spec.peak_offset)));
        obj.insert("transparency_residual".into(), serde_json::json!(spec.transparency_residual));
    }
    manifest.finish();
    manifest.write(&out.join("manifest.json"))?;
    println!(
        "transparency residual {:.2e}, peak at {:.3} MHz",
        spec.transparency_residual,
        to_hz(spec.peak_offset) / 1e6
    );
    Ok(())
}

fn cmd_exact(cfg: &Config, out: &Path) -> Result<()> {
    let wall = cfg.resolve_wall()?;
    let trap = cfg.trap_params(wall);
    let atom = cfg.atom_params();
    let geometry = cfg.laser_geometry()?;
    let mut manifest = manifest_base(cfg, wall);
    for &r_um in &cfg.sim.radius_um {
        let mut ecfg = ExactConfig::new(r_um * 1e-6, cfg.sim.nbar_com0, cfg.sim.t_final_us * 1e-6);
        ecfg.n_max = cfg.sim.n_max;
        if let config::OrAuto::Value(dt) = cfg.sim.dt_s {
            ecfg.dt = Some(dt);
        }
        let curve = evolve_exact(&trap, &atom, &geometry, &ecfg)?;
        let path = out.join(format!("exact_r{:03}um.csv", r_um.round() as i64));
        write_cooling_csv(&path, &curve)?;
        manifest.warnings.extend(curve.warnings.clone());
        manifest.outputs.push(path);
        println!(
            "r = {r_um:.0} um: nbar {:.3} -> {:.4}",
            curve.nbar[[0, 0]],
            curve.final_nbar(0)
        );
    }
    manifest.finish();
    manifest.write(&out.join("manifest.json"))?;
    Ok(())
}

fn cmd_gm(cfg: &Config, out: &Path, resume: bool) -> Result<()> {
    let wall = cfg.resolve_wall()?;
    let crystal = build_crystal(cfg, wall)?;
    let sim = sim_config(cfg, Model::Gm, wall)?;
    let modes = drumhead_modes(&crystal, &sim.trap)?;
    let couplings = build_couplings(&modes, &sim.geometry, &sim.atom, &crystal)?;

    let ckpt_path = out.join("gm.ckpt.json");
    let mut integ = if resume && ckpt_path.exists() {
        let snap: IntegratorSnapshot = serde_json::from_str(&fs::read_to_string(&ckpt_path)?)?;
        eprintln!("resuming from step {}", snap.step);
        MomentIntegrator::restore(&sim, &couplings, &snap)?
    } else {
        MomentIntegrator::new(&sim, &couplings, gm_initial_state(&modes, sim.nbar_com0))?
    };

    let interval = cfg.sim.checkpoint_sec;
    let mut last_ckpt = Instant::now();
    let chunk = 20_000usize;
    while !integ.finished() {
        integ.advance(chunk)?;
        if interval > 0.0 && last_ckpt.elapsed().as_secs_f64() > interval {
            fs::write(&ckpt_path, serde_json::to_string(&integ.snapshot())?)?;
            last_ckpt = Instant::now();
        }
    }
    let _ = fs::remove_file(&ckpt_path);

    let curve = integ.into_curve(&sim);
    let path = out.join("cooling_gm.csv");
    write_cooling_csv(&path, &curve)?;
    let mut manifest = manifest_base(cfg, wall);
    manifest.outputs = vec![path];
    manifest.warnings = curve.warnings.clone();
    manifest.finish();
    manifest.write(&out.join("manifest.json"))?;
    let com = modes.com_index;
    println!("GM: COM nbar {:.3} -> {:.4}", curve.nbar[[0, com]], curve.final_nbar(com));
    Ok(())
}

fn cmd_sm(cfg: &Config, out: &Path, resume: bool) -> Result<()> {
    let wall = cfg.resolve_wall()?;
    let crystal = build_crystal(cfg, wall)?;
    let sim = sim_config(cfg, Model::Sm, wall)?;
    let modes = drumhead_modes(&crystal, &sim.trap)?;
    let couplings = build_couplings(&modes, &sim.geometry, &sim.atom, &crystal)?;

    let ckpt_path = out.join("sm.ckpt.json");
    let mut acc = if resume && ckpt_path.exists() {
        let a: SmAccumulator = serde_json::from_str(&fs::read_to_string(&ckpt_path)?)?;
        eprintln!("resuming after {} trajectories", a.done);
        a
    } else {
        SmAccumulator::new()
    };
    let interval = cfg.sim.checkpoint_sec;
    let mut last_ckpt = Instant::now();
    run_sm_into(&sim, &modes, &couplings, &mut acc, |a| {
        if interval > 0.0 && last_ckpt.elapsed().as_secs_f64() > interval {
            if let Ok(text) = serde_json::to_string(a) {
                let _ = fs::write(&ckpt_path, text);
            }
            last_ckpt = Instant::now();
        }
    })?;
    let _ = fs::remove_file(&ckpt_path);

    let curve = acc.finalize(&sim, sim.n_traj)?;
    let path = out.join("cooling_sm.csv");
    write_cooling_csv(&path, &curve)?;
    let mut manifest = manifest_base(cfg, wall);
    manifest.outputs = vec![path];
    manifest.warnings = curve.warnings.clone();
    manifest.finish();
    manifest.write(&out.join("manifest.json"))?;
    let com = modes.com_index;
    println!("SM: COM nbar {:.3} -> {:.4}", curve.nbar[[0, com]], curve.final_nbar(com));
    Ok(())
}

/// Steady-state occupation estimate: mean over the trailing rotation periods,
/// which washes out the Doppler-modulation limit cycle.
fn steady_state_nbar(curve: &CoolingCurve, omega_r: f64) -> f64 {
    let period = 2.0 * std::f64::consts::PI / omega_r;
    curve.tail_mean(0, 5.0 * period)
}

fn cmd_scan_misalign(cfg: &Config, out: &Path) -> Result<()> {
    let wall = cfg.resolve_wall()?;
    let trap = cfg.trap_params(wall);
    let atom = cfg.atom_params();
    let mut rows = Vec::new();
    for &r_um in &cfg.sim.radius_um {
        for &mis_deg in &cfg.sim.misalign_grid_deg {
            let mut c = cfg.clone();
            c.lasers.misalign_deg = mis_deg;
            let geometry = c.laser_geometry()?;
            let mut ecfg = ExactConfig::new(r_um * 1e-6, cfg.sim.nbar_com0, cfg.sim.t_final_us * 1e-6);
            ecfg.n_max = cfg.sim.n_max;
            let curve = evolve_exact(&trap, &atom, &geometry, &ecfg)?;
            let nss = steady_state_nbar(&curve, trap.omega_r);
            println!("r = {r_um:.0} um, misalign {mis_deg:+.2} deg: nbar_ss = {nss:.4}");
            rows.push(vec![r_um, mis_deg, nss, curve.final_nbar(0)]);
        }
    }
    let path = out.join("scan_misalign.csv");
    write_csv(&path, &["radius_um", "misalign_deg", "nbar_ss", "nbar_final"], rows.into_iter())?;
    let mut manifest = manifest_base(cfg, wall);
    manifest.outputs = vec![path];
    manifest.finish();
    manifest.write(&out.join("manifest.json"))?;
    Ok(())
}

fn cmd_scan_n(cfg: &Config, out: &Path) -> Result<()> {
    let wall = cfg.resolve_wall()?;
    let mut rows = Vec::new();
    let mut ns = Vec::new();
    let mut rates = Vec::new();
    for &n in &cfg.sim.n_list {
        let mut c = cfg.clone();
        c.trap.n_ions = n;
        let wall_n = if n <= 2 { wall } else { c.resolve_wall()? };
        let crystal = build_crystal(&c, wall_n)?;
        let sim = sim_config(&c, Model::Sm, wall_n)?;
        let modes = drumhead_modes(&crystal, &sim.trap)?;
        let couplings = build_couplings(&modes, &sim.geometry, &sim.atom, &crystal)?;
        let mut acc = SmAccumulator::new();
        run_sm_into(&sim, &modes, &couplings, &mut acc, |_| {})?;
        let curve = acc.finalize(&sim, sim.n_traj)?;
        let fit = fit_rate(&curve, modes.com_index, 2e-6)?;
        println!(
            "N = {n}: rate {:.3e} 1/s (tau {:.1} us), nbar_ss {:.3}",
            fit.rate,
            fit.tau * 1e6,
            fit.nbar_ss
        );
        rows.push(vec![n as f64, fit.rate, fit.tau, fit.nbar_ss, fit.residual]);
        ns.push(n as f64);
        rates.push(fit.rate);
    }
    let path = out.join("scan_n.csv");
    write_csv(&path, &["n_ions", "rate_per_s", "tau_s", "nbar_ss", "fit_rms"], rows.into_iter())?;
    let mut manifest = manifest_base(cfg, wall);
    if ns.len() >= 2 {
        let expo = power_law_exponent(&ns, &rates);
        println!("rate ~ N^{expo:.3}");
        if let Some(obj) = manifest.config.as_object_mut() {
            obj.insert("power_law_exponent".into(), serde_json::json!(expo));
        }
    }
    manifest.outputs = vec![path];
    manifest.finish();
    manifest.write(&out.join("manifest.json"))?;
    Ok(())
}


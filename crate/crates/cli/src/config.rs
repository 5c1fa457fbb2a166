//! Run configuration: a single TOML file with nested sections (trap, atom,
//! lasers, sim), frequencies entered in cyclic Hz and angles in degrees,
//! converted once at this boundary. Unknown keys are rejected so that
//! misspellings never silently fall back to defaults.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use eitcool::constants::{hz, B_FIELD_NIST, LAMBDA_BE9, M_BE9_ION, Q_E};
use eitcool::crystal::TrapParams;
use eitcool::eitmodel::{optimum_rabi, AtomParams, LaserGeometry};

/// A numeric field that can also be the string "auto" (or "opt" for Rabi
/// frequencies), resolved at build time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OrAuto {
    Auto,
    Value(f64),
}

impl Default for OrAuto {
    fn default() -> Self {
        OrAuto::Auto
    }
}

impl Serialize for OrAuto {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            OrAuto::Auto => s.serialize_str("auto"),
            OrAuto::Value(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for OrAuto {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error;
        let v = toml::Value::deserialize(d)?;
        match v {
            toml::Value::String(s) if s == "auto" || s == "opt" => Ok(OrAuto::Auto),
            toml::Value::Float(f) => Ok(OrAuto::Value(f)),
            toml::Value::Integer(i) => Ok(OrAuto::Value(i as f64)),
            other => Err(D::Error::custom(format!(
                "expected a number or \"auto\", got {other}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrapSection {
    pub n_ions: usize,
    pub omega_z_hz: f64,
    pub omega_r_hz: f64,
    pub b_field_t: f64,
    /// Rotating-wall anisotropy [rad²/s²] or "auto" (smallest rigid value).
    pub wall_strength: OrAuto,
    pub ion_mass_kg: f64,
    pub charge_c: f64,
}

impl Default for TrapSection {
    fn default() -> Self {
        TrapSection {
            n_ions: 1,
            omega_z_hz: 1.59e6,
            omega_r_hz: 180e3,
            b_field_t: B_FIELD_NIST,
            wall_strength: OrAuto::Auto,
            ion_mass_kg: M_BE9_ION,
            charge_c: Q_E,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AtomSection {
    pub gamma1_hz: f64,
    pub gamma2_hz: f64,
    pub u2_1: f64,
    pub u2_2: f64,
    pub wavelength_m: f64,
}

impl Default for AtomSection {
    fn default() -> Self {
        AtomSection { gamma1_hz: 6e6, gamma2_hz: 12e6, u2_1: 0.4, u2_2: 0.2, wavelength_m: LAMBDA_BE9 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LaserSection {
    pub detuning0_hz: f64,
    pub theta_deg: f64,
    pub misalign_deg: f64,
    /// Rabi frequencies in Hz, or "opt" for the optimum-cooling value.
    pub rabi1_hz: OrAuto,
    pub rabi2_hz: OrAuto,
    /// Probe Rabi frequency as a fraction of rabi1 (spectrum runs).
    pub probe_fraction: f64,
}

impl Default for LaserSection {
    fn default() -> Self {
        LaserSection {
            detuning0_hz: 360e6,
            theta_deg: 10.0,
            misalign_deg: 0.0,
            rabi1_hz: OrAuto::Auto,
            rabi2_hz: OrAuto::Auto,
            probe_fraction: 0.05,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub nbar_com0: f64,
    pub t_final_us: f64,
    /// RK4 step in seconds, or "auto" for the stability bound.
    pub dt_s: OrAuto,
    pub sample_every: OrAuto,
    pub n_traj: usize,
    pub seed: u64,
    /// Fock truncation of the exact solver.
    pub n_max: usize,
    /// Radii for exact/scan runs and for ring placements of 1-2 ions [μm].
    pub radius_um: Vec<f64>,
    /// Misalignment grid for scan-misalign [deg].
    pub misalign_grid_deg: Vec<f64>,
    /// Ion numbers for scan-n.
    pub n_list: Vec<usize>,
    /// Checkpoint interval in seconds of wall time (0 disables).
    pub checkpoint_sec: f64,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            nbar_com0: 5.0,
            t_final_us: 100.0,
            dt_s: OrAuto::Auto,
            sample_every: OrAuto::Auto,
            n_traj: 256,
            seed: 0,
            n_max: 40,
            radius_um: vec![20.0],
            misalign_grid_deg: vec![-2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0],
            n_list: vec![1, 2, 7, 19],
            checkpoint_sec: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub trap: TrapSection,
    pub atom: AtomSection,
    pub lasers: LaserSection,
    pub sim: SimSection,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).context("parsing configuration")?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Apply a dotted-key override, e.g. `trap.omega-z-hz=1.57e6`.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let Some((key, value)) = spec.split_once('=') else {
            bail!("override '{spec}' is not of the form section.key=value");
        };
        let key = key.trim_start_matches("--").replace('-', "_");
        let mut root: toml::Value = toml::Value::try_from(&*self).expect("config to toml");
        let parts: Vec<&str> = key.split('.').collect();
        if parts.len() < 2 {
            bail!("override key '{key}' must be of the form section.key");
        }
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            node = node
                .get_mut(*p)
                .with_context(|| format!("unknown configuration section '{p}'"))?;
        }
        let leaf = parts[parts.len() - 1];
        let table = node.as_table_mut().context("not a section")?;
        if !table.contains_key(leaf) {
            bail!("unknown configuration key '{key}'");
        }
        let parsed: toml::Value = match &table[leaf] {
            toml::Value::Integer(_) => {
                if let Ok(i) = value.parse::<i64>() {
                    toml::Value::Integer(i)
                } else {
                    toml::Value::Float(value.parse::<f64>().with_context(|| format!("parsing '{value}'"))?)
                }
            }
            toml::Value::Array(_) => {
                let items: Result<Vec<toml::Value>> = value
                    .split(',')
                    .map(|v| {
                        let v = v.trim();
                        if let Ok(i) = v.parse::<i64>() {
                            Ok(toml::Value::Integer(i))
                        } else {
                            Ok(toml::Value::Float(v.parse::<f64>()?))
                        }
                    })
                    .collect();
                toml::Value::Array(items?)
            }
            // Scalars, including the auto/value fields (which serialize as
            // either a string or a float): numbers win when the override
            // parses as one, otherwise the string passes through and fails
            // re-validation below unless the field accepts it.
            _ => match value.parse::<f64>() {
                Ok(v) => toml::Value::Float(v),
                Err(_) => toml::Value::String(value.to_string()),
            },
        };
        table.insert(leaf.to_string(), parsed);
        *self = root.try_into().context("re-validating configuration after override")?;
        Ok(())
    }

    pub fn trap_params(&self, wall_strength: f64) -> TrapParams {
        TrapParams {
            ion_mass: self.trap.ion_mass_kg,
            charge: self.trap.charge_c,
            b_field: self.trap.b_field_t,
            omega_z: hz(self.trap.omega_z_hz),
            omega_r: hz(self.trap.omega_r_hz),
            wall_strength,
            n_ions: self.trap.n_ions,
        }
    }

    /// Resolve the wall strength, scanning for the smallest rigid value when
    /// set to "auto".
    pub fn resolve_wall(&self) -> Result<f64> {
        match self.trap.wall_strength {
            OrAuto::Value(v) => Ok(v),
            OrAuto::Auto => {
                let base = self.trap_params(0.0);
                if self.trap.n_ions <= 2 {
                    // Ring placements do not need a wall; use a small rigid
                    // default for consistency of the in-plane frequencies.
                    return Ok(0.0265 * base.in_plane_base());
                }
                Ok(eitcool::crystal::auto_wall_strength(&base, self.sim.seed)?)
            }
        }
    }

    pub fn atom_params(&self) -> AtomParams {
        AtomParams {
            gamma1: hz(self.atom.gamma1_hz),
            gamma2: hz(self.atom.gamma2_hz),
            u2_1: self.atom.u2_1,
            u2_2: self.atom.u2_2,
            wavelength: self.atom.wavelength_m,
            ion_mass: self.trap.ion_mass_kg,
        }
    }

    pub fn laser_geometry(&self) -> Result<LaserGeometry> {
        let atom = self.atom_params();
        let omega_com = hz(self.trap.omega_z_hz);
        let det = hz(self.lasers.detuning0_hz);
        let opt = optimum_rabi(det, omega_com)?;
        let rabi1 = match self.lasers.rabi1_hz {
            OrAuto::Auto => opt,
            OrAuto::Value(v) => hz(v),
        };
        let rabi2 = match self.lasers.rabi2_hz {
            OrAuto::Auto => opt,
            OrAuto::Value(v) => hz(v),
        };
        Ok(LaserGeometry::new(
            det,
            self.lasers.theta_deg.to_radians(),
            self.lasers.misalign_deg.to_radians(),
            rabi1,
            rabi2,
            &atom,
        )?)
    }
}

/// Built-in parameter presets mirroring the reference figures.
pub fn preset(name: &str) -> Result<Config> {
    let mut c = Config::default();
    match name {
        "fig1" => {
            c.lasers.detuning0_hz = 360e6;
            c.lasers.probe_fraction = 0.05;
        }
        "fig2" => {
            c.lasers.detuning0_hz = 180e6;
            c.trap.n_ions = 1;
            c.sim.t_final_us = 300.0;
            c.sim.radius_um = vec![0.0, 20.0, 40.0, 60.0];
        }
        "fig3" => {
            c.lasers.detuning0_hz = 180e6;
            c.trap.n_ions = 1;
            c.sim.t_final_us = 300.0;
            c.sim.radius_um = vec![0.0];
        }
        "fig4" => {
            c.lasers.detuning0_hz = 360e6;
            c.trap.n_ions = 37;
            c.sim.t_final_us = 100.0;
        }
        "fig5" => {
            c.lasers.detuning0_hz = 360e6;
            c.trap.n_ions = 1;
            c.sim.t_final_us = 300.0;
            c.sim.radius_um = vec![0.0, 20.0, 40.0, 60.0];
            c.sim.n_traj = 2096;
        }
        "fig6" => {
            c.lasers.detuning0_hz = 360e6;
            c.sim.t_final_us = 100.0;
            c.sim.n_list = vec![1, 2, 19, 37];
            c.sim.n_traj = 2096;
        }
        "fig7a" => {
            c.lasers.detuning0_hz = 360e6;
            c.trap.n_ions = 37;
            c.sim.t_final_us = 100.0;
        }
        "fig7" | "fig7b" => {
            c.lasers.detuning0_hz = 400e6;
            c.trap.n_ions = 120;
            c.sim.t_final_us = 300.0;
        }
        "fig8" => {
            c.lasers.detuning0_hz = 400e6;
            c.trap.n_ions = 1;
            c.sim.t_final_us = 150.0;
            c.sim.radius_um = vec![25.0, 50.0, 75.0, 100.0];
        }
        other => bail!("unknown preset '{other}' (expected fig1..fig8)"),
    }
    Ok(c)
}

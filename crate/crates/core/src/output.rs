//! CSV emission and run manifests.
//!
//! All numeric columns are written with 9 significant digits so that reruns
//! can be compared byte-for-byte.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::crystal::{IonCrystal, ModeDecomposition};
use crate::error::Result;

/// Format a float with 9 significant digits.
pub fn fmt_g9(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    format!("{x:.8e}")
}

/// Write a CSV file from a header and rows of f64 columns.
pub fn write_csv(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        let mut first = true;
        for v in row {
            if !first {
                out.push(',');
            }
            first = false;
            let _ = write!(out, "{}", fmt_g9(v));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Crystal export: one row per ion with rotating-frame coordinates.
pub fn write_crystal_csv(path: &Path, crystal: &IonCrystal) -> Result<()> {
    write_csv(
        path,
        &["ion_index", "x_m", "y_m"],
        (0..crystal.n_ions()).map(|j| {
            vec![j as f64, crystal.positions[[j, 0]], crystal.positions[[j, 1]]]
        }),
    )
}

/// Mode export: one row per mode with its frequency in Hz followed by the N
/// eigenvector components.
pub fn write_modes_csv(path: &Path, modes: &ModeDecomposition) -> Result<()> {
    let n = modes.n_modes();
    let mut header: Vec<String> = vec!["mode_index".into(), "freq_Hz".into()];
    for j in 0..n {
        header.push(format!("v{j}"));
    }
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    write_csv(
        path,
        &header_refs,
        (0..n).map(|m| {
            let mut row = vec![m as f64, crate::constants::to_hz(modes.freqs[m])];
            for j in 0..n {
                row.push(modes.mode_matrix[[j, m]]);
            }
            row
        }),
    )
}

/// Cooling-curve export: time in μs, one nbar column per mode, and the
/// optional per-mode standard-error band columns.
pub fn write_cooling_csv(path: &Path, curve: &crate::engines::CoolingCurve) -> Result<()> {
    let n = curve.n_modes();
    let mut header: Vec<String> = vec!["t_us".into()];
    for m in 0..n {
        header.push(format!("mode_{m}_nbar"));
    }
    if curve.ci_low.is_some() {
        for m in 0..n {
            header.push(format!("mode_{m}_ci_low"));
            header.push(format!("mode_{m}_ci_high"));
        }
    }
    if curve.populations.is_some() {
        header.extend(["pop_g1".into(), "pop_g2".into(), "pop_e".into()]);
    }
    if curve.trace_err.is_some() {
        header.push("trace_err".into());
    }
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    write_csv(
        path,
        &header_refs,
        curve.times.iter().enumerate().map(|(i, &t)| {
            let mut row = vec![t * 1e6];
            for m in 0..n {
                row.push(curve.nbar[[i, m]]);
            }
            if let (Some(lo), Some(hi)) = (&curve.ci_low, &curve.ci_high) {
                for m in 0..n {
                    row.push(lo[[i, m]]);
                    row.push(hi[[i, m]]);
                }
            }
            if let Some(p) = &curve.populations {
                row.extend([p[[i, 0]], p[[i, 1]], p[[i, 2]]]);
            }
            if let Some(te) = &curve.trace_err {
                row.push(te[i]);
            }
            row
        }),
    )
}

/// Spectrum export: probe offset in Hz and absorption (arbitrary units).
pub fn write_spectrum_csv(path: &Path, spec: &crate::spectrum::SpectrumResult) -> Result<()> {
    write_csv(
        path,
        &["delta_Hz", "absorption"],
        spec.probe_offsets
            .iter()
            .zip(&spec.absorption)
            .map(|(&d, &a)| vec![crate::constants::to_hz(d), a]),
    )
}

/// Execution record accompanying every emitted data file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    /// Canonical echo of the full configuration (module-specific JSON).
    pub config: serde_json::Value,
    /// RNG seeds in effect.
    pub seeds: Vec<u64>,
    /// Crate version.
    pub code_version: String,
    /// Wall-clock timestamps (seconds since the Unix epoch).
    pub started_unix_s: f64,
    pub finished_unix_s: f64,
    /// Output files produced by this run.
    pub outputs: Vec<PathBuf>,
    /// Diagnostics such as truncation flags or excluded trajectories.
    pub warnings: Vec<String>,
}

impl RunManifest {
    pub fn new(config: serde_json::Value, seeds: Vec<u64>) -> Self {
        RunManifest {
            config,
            seeds,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix_s: unix_now(),
            finished_unix_s: 0.0,
            outputs: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn finish(&mut self) {
        self.finished_unix_s = unix_now();
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text)?;
        Ok(())
    }
}

pub fn unix_now() -> f64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g9_roundtrip_is_stable() {
        for x in [0.0, 1.0, -3.25e-19, 9.87654321e8, 1.59e6] {
            let s = fmt_g9(x);
            let y: f64 = s.parse().unwrap();
            let s2 = fmt_g9(y);
            assert_eq!(s, s2);
        }
    }
}

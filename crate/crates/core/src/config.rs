//! Run configuration for the command-line front end.
//!
//! Configs are JSON. Every section and field has a default, unknown keys are
//! rejected, and [`RunConfig::validate`] checks all module preconditions
//! before any computation starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{BackgroundWindow, CALIBRATED_N_POS, CALIBRATED_OMEGA_MAX, DEFAULT_LAMBDA0_NM};
use crate::error::{Error, Result};
use crate::montecarlo::{DEFAULT_MASTER_SEED, DEFAULT_REALIZATIONS};
use crate::spectral::{double_gaussian, make_grid, tau_grid, SpectralAmplitude};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumConfig {
    /// Coincidence rate at τ = 0 for σ = 0, Hz.
    pub b_hz: f64,
    pub mu: f64,
    pub sigma_p: f64,
    pub lambda0_nm: f64,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        Self {
            b_hz: 708.71,
            mu: 0.0275,
            sigma_p: 0.022,
            lambda0_nm: DEFAULT_LAMBDA0_NM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub n_pos: usize,
    pub omega_max: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            n_pos: CALIBRATED_N_POS,
            omega_max: CALIBRATED_OMEGA_MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSettings {
    pub n_realizations: usize,
    pub sigmas: Vec<f64>,
    pub master_seed: u64,
}

impl Default for EnsembleSettings {
    fn default() -> Self {
        Self {
            n_realizations: DEFAULT_REALIZATIONS,
            sigmas: vec![0.0, 0.5, 1.0, 2.0, 10.0],
            master_seed: DEFAULT_MASTER_SEED,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TauConfig {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl Default for TauConfig {
    fn default() -> Self {
        Self {
            min: -250.0,
            max: 250.0,
            step: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Replace each simulated trace by a Poisson-sampled measurement.
    pub poisson: bool,
    /// Integration time per τ point, s.
    pub acquisition_time: f64,
    pub dark_rate: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            poisson: false,
            acquisition_time: 1.0,
            dark_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub directory: PathBuf,
    pub formats: Vec<OutputFormat>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("out"),
            formats: vec![OutputFormat::Csv, OutputFormat::Json],
        }
    }
}

impl OutputConfig {
    pub fn wants(&self, f: OutputFormat) -> bool {
        self.formats.contains(&f)
    }
}

/// Small-grid density-matrix oracle settings for `verify`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub n_pos: usize,
    pub omega_max: f64,
    pub n_realizations: usize,
    pub sigmas: Vec<f64>,
    /// Allowed distance to the predicted mixture, in units of ‖ρq − ρc‖.
    pub tolerance: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            n_pos: 16,
            omega_max: 0.15,
            n_realizations: 5000,
            sigmas: vec![0.0, 0.5, 0.833, 1.0, 2.0],
            tolerance: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub background_window: Vec<(f64, f64)>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            background_window: BackgroundWindow::default().intervals,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub spectrum: SpectrumConfig,
    pub grid: GridConfig,
    pub ensemble: EnsembleSettings,
    pub tau: TauConfig,
    pub noise: NoiseConfig,
    pub output: OutputConfig,
    pub verify: VerifyConfig,
    pub analysis: AnalysisConfig,
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::invalid(msg()))
    }
}

fn check_sigmas(name: &str, sigmas: &[f64]) -> Result<()> {
    check(!sigmas.is_empty(), || format!("{name} must not be empty"))?;
    for &s in sigmas {
        check(s >= 0.0 && s.is_finite(), || format!("{name}: sigma {s} must be >= 0 and finite"))?;
    }
    Ok(())
}

impl RunConfig {
    /// Parses JSON. Syntax and schema errors carry line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.spectrum;
        check(s.b_hz > 0.0 && s.b_hz.is_finite(), || format!("spectrum.b_hz must be > 0, got {}", s.b_hz))?;
        check(s.mu >= 0.0 && s.mu.is_finite(), || format!("spectrum.mu must be >= 0, got {}", s.mu))?;
        check(s.sigma_p > 0.0 && s.sigma_p.is_finite(), || {
            format!("spectrum.sigma_p must be > 0, got {}", s.sigma_p)
        })?;
        check(s.lambda0_nm > 0.0 && s.lambda0_nm.is_finite(), || {
            format!("spectrum.lambda0_nm must be > 0, got {}", s.lambda0_nm)
        })?;
        make_grid(self.grid.n_pos, self.grid.omega_max)?;
        let e = &self.ensemble;
        check(e.n_realizations >= 1, || "ensemble.n_realizations must be >= 1".into())?;
        check_sigmas("ensemble.sigmas", &e.sigmas)?;
        self.tau_values()?;
        let n = &self.noise;
        check(n.acquisition_time > 0.0 && n.acquisition_time.is_finite(), || {
            format!("noise.acquisition_time must be > 0, got {}", n.acquisition_time)
        })?;
        check(n.dark_rate >= 0.0 && n.dark_rate.is_finite(), || {
            format!("noise.dark_rate must be >= 0, got {}", n.dark_rate)
        })?;
        check(!self.output.formats.is_empty(), || "output.formats must not be empty".into())?;
        let v = &self.verify;
        make_grid(v.n_pos, v.omega_max)?;
        check(v.n_realizations >= 1, || "verify.n_realizations must be >= 1".into())?;
        check_sigmas("verify.sigmas", &v.sigmas)?;
        check(v.tolerance >= 0.0 && v.tolerance.is_finite(), || {
            format!("verify.tolerance must be >= 0, got {}", v.tolerance)
        })?;
        self.window().validate()?;
        Ok(())
    }

    pub fn tau_values(&self) -> Result<Vec<f64>> {
        tau_grid(self.tau.min, self.tau.max, self.tau.step)
            .map_err(|e| Error::invalid(format!("tau: {e}")))
    }

    pub fn window(&self) -> BackgroundWindow {
        BackgroundWindow {
            intervals: self.analysis.background_window.clone(),
        }
    }

    pub fn spectrum(&self) -> Result<SpectralAmplitude> {
        let g = make_grid(self.grid.n_pos, self.grid.omega_max)?;
        double_gaussian(self.spectrum.b_hz, self.spectrum.mu, self.spectrum.sigma_p, &g)
    }

    pub fn verify_spectrum(&self) -> Result<SpectralAmplitude> {
        let g = make_grid(self.verify.n_pos, self.verify.omega_max)?;
        double_gaussian(self.spectrum.b_hz, self.spectrum.mu, self.spectrum.sigma_p, &g)
    }
}

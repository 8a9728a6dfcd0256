//! Frequency grids, biphoton spectral amplitudes and the transform to the
//! temporal basis.
//!
//! Units: detunings Ω in rad/fs, times τ in fs, rates in Hz.
//!
//! Grids are symmetric with half-offset bins at ±(k+½)·ΔΩ, so there is no
//! Ω = 0 sample and every bin has a distinct mirror partner. Bin `k` and bin
//! `2·n_pos − 1 − k` are mirrors and their detunings are exact negatives.
//!
//! Transform convention (used everywhere in the crate):
//!
//! ```text
//! Λ̂(τ) = Σ_k Λ(Ω_k) · e^{+iΩ_k τ} · ΔΩ
//! ```
//!
//! With this convention Parseval reads `Σ_τ |Λ̂(τ)|² Δτ = 2π Σ_k |Λ(Ω_k)|² ΔΩ`,
//! exact when τ spans one alias period `2π/ΔΩ` with at least `2·n_pos` samples.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Speed of light in nm/fs.
pub const SPEED_OF_LIGHT_NM_PER_FS: f64 = 299.792_458;

/// Relative tolerance used for uniform-spacing checks.
const SPACING_TOL: f64 = 1e-9;

/// Relative tolerance for the symmetry flag of a spectral amplitude.
pub const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyGrid {
    n_pos: usize,
    omega_max: f64,
    bin_width: f64,
    values: Vec<f64>,
}

impl FrequencyGrid {
    pub fn new(n_pos: usize, omega_max: f64) -> Result<Self> {
        if n_pos < 2 {
            return Err(Error::invalid(format!("n_pos must be >= 2, got {n_pos}")));
        }
        if !(omega_max > 0.0) || !omega_max.is_finite() {
            return Err(Error::invalid(format!(
                "omega_max must be positive and finite, got {omega_max}"
            )));
        }
        let bin_width = omega_max / n_pos as f64;
        let n = n_pos as f64;
        let values = (0..2 * n_pos)
            .map(|k| (k as f64 - n + 0.5) * bin_width)
            .collect();
        Ok(Self {
            n_pos,
            omega_max,
            bin_width,
            values,
        })
    }

    /// Number of Ω > 0 bins.
    pub fn n_pos(&self) -> usize {
        self.n_pos
    }

    /// Total number of bins, `2·n_pos`.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn omega_max(&self) -> f64 {
        self.omega_max
    }

    pub fn bin_width(&self) -> f64 {
        self.bin_width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn omega(&self, k: usize) -> f64 {
        self.values[k]
    }

    /// Index of the bin at −Ω_k.
    pub fn mirror(&self, k: usize) -> usize {
        self.values.len() - 1 - k
    }

    /// Index (into the full grid) of the `j`-th positive bin, ordered by
    /// increasing Ω.
    pub fn positive_index(&self, j: usize) -> usize {
        self.n_pos + j
    }

    /// Detunings of the Ω > 0 bins in increasing order.
    pub fn positive_values(&self) -> &[f64] {
        &self.values[self.n_pos..]
    }

    /// For bin `k`, the position of |Ω_k| among the positive bins.
    pub fn pair_index(&self, k: usize) -> usize {
        if k >= self.n_pos {
            k - self.n_pos
        } else {
            self.n_pos - 1 - k
        }
    }

    /// Checks pairing and uniform spacing. Always true for grids built by
    /// [`FrequencyGrid::new`]; useful for deserialized grids.
    pub fn validate(&self) -> Result<()> {
        if self.values.len() != 2 * self.n_pos || self.n_pos < 2 {
            return Err(Error::invalid("grid length does not match 2·n_pos"));
        }
        for k in 0..self.values.len() {
            if self.values[self.mirror(k)] != -self.values[k] {
                return Err(Error::invalid(format!("bin {k} has no exact mirror")));
            }
        }
        for w in self.values.windows(2) {
            let step = w[1] - w[0];
            if !(step > 0.0) || ((step - self.bin_width) / self.bin_width).abs() > SPACING_TOL {
                return Err(Error::invalid("grid spacing is not uniform"));
            }
        }
        Ok(())
    }
}

/// Symmetric detuning grid with `2·n_pos` half-offset bins spanning
/// `[−omega_max, +omega_max]`.
pub fn make_grid(n_pos: usize, omega_max: f64) -> Result<FrequencyGrid> {
    FrequencyGrid::new(n_pos, omega_max)
}

/// Complex biphoton amplitude Λ(Ω) sampled on a grid. Units are
/// √Hz·fs/rad so that `|Σ Λ ΔΩ|²` is a rate in Hz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralAmplitude {
    grid: FrequencyGrid,
    amp: Vec<Complex64>,
    symmetric: bool,
    pub label: String,
}

impl SpectralAmplitude {
    /// Wraps samples, checking finiteness. The symmetry flag is computed.
    pub fn new(grid: FrequencyGrid, amp: Vec<Complex64>, label: impl Into<String>) -> Result<Self> {
        if amp.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} samples for a grid of {} bins",
                amp.len(),
                grid.len()
            )));
        }
        if amp.iter().any(|a| !a.re.is_finite() || !a.im.is_finite()) {
            return Err(Error::invalid("spectral amplitude has non-finite samples"));
        }
        let mut s = Self {
            grid,
            amp,
            symmetric: false,
            label: label.into(),
        };
        s.symmetric = s.symmetry_deviation() <= SYMMETRY_TOL * s.max_abs();
        Ok(s)
    }

    pub fn from_fn(
        grid: FrequencyGrid,
        label: impl Into<String>,
        f: impl Fn(f64) -> Complex64,
    ) -> Result<Self> {
        let amp = grid.values().iter().map(|&w| f(w)).collect();
        Self::new(grid, amp, label)
    }

    pub fn grid(&self) -> &FrequencyGrid {
        &self.grid
    }

    pub fn amp(&self) -> &[Complex64] {
        &self.amp
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn max_abs(&self) -> f64 {
        self.amp.iter().map(|a| a.norm()).fold(0.0, f64::max)
    }

    /// Largest |Λ(Ω) − Λ(−Ω)| over the grid.
    pub fn symmetry_deviation(&self) -> f64 {
        (0..self.grid.n_pos())
            .map(|k| (self.amp[k] - self.amp[self.grid.mirror(k)]).norm())
            .fold(0.0, f64::max)
    }

    pub fn require_symmetric(&self) -> Result<()> {
        if self.symmetric {
            Ok(())
        } else {
            Err(Error::NotSymmetric {
                deviation: self.symmetry_deviation(),
            })
        }
    }

    pub fn scaled(&self, factor: Complex64) -> Result<Self> {
        Self::new(
            self.grid.clone(),
            self.amp.iter().map(|a| a * factor).collect(),
            self.label.clone(),
        )
    }

    /// Pointwise `a·self + b·other`.
    pub fn combine(&self, a: Complex64, other: &Self, b: Complex64) -> Result<Self> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch);
        }
        let amp = self
            .amp
            .iter()
            .zip(&other.amp)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Self::new(self.grid.clone(), amp, self.label.clone())
    }

    /// Σ_k |Λ_k|² over all bins.
    pub fn power(&self) -> f64 {
        self.amp.iter().map(|a| a.norm_sqr()).sum()
    }
}

/// Double-Gaussian biphoton amplitude
///
/// ```text
/// Λ(Ω) ∝ exp(−(Ω−μ)²/2σ′²) + exp(−(Ω+μ)²/2σ′²)
/// ```
///
/// scaled so that the noiseless coincidence rate at τ = 0,
/// `|Σ_k Λ_k ΔΩ|²`, equals `b_hz`.
pub fn double_gaussian(
    b_hz: f64,
    mu: f64,
    sigma_p: f64,
    grid: &FrequencyGrid,
) -> Result<SpectralAmplitude> {
    if !(b_hz > 0.0) || !b_hz.is_finite() {
        return Err(Error::invalid(format!("B must be positive, got {b_hz}")));
    }
    if !(sigma_p > 0.0) || !sigma_p.is_finite() {
        return Err(Error::invalid(format!(
            "sigma_p must be positive, got {sigma_p}"
        )));
    }
    if !(mu >= 0.0) || !mu.is_finite() {
        return Err(Error::invalid(format!("mu must be non-negative, got {mu}")));
    }
    let shape = |w: f64| {
        let a = (w - mu) / sigma_p;
        let b = (w + mu) / sigma_p;
        (-0.5 * a * a).exp() + (-0.5 * b * b).exp()
    };
    let raw: Vec<f64> = grid.values().iter().map(|&w| shape(w)).collect();
    let dw = grid.bin_width();
    let coherent = pairwise_sum(&raw) * dw;
    if !(coherent > 0.0) {
        return Err(Error::ZeroAmplitude);
    }
    let scale = b_hz.sqrt() / coherent;
    let amp = raw.iter().map(|&r| Complex64::new(r * scale, 0.0)).collect();
    SpectralAmplitude::new(grid.clone(), amp, format!("double_gaussian(B={b_hz}, mu={mu}, sigma_p={sigma_p})"))
}

// Mirror-pair summation so that the sum used for normalization matches the
// order used by the signal routines.
fn pairwise_sum(raw: &[f64]) -> f64 {
    let n = raw.len();
    (0..n / 2).map(|j| raw[n / 2 + j] + raw[n / 2 - 1 - j]).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalAmplitude {
    pub tau: Vec<f64>,
    pub amp: Vec<Complex64>,
}

impl TemporalAmplitude {
    /// Σ|Λ̂(τ)|²·Δτ, assuming a uniform τ grid.
    pub fn energy(&self) -> f64 {
        if self.tau.len() < 2 {
            return 0.0;
        }
        let dt = (self.tau[self.tau.len() - 1] - self.tau[0]) / (self.tau.len() - 1) as f64;
        self.amp.iter().map(|a| a.norm_sqr()).sum::<f64>() * dt
    }
}

/// Riemann-sum transform `Λ̂(τ) = Σ_k Λ(Ω_k) e^{iΩ_kτ} ΔΩ`.
pub fn fourier_to_time(lambda: &SpectralAmplitude, tau: &[f64]) -> Result<TemporalAmplitude> {
    lambda.grid().validate()?;
    if tau.iter().any(|t| !t.is_finite()) {
        return Err(Error::invalid("tau grid has non-finite samples"));
    }
    let dw = lambda.grid().bin_width();
    let omegas = lambda.grid().values();
    let amp = tau
        .iter()
        .map(|&t| {
            omegas
                .iter()
                .zip(lambda.amp())
                .map(|(&w, &a)| a * Complex64::from_polar(1.0, w * t))
                .sum::<Complex64>()
                * dw
        })
        .collect();
    Ok(TemporalAmplitude {
        tau: tau.to_vec(),
        amp,
    })
}

/// Converts an angular-frequency width (rad/fs) to a wavelength width (nm)
/// around `lambda0_nm`: Δλ = λ₀²·Δω / (2πc).
pub fn width_to_wavelength(width: f64, lambda0_nm: f64) -> Result<f64> {
    if !(width >= 0.0) || !width.is_finite() {
        return Err(Error::invalid(format!("width must be non-negative, got {width}")));
    }
    if !(lambda0_nm > 0.0) || !lambda0_nm.is_finite() {
        return Err(Error::invalid(format!(
            "lambda0 must be positive, got {lambda0_nm}"
        )));
    }
    Ok(lambda0_nm * lambda0_nm * width / (2.0 * PI * SPEED_OF_LIGHT_NM_PER_FS))
}

/// Uniform τ samples from `min` to `max` inclusive.
pub fn tau_grid(min: f64, max: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::invalid(format!("tau step must be positive, got {step}")));
    }
    if !(max >= min) || !min.is_finite() || !max.is_finite() {
        return Err(Error::invalid(format!("empty tau range [{min}, {max}]")));
    }
    let n = ((max - min) / step + 1e-9).floor() as usize + 1;
    Ok((0..n).map(|i| min + i as f64 * step).collect())
}

//! Figure-level reductions: the σ = 0 fit, background estimation over the
//! far-τ window, peak decay and background curves versus σ, and the
//! bin-width calibration.
//!
//! Background subtraction uses the shape of the classically correlated
//! component rather than a flat level. Under the split measurement that
//! component is `C(τ) ∝ Σ_j p_j cos²(Ω_jτ)`, which rises to twice its far-τ
//! value at τ = 0. The shape is σ-independent and computed from Λ alone;
//! only its level is taken from the data window.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::correlation::{classical_signal, expected_signal, CorrelationTrace};
use crate::density::fraction_entangled;
use crate::error::{Error, Result};
use crate::montecarlo::{run_ensemble_observed, EnsembleConfig, LinearObservable};
use crate::spectral::{double_gaussian, make_grid, tau_grid, width_to_wavelength, SpectralAmplitude};

/// Reference wavelength for width conversions, nm.
pub const DEFAULT_LAMBDA0_NM: f64 = 1064.0;

/// Positive-bin count used with [`CALIBRATED_OMEGA_MAX`].
pub const CALIBRATED_N_POS: usize = 30;

/// Grid half-width at which the exact σ = 10 window background of the
/// default double Gaussian (B = 708.71 Hz, μ = 0.0275, σ′ = 0.022 rad/fs)
/// equals 26.93 Hz; output of [`calibrate_bin_width`].
pub const CALIBRATED_OMEGA_MAX: f64 = 0.146_994_394_856_596_32;

/// Target σ = 10 background for the calibration, Hz.
pub const CALIBRATION_TARGET_HZ: f64 = 26.93;

// ---------------------------------------------------------------------------
// Fitting

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub b_hz: f64,
    pub mu: f64,
    pub sigma_p: f64,
    pub residual_rms: f64,
    pub covariance: [[f64; 3]; 3],
    pub iterations: usize,
    pub n_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Only samples with |τ| ≤ this are fitted, fs.
    pub max_abs_tau: f64,
    pub min_points: usize,
    pub max_iterations: usize,
    /// Largest accepted residual_rms / B.
    pub max_relative_residual: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_abs_tau: 150.0,
            min_points: 100,
            max_iterations: 500,
            max_relative_residual: 0.1,
        }
    }
}

fn model_and_jacobian(p: &Vector3<f64>, t: f64) -> (f64, Vector3<f64>) {
    let (b, mu, s) = (p[0], p[1], p[2]);
    let env = (-0.5 * s * s * t * t).exp();
    let (sin, cos) = (mu * t).sin_cos();
    let f = b * cos * env;
    (f, Vector3::new(cos * env, -b * t * sin * env, -f * s * t * t))
}

fn ssr(p: &Vector3<f64>, tau: &[f64], y: &[f64]) -> f64 {
    tau.iter()
        .zip(y)
        .map(|(&t, &v)| {
            let r = v - model_and_jacobian(p, t).0;
            r * r
        })
        .sum()
}

/// Deterministic starting point, taken from the trace symmetrized about
/// τ = 0 and smoothed over a few samples: B from the maximum, μ from the
/// first zero crossing (or first pronounced minimum) of the smoothed
/// trace, σ′ from the log-slope of the envelope before that point.
fn initial_guess(tau: &[f64], y: &[f64]) -> std::result::Result<Vector3<f64>, String> {
    // symmetrized half trace on τ ≥ 0
    let mut half_t = Vec::new();
    let mut half_y = Vec::new();
    for (i, &t) in tau.iter().enumerate() {
        if t < -1e-9 {
            continue;
        }
        let mirror = tau
            .binary_search_by(|x| x.total_cmp(&-t))
            .ok()
            .or_else(|| tau.iter().position(|x| (x + t).abs() < 1e-9));
        half_t.push(t);
        half_y.push(match mirror {
            Some(j) => 0.5 * (y[i] + y[j]),
            None => y[i],
        });
    }
    if half_t.len() < 3 {
        return Err("too few samples at τ ≥ 0".into());
    }
    const HALF_WIDTH: usize = 3;
    let n = half_y.len();
    let smooth: Vec<f64> = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(HALF_WIDTH);
            let hi = (i + HALF_WIDTH + 1).min(n);
            half_y[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect();
    let (imax, &b_smooth) = smooth
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .ok_or("no samples")?;
    if !(b_smooth > 0.0) {
        return Err("no positive correlation peak".into());
    }
    let mut t_zero = None;
    for i in imax + 1..n {
        if smooth[i] <= 0.0 {
            let (t0, t1, y0, y1) = (half_t[i - 1], half_t[i], smooth[i - 1], smooth[i]);
            t_zero = Some(if y0 == y1 { t1 } else { t0 + (t1 - t0) * y0 / (y0 - y1) });
            break;
        }
        if i + 1 < n && smooth[i] < smooth[i - 1] && smooth[i] <= smooth[i + 1] && smooth[i] < 0.5 * b_smooth {
            t_zero = Some(half_t[i]);
            break;
        }
    }
    let t_zero = t_zero.ok_or("no zero crossing or minimum after the peak")?;
    if !(t_zero > 0.0) {
        return Err("peak is not centred near τ = 0".into());
    }
    let b0 = half_y[..=imax.min(n - 1)].iter().cloned().fold(b_smooth, f64::max);
    let mu0 = std::f64::consts::PI / (2.0 * t_zero);
    let (mut num, mut den) = (0.0, 0.0);
    for (&t, &v) in half_t.iter().zip(&smooth) {
        if t > 0.0 && t < 0.8 * t_zero && v > 0.0 {
            let e = v / (b0 * (mu0 * t).cos());
            if e > 0.0 {
                num += t * t * e.ln();
                den += t.powi(4);
            }
        }
    }
    let s2 = if den > 0.0 { -2.0 * num / den } else { 0.0 };
    let s0 = if s2 > 0.0 { s2.sqrt() } else { 1.0 / t_zero };
    Ok(Vector3::new(b0, mu0, s0))
}

/// Levenberg–Marquardt fit of `B·cos(μτ)·exp(−σ′²τ²/2)` to the signed trace.
pub fn fit_sigma0(trace: &CorrelationTrace) -> Result<FitResult> {
    fit_sigma0_with(trace, &FitOptions::default())
}

pub fn fit_sigma0_with(trace: &CorrelationTrace, opts: &FitOptions) -> Result<FitResult> {
    trace.validate()?;
    let fail = |iterations, residual_rms, reason: &str| Error::FitFailed {
        iterations,
        residual_rms,
        reason: reason.into(),
    };
    let lo = trace.tau[0];
    let hi = trace.tau[trace.len() - 1];
    if lo > -opts.max_abs_tau + 1e-9 || hi < opts.max_abs_tau - 1e-9 {
        return Err(Error::invalid(format!(
            "trace spans [{lo}, {hi}] fs but the fit needs |τ| ≤ {}",
            opts.max_abs_tau
        )));
    }
    let (tau, y): (Vec<f64>, Vec<f64>) = trace
        .tau
        .iter()
        .zip(&trace.value)
        .filter(|(t, _)| t.abs() <= opts.max_abs_tau + 1e-9)
        .map(|(&t, &v)| (t, v))
        .unzip();
    if tau.len() < opts.min_points {
        return Err(Error::invalid(format!(
            "fit needs at least {} samples in |τ| ≤ {}, got {}",
            opts.min_points,
            opts.max_abs_tau,
            tau.len()
        )));
    }
    let rms = |s: f64| (s / tau.len() as f64).sqrt();

    let mut p = initial_guess(&tau, &y).map_err(|r| fail(0, rms(y.iter().map(|v| v * v).sum()), &r))?;
    let mut cost = ssr(&p, &tau, &y);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        iterations += 1;
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for (&t, &v) in tau.iter().zip(&y) {
            let (f, j) = model_and_jacobian(&p, t);
            jtj += j * j.transpose();
            jtr += j * (v - f);
        }
        let mut stepped = false;
        while lambda < 1e16 {
            let mut a = jtj;
            for k in 0..3 {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-300);
            }
            let Some(delta) = a.lu().solve(&jtr) else {
                lambda *= 10.0;
                continue;
            };
            let trial = p + delta;
            let trial_cost = ssr(&trial, &tau, &y);
            if trial_cost.is_finite() && trial_cost <= cost {
                let small_step = (0..3).all(|k| delta[k].abs() <= 1e-12 * p[k].abs().max(1e-300));
                let small_gain = cost - trial_cost <= 1e-15 * cost.max(1e-300);
                p = trial;
                cost = trial_cost;
                lambda = (lambda * 0.1).max(1e-12);
                stepped = true;
                if small_step || small_gain {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        // damping exhausted: no downhill step left, i.e. a minimum
        if !stepped || converged {
            converged = true;
            break;
        }
    }
    let residual_rms = rms(cost);
    if !converged {
        return Err(fail(iterations, residual_rms, "iteration limit reached"));
    }
    p[2] = p[2].abs();
    if !(p[0] > 0.0) || !(p[2] > 0.0) || !p.iter().all(|v| v.is_finite()) {
        return Err(fail(iterations, residual_rms, "parameters left the valid region"));
    }
    if residual_rms > opts.max_relative_residual * p[0] {
        return Err(fail(
            iterations,
            residual_rms,
            "model does not describe the trace (no correlation peak)",
        ));
    }
    let mut jtj = Matrix3::zeros();
    for &t in &tau {
        let (_, j) = model_and_jacobian(&p, t);
        jtj += j * j.transpose();
    }
    let dof = (tau.len() - 3).max(1) as f64;
    let cov = jtj
        .try_inverse()
        .map(|m| m * (cost / dof))
        .unwrap_or_else(|| Matrix3::from_element(f64::NAN));
    let mut covariance = [[0.0; 3]; 3];
    for (i, row) in covariance.iter_mut().enumerate() {
        for (j, c) in row.iter_mut().enumerate() {
            *c = cov[(i, j)];
        }
    }
    Ok(FitResult {
        b_hz: p[0],
        mu: p[1].abs(),
        sigma_p: p[2],
        residual_rms,
        covariance,
        iterations,
        n_points: tau.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralWidth {
    pub rad_per_fs: f64,
    pub nm: f64,
    pub lambda0_nm: f64,
}

/// √(σ′² + μ²) and its wavelength equivalent at `lambda0_nm`.
pub fn spectral_width(mu: f64, sigma_p: f64, lambda0_nm: f64) -> Result<SpectralWidth> {
    let w = sigma_p.hypot(mu);
    Ok(SpectralWidth {
        rad_per_fs: w,
        nm: width_to_wavelength(w, lambda0_nm)?,
        lambda0_nm,
    })
}

pub fn fit_width(fit: &FitResult, lambda0_nm: f64) -> Result<SpectralWidth> {
    spectral_width(fit.mu, fit.sigma_p, lambda0_nm)
}

// ---------------------------------------------------------------------------
// Background

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundWindow {
    /// Closed τ intervals in fs.
    pub intervals: Vec<(f64, f64)>,
}

impl Default for BackgroundWindow {
    fn default() -> Self {
        Self {
            intervals: vec![(-200.0, -180.0), (180.0, 200.0)],
        }
    }
}

impl BackgroundWindow {
    pub fn validate(&self) -> Result<()> {
        if self.intervals.is_empty() {
            return Err(Error::invalid("background window has no intervals"));
        }
        for &(lo, hi) in &self.intervals {
            if !(hi >= lo) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::invalid(format!("bad background interval [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, tau: f64) -> bool {
        self.intervals
            .iter()
            .any(|&(lo, hi)| tau >= lo - 1e-9 && tau <= hi + 1e-9)
    }

    /// Indices of the τ samples inside the window. Every interval must be
    /// spanned by the grid and hold at least one sample.
    pub fn indices(&self, tau: &[f64]) -> Result<Vec<usize>> {
        self.validate()?;
        let (first, last) = match (tau.first(), tau.last()) {
            (Some(&a), Some(&b)) => (a, b),
            _ => return Err(Error::Empty("tau grid".into())),
        };
        for &(lo, hi) in &self.intervals {
            let inside = tau.iter().any(|&t| t >= lo - 1e-9 && t <= hi + 1e-9);
            if first > lo + 1e-9 || last < hi - 1e-9 || !inside {
                return Err(Error::WindowNotCovered { lo, hi });
            }
        }
        Ok((0..tau.len()).filter(|&i| self.contains(tau[i])).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub window: BackgroundWindow,
}

/// Window mean with the default window.
pub fn estimate_background(trace: &CorrelationTrace) -> Result<BackgroundEstimate> {
    estimate_background_in(trace, &BackgroundWindow::default())
}

/// Mean over the window samples. The standard error is the scatter-based
/// standard error of the mean when the trace carries no per-sample errors;
/// otherwise the mean per-sample error, which bounds the error of the mean
/// for arbitrarily correlated samples. Ensemble runs obtain the exact
/// value through [`sweep`].
pub fn estimate_background_in(
    trace: &CorrelationTrace,
    window: &BackgroundWindow,
) -> Result<BackgroundEstimate> {
    let idx = window.indices(&trace.tau)?;
    let n = idx.len() as f64;
    let mean = idx.iter().map(|&i| trace.value[i]).sum::<f64>() / n;
    let stderr = if idx.iter().any(|&i| trace.stderr[i] > 0.0) {
        idx.iter().map(|&i| trace.stderr[i]).sum::<f64>() / n
    } else if idx.len() > 1 {
        let var = idx
            .iter()
            .map(|&i| (trace.value[i] - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(BackgroundEstimate {
        mean,
        stderr,
        window: window.clone(),
    })
}

/// Classical-component shape on `tau`, normalized to unit mean over the
/// window.
pub fn background_shape(
    lambda: &SpectralAmplitude,
    tau: &[f64],
    window: &BackgroundWindow,
) -> Result<Vec<f64>> {
    let idx = window.indices(tau)?;
    let c: Vec<f64> = tau.iter().map(|&t| classical_signal(lambda, t)).collect();
    let level = idx.iter().map(|&i| c[i]).sum::<f64>() / idx.len() as f64;
    if !(level > 0.0) {
        return Err(Error::ZeroAmplitude);
    }
    Ok(c.into_iter().map(|v| v / level).collect())
}

/// `S(τ) − level·shape(τ)`; stderr unchanged.
pub fn subtract_background(
    trace: &CorrelationTrace,
    level: f64,
    shape: &[f64],
) -> Result<CorrelationTrace> {
    if shape.len() != trace.len() {
        return Err(Error::ShapeMismatch("background shape length".into()));
    }
    let mut out = trace.clone();
    for (v, k) in out.value.iter_mut().zip(shape) {
        *v -= level * k;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// σ sweeps

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub tau: Vec<f64>,
    pub window: BackgroundWindow,
    pub workers: Option<usize>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            tau: tau_grid(-250.0, 250.0, 1.0).expect("static grid"),
            window: BackgroundWindow::default(),
            workers: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub sigma: f64,
    pub fraction_entangled: f64,
    pub background: f64,
    pub background_stderr: f64,
    /// Shape-subtracted peak at τ = 0 over the σ = 0 value.
    pub peak_ratio: f64,
    pub peak_ratio_stderr: f64,
    /// Same ratio with a flat (window-mean) background subtraction.
    pub flat_peak_ratio: f64,
}

struct PeakObservables {
    background: LinearObservable,
    peak: LinearObservable,
    flat_peak: LinearObservable,
}

fn peak_observables(tau: &[f64], window: &BackgroundWindow, shape: &[f64]) -> Result<PeakObservables> {
    let idx = window.indices(tau)?;
    let zero = tau
        .iter()
        .position(|t| t.abs() < 1e-9)
        .ok_or_else(|| Error::invalid("tau grid must contain τ = 0 for peak extraction"))?;
    let w = 1.0 / idx.len() as f64;
    let background = LinearObservable {
        name: "background".into(),
        terms: idx.iter().map(|&i| (i, w)).collect(),
    };
    let with_level = |k: f64, name: &str| {
        let mut terms = vec![(zero, 1.0)];
        terms.extend(idx.iter().map(|&i| (i, -k * w)));
        LinearObservable {
            name: name.into(),
            terms,
        }
    };
    Ok(PeakObservables {
        background,
        peak: with_level(shape[zero], "peak"),
        flat_peak: with_level(1.0, "flat_peak"),
    })
}

/// Runs one ensemble per σ and reduces each to background and peak values.
/// All σ share `master_seed`.
pub fn sweep(
    lambda: &SpectralAmplitude,
    sigmas: &[f64],
    n_realizations: usize,
    master_seed: u64,
    opts: &SweepOptions,
) -> Result<Vec<SweepPoint>> {
    if sigmas.is_empty() {
        return Err(Error::Empty("sigma list".into()));
    }
    let shape = background_shape(lambda, &opts.tau, &opts.window)?;
    let obs = peak_observables(&opts.tau, &opts.window, &shape)?;
    let list = [obs.background.clone(), obs.peak.clone(), obs.flat_peak.clone()];

    let reference = |n| {
        let cfg = EnsembleConfig {
            n_realizations: n,
            sigma: 0.0,
            master_seed,
            ..EnsembleConfig::default()
        };
        run_ensemble_observed(lambda, &cfg, &opts.tau, opts.workers, &list)
    };
    let (_, _, r0) = reference(1)?;
    let (peak0, flat0) = (r0[1].mean, r0[2].mean);
    if !(peak0 > 0.0) {
        return Err(Error::invalid("σ = 0 peak is not above the background"));
    }

    sigmas
        .iter()
        .map(|&sigma| {
            let cfg = EnsembleConfig {
                n_realizations,
                sigma,
                master_seed,
                ..EnsembleConfig::default()
            };
            let (_, _, est) = run_ensemble_observed(lambda, &cfg, &opts.tau, opts.workers, &list)?;
            Ok(SweepPoint {
                sigma,
                fraction_entangled: fraction_entangled(sigma)?,
                background: est[0].mean,
                background_stderr: est[0].stderr,
                peak_ratio: est[1].mean / peak0,
                peak_ratio_stderr: est[1].stderr / peak0,
                flat_peak_ratio: est[2].mean / flat0,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub sigma: f64,
    pub value: f64,
    pub stderr: f64,
}

/// Writes `sigma,value,stderr` rows.
pub fn write_curve_csv<W: std::io::Write>(points: &[CurvePoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sigma", "value", "stderr"])?;
    for p in points {
        w.write_record([p.sigma.to_string(), p.value.to_string(), p.stderr.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// (σ, shape-subtracted peak ratio) with Monte-Carlo standard errors.
pub fn peak_decay_curve(
    lambda: &SpectralAmplitude,
    sigmas: &[f64],
    n_realizations: usize,
    master_seed: u64,
    opts: &SweepOptions,
) -> Result<Vec<CurvePoint>> {
    Ok(sweep(lambda, sigmas, n_realizations, master_seed, opts)?
        .into_iter()
        .map(|p| CurvePoint {
            sigma: p.sigma,
            value: p.peak_ratio,
            stderr: p.peak_ratio_stderr,
        })
        .collect())
}

/// (σ, window background) with Monte-Carlo standard errors.
pub fn background_vs_sigma(
    lambda: &SpectralAmplitude,
    sigmas: &[f64],
    n_realizations: usize,
    master_seed: u64,
    opts: &SweepOptions,
) -> Result<Vec<CurvePoint>> {
    Ok(sweep(lambda, sigmas, n_realizations, master_seed, opts)?
        .into_iter()
        .map(|p| CurvePoint {
            sigma: p.sigma,
            value: p.background,
            stderr: p.background_stderr,
        })
        .collect())
}

/// Exact (N → ∞) window background at σ.
pub fn expected_background(
    lambda: &SpectralAmplitude,
    sigma: f64,
    tau: &[f64],
    window: &BackgroundWindow,
) -> Result<f64> {
    let idx = window.indices(tau)?;
    let mut sum = 0.0;
    for &i in &idx {
        sum += expected_signal(lambda, sigma, tau[i])?;
    }
    Ok(sum / idx.len() as f64)
}

/// First σ at which a decreasing curve crosses `level`, by linear
/// interpolation between samples.
pub fn crossing(points: &[(f64, f64)], level: f64) -> Option<f64> {
    points.windows(2).find_map(|w| {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if (y0 - level) * (y1 - level) <= 0.0 && y0 != y1 {
            Some(x0 + (x1 - x0) * (y0 - level) / (y0 - y1))
        } else {
            None
        }
    })
}

// ---------------------------------------------------------------------------
// Peak-shape constancy

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeCheck {
    pub tau: f64,
    /// Shape-subtracted signal minus the σ = 0 shape scaled by the
    /// shape-subtracted peak; zero in expectation when the shape is constant.
    pub deviation: f64,
    pub stderr: f64,
}

/// Per-τ deviation of the background-subtracted, peak-normalized trace at σ
/// from the σ = 0 trace, expressed (un-normalized) as a linear observable so
/// its Monte-Carlo standard error is exact.
pub fn peak_shape_deviation(
    lambda: &SpectralAmplitude,
    sigma: f64,
    n_realizations: usize,
    master_seed: u64,
    max_abs_tau: f64,
    opts: &SweepOptions,
) -> Result<Vec<ShapeCheck>> {
    let tau = &opts.tau;
    let shape = background_shape(lambda, tau, &opts.window)?;
    let idx = opts.window.indices(tau)?;
    let zero = tau
        .iter()
        .position(|t| t.abs() < 1e-9)
        .ok_or_else(|| Error::invalid("tau grid must contain τ = 0"))?;
    let w = 1.0 / idx.len() as f64;

    // σ = 0 reference shape, noiseless
    let reference: Vec<f64> = tau
        .iter()
        .map(|&t| expected_signal(lambda, 0.0, t))
        .collect::<Result<_>>()?;
    let bg0 = idx.iter().map(|&i| reference[i]).sum::<f64>() * w;
    let sub0: Vec<f64> = reference.iter().zip(&shape).map(|(v, k)| v - bg0 * k).collect();
    let norm0: Vec<f64> = sub0.iter().map(|v| v / sub0[zero]).collect();

    let selected: Vec<usize> = (0..tau.len())
        .filter(|&i| tau[i].abs() <= max_abs_tau + 1e-9)
        .collect();
    let observables: Vec<LinearObservable> = selected
        .iter()
        .map(|&i| {
            // [S(τ) − k(τ)·bg] − n0(τ)·[S(0) − k(0)·bg]
            let mut terms = vec![(i, 1.0), (zero, -norm0[i])];
            let coef = -(shape[i] - norm0[i] * shape[zero]) * w;
            terms.extend(idx.iter().map(|&j| (j, coef)));
            LinearObservable {
                name: format!("shape@{}", tau[i]),
                terms,
            }
        })
        .collect();
    let cfg = EnsembleConfig {
        n_realizations,
        sigma,
        master_seed,
        ..EnsembleConfig::default()
    };
    let (_, _, est) = run_ensemble_observed(lambda, &cfg, tau, opts.workers, &observables)?;
    Ok(selected
        .iter()
        .zip(est)
        .map(|(&i, e)| ShapeCheck {
            tau: tau[i],
            deviation: e.mean,
            stderr: e.stderr,
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Calibration

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub n_pos: usize,
    pub omega_max: f64,
    pub bin_width: f64,
    pub background_hz: f64,
}

/// Finds `omega_max` (at fixed `n_pos`) such that the exact σ-ensemble
/// background of the double-Gaussian spectrum equals `target_hz`. The
/// background grows ∝ ΔΩ, so bisection over `bracket` suffices.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_bin_width(
    b_hz: f64,
    mu: f64,
    sigma_p: f64,
    n_pos: usize,
    sigma: f64,
    target_hz: f64,
    bracket: (f64, f64),
    tau: &[f64],
    window: &BackgroundWindow,
) -> Result<Calibration> {
    let eval = |omega_max: f64| -> Result<f64> {
        let g = make_grid(n_pos, omega_max)?;
        let l = double_gaussian(b_hz, mu, sigma_p, &g)?;
        Ok(expected_background(&l, sigma, tau, window)? - target_hz)
    };
    let (mut lo, mut hi) = bracket;
    let (mut flo, fhi) = (eval(lo)?, eval(hi)?);
    if flo * fhi > 0.0 {
        return Err(Error::invalid(format!(
            "calibration bracket [{lo}, {hi}] does not enclose the target"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fm = eval(mid)?;
        if (fm < 0.0) == (flo < 0.0) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    let omega_max = 0.5 * (lo + hi);
    Ok(Calibration {
        n_pos,
        omega_max,
        bin_width: omega_max / n_pos as f64,
        background_hz: eval(omega_max)? + target_hz,
    })
}

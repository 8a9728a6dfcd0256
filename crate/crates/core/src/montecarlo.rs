//! Deterministic ensemble averaging over random dephasing masks.
//!
//! Realization `j` draws its phases from `derive_seed(master_seed, j)`, so
//! the phases never depend on which worker computes them. Realizations are
//! grouped in fixed chunks of [`CHUNK`] indices; each chunk is accumulated
//! sequentially (Welford) and the chunk partials are merged in a fixed
//! pairwise tree keyed by chunk index. The result is bit-identical for any
//! worker count.

use std::time::{Duration, Instant};

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correlation::{CorrelationTrace, TraceKind, TraceMeta};
use crate::error::{Error, Result};
use crate::shaper::{check_sigma, fill_phases};
use crate::spectral::SpectralAmplitude;

pub const CHUNK: usize = 64;
pub const DEFAULT_REALIZATIONS: usize = 10_000;
pub const DEFAULT_MASTER_SEED: u64 = 0x5EED_2018;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub n_realizations: usize,
    /// Standard deviation of the per-bin phases, rad.
    pub sigma: f64,
    pub master_seed: u64,
    /// Integration time per point for Poisson synthesis, s.
    pub acquisition_time: f64,
    /// Constant dark-count rate, Hz.
    pub dark_rate: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            n_realizations: DEFAULT_REALIZATIONS,
            sigma: 0.0,
            master_seed: DEFAULT_MASTER_SEED,
            acquisition_time: 1.0,
            dark_rate: 0.0,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_realizations == 0 {
            return Err(Error::invalid("n_realizations must be >= 1"));
        }
        check_sigma(self.sigma)?;
        if !(self.acquisition_time > 0.0) || !self.acquisition_time.is_finite() {
            return Err(Error::invalid(format!(
                "acquisition_time must be positive, got {}",
                self.acquisition_time
            )));
        }
        if !(self.dark_rate >= 0.0) || !self.dark_rate.is_finite() {
            return Err(Error::invalid(format!(
                "dark_rate must be non-negative, got {}",
                self.dark_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub mean: Vec<f64>,
    /// Sample standard deviation over realizations divided by √n.
    pub stderr: Vec<f64>,
    pub n_effective: usize,
    #[serde(skip)]
    pub wall_time: Duration,
}

/// A linear functional Σ w_i·S(τ_i) of one realization's trace. Its
/// ensemble mean and standard error are accumulated exactly, per
/// realization, alongside the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearObservable {
    pub name: String,
    /// (index into the τ grid, weight)
    pub terms: Vec<(usize, f64)>,
}

impl LinearObservable {
    pub fn evaluate(&self, trace: &[f64]) -> f64 {
        self.terms.iter().map(|&(i, w)| w * trace[i]).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservableEstimate {
    pub mean: f64,
    pub stderr: f64,
}

/// SplitMix64 finalizer applied to `master + (j+1)·γ`, γ the 64-bit golden
/// ratio increment. A bijection in `master` for fixed `j`.
pub fn derive_seed(master: u64, j: u64) -> u64 {
    let mut z = master.wrapping_add(j.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-τ running mean and sum of squared deviations.
#[derive(Debug, Clone)]
struct Accumulator {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Accumulator {
    fn new(len: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    fn merge(a: Self, b: Self) -> Self {
        if a.n == 0 {
            return b;
        }
        if b.n == 0 {
            return a;
        }
        let n = a.n + b.n;
        let (na, nb, nf) = (a.n as f64, b.n as f64, n as f64);
        let mut mean = a.mean;
        let mut m2 = a.m2;
        for i in 0..mean.len() {
            let d = b.mean[i] - mean[i];
            mean[i] += d * nb / nf;
            m2[i] += b.m2[i] + d * d * na * nb / nf;
        }
        Self { n, mean, m2 }
    }

    fn stderr(&self) -> Vec<f64> {
        if self.n < 2 {
            return vec![0.0; self.mean.len()];
        }
        let n = self.n as f64;
        self.m2
            .iter()
            .map(|&s| (s.max(0.0) / (n - 1.0)).sqrt() / n.sqrt())
            .collect()
    }
}

fn pairwise_merge(mut parts: Vec<Accumulator>) -> Accumulator {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(a) = it.next() {
            next.push(match it.next() {
                Some(b) => Accumulator::merge(a, b),
                None => a,
            });
        }
        parts = next;
    }
    parts.pop().expect("at least one chunk")
}

/// Precomputed tables for evaluating the split signal of many realizations
/// on a fixed τ grid.
pub struct SignalKernel {
    /// (Λ₊ + Λ₋)·ΔΩ per positive bin.
    full: Vec<Complex64>,
    /// Λ₊·ΔΩ per positive bin.
    half: Vec<Complex64>,
    /// e^{iΩ_jτ_t}, row-major by τ.
    phasors: Vec<Complex64>,
    /// sin(Ω_jτ_t), row-major by τ.
    sines: Vec<f64>,
    n_pos: usize,
    n_tau: usize,
}

impl SignalKernel {
    pub fn new(lambda: &SpectralAmplitude, tau: &[f64]) -> Result<Self> {
        lambda.require_symmetric()?;
        if tau.is_empty() {
            return Err(Error::Empty("tau grid".into()));
        }
        let g = lambda.grid();
        let n = g.n_pos();
        let a = lambda.amp();
        let dw = g.bin_width();
        let w = g.positive_values();
        let full = (0..n).map(|j| (a[n + j] + a[n - 1 - j]) * dw).collect();
        let half = (0..n).map(|j| a[n + j] * dw).collect();
        let mut phasors = Vec::with_capacity(n * tau.len());
        let mut sines = Vec::with_capacity(n * tau.len());
        for &t in tau {
            for &wj in w {
                phasors.push(Complex64::from_polar(1.0, wj * t));
                sines.push((wj * t).sin());
            }
        }
        Ok(Self {
            full,
            half,
            phasors,
            sines,
            n_pos: n,
            n_tau: tau.len(),
        })
    }

    /// Split signal S_a − 4·S_b,raw at every τ for one set of pair phases.
    pub fn evaluate(&self, phases: &[f64], out: &mut [f64]) {
        let n = self.n_pos;
        let mut fa = Vec::with_capacity(n);
        let mut hb = Vec::with_capacity(n);
        for (j, &phi) in phases.iter().enumerate().take(n) {
            let p = Complex64::from_polar(1.0, phi);
            fa.push(self.full[j] * p);
            hb.push(self.half[j] * p);
        }
        for (t, o) in out.iter_mut().enumerate().take(self.n_tau) {
            let row = &self.phasors[t * n..(t + 1) * n];
            let srow = &self.sines[t * n..(t + 1) * n];
            let mut sa = Complex64::new(0.0, 0.0);
            let mut sb = Complex64::new(0.0, 0.0);
            for j in 0..n {
                sa += fa[j] * row[j];
                sb += hb[j] * srow[j];
            }
            *o = sa.norm_sqr() - 4.0 * sb.norm_sqr();
        }
    }
}

/// Split-signal trace of realization `j` alone.
pub fn realization_signal(
    lambda: &SpectralAmplitude,
    sigma: f64,
    master_seed: u64,
    j: u64,
    tau: &[f64],
) -> Result<Vec<f64>> {
    let kernel = SignalKernel::new(lambda, tau)?;
    let mut phases = vec![0.0; lambda.grid().n_pos()];
    fill_phases(sigma, derive_seed(master_seed, j), &mut phases)?;
    let mut out = vec![0.0; tau.len()];
    kernel.evaluate(&phases, &mut out);
    Ok(out)
}

fn run_chunk(
    kernel: &SignalKernel,
    sigma: f64,
    master_seed: u64,
    observables: &[LinearObservable],
    range: std::ops::Range<usize>,
) -> Result<Accumulator> {
    let t = kernel.n_tau;
    let mut acc = Accumulator::new(t + observables.len());
    let mut phases = vec![0.0; kernel.n_pos];
    let mut buf = vec![0.0; t + observables.len()];
    for j in range {
        fill_phases(sigma, derive_seed(master_seed, j as u64), &mut phases)?;
        kernel.evaluate(&phases, &mut buf[..t]);
        if buf[..t].iter().any(|v| !v.is_finite()) {
            return Err(Error::Worker(format!("realization {j} produced non-finite signal")));
        }
        for (k, obs) in observables.iter().enumerate() {
            buf[t + k] = obs.evaluate(&buf[..t]);
        }
        acc.push(&buf);
    }
    Ok(acc)
}

/// Equal-weight ensemble average of the split signal. `workers = None` uses
/// the global rayon pool; `Some(k)` runs on a dedicated pool of `k` threads.
pub fn run_ensemble(
    lambda: &SpectralAmplitude,
    config: &EnsembleConfig,
    tau: &[f64],
    workers: Option<usize>,
) -> Result<(CorrelationTrace, RunStats)> {
    let (trace, stats, _) = run_ensemble_observed(lambda, config, tau, workers, &[])?;
    Ok((trace, stats))
}

/// [`run_ensemble`] that also accumulates linear observables of each
/// realization's trace.
pub fn run_ensemble_observed(
    lambda: &SpectralAmplitude,
    config: &EnsembleConfig,
    tau: &[f64],
    workers: Option<usize>,
    observables: &[LinearObservable],
) -> Result<(CorrelationTrace, RunStats, Vec<ObservableEstimate>)> {
    config.validate()?;
    if let Some(bad) = observables
        .iter()
        .find(|o| o.terms.iter().any(|&(i, _)| i >= tau.len()))
    {
        return Err(Error::invalid(format!(
            "observable {} references a τ index outside the grid",
            bad.name
        )));
    }
    let start = Instant::now();
    let kernel = SignalKernel::new(lambda, tau)?;
    let n = config.n_realizations;
    let chunks: Vec<_> = (0..n.div_ceil(CHUNK))
        .map(|c| c * CHUNK..((c + 1) * CHUNK).min(n))
        .collect();
    let compute = || -> Result<Vec<Accumulator>> {
        chunks
            .par_iter()
            .map(|r| run_chunk(&kernel, config.sigma, config.master_seed, observables, r.clone()))
            .collect()
    };
    let parts = match workers {
        None => compute()?,
        Some(0) => return Err(Error::invalid("worker count must be >= 1")),
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| Error::Worker(e.to_string()))?
            .install(compute)?,
    };
    let mut acc = pairwise_merge(parts);
    let mut stderr = acc.stderr();
    let t = tau.len();
    let estimates = acc.mean[t..]
        .iter()
        .zip(&stderr[t..])
        .map(|(&mean, &stderr)| ObservableEstimate { mean, stderr })
        .collect();
    acc.mean.truncate(t);
    stderr.truncate(t);
    let stats = RunStats {
        mean: acc.mean.clone(),
        stderr: stderr.clone(),
        n_effective: acc.n,
        wall_time: start.elapsed(),
    };
    let trace = CorrelationTrace {
        tau: tau.to_vec(),
        value: acc.mean,
        stderr,
        meta: TraceMeta {
            sigma: config.sigma,
            n_realizations: n,
            seed: config.master_seed,
            kind: TraceKind::Split,
            acquisition_time_s: None,
            dark_rate_hz: None,
            clipped: false,
        },
    };
    trace.validate()?;
    Ok((trace, stats, estimates))
}

/// Emulates a dark-count-subtracted counting measurement: each point is
/// replaced by `counts/T − dark_rate` with `counts ~ Poisson((rate + dark)·T)`
/// and `stderr = √counts / T`. Negative expected rates are clipped to zero
/// and flagged in the metadata.
pub fn poissonize(
    trace: &CorrelationTrace,
    acquisition_time: f64,
    dark_rate: f64,
    seed: u64,
) -> Result<CorrelationTrace> {
    if !(acquisition_time > 0.0) || !acquisition_time.is_finite() {
        return Err(Error::invalid(format!(
            "acquisition_time must be positive, got {acquisition_time}"
        )));
    }
    if !(dark_rate >= 0.0) || !dark_rate.is_finite() {
        return Err(Error::invalid(format!(
            "dark_rate must be non-negative, got {dark_rate}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clipped = trace.meta.clipped;
    let mut value = Vec::with_capacity(trace.len());
    let mut stderr = Vec::with_capacity(trace.len());
    for &v in &trace.value {
        let mut rate = v + dark_rate;
        if rate < 0.0 {
            rate = 0.0;
            clipped = true;
        }
        let expected = rate * acquisition_time;
        let counts = if expected > 0.0 {
            Poisson::new(expected)
                .map_err(|e| Error::invalid(format!("poisson mean {expected}: {e}")))?
                .sample(&mut rng)
        } else {
            0.0
        };
        value.push(counts / acquisition_time - dark_rate);
        stderr.push(counts.sqrt() / acquisition_time);
    }
    Ok(CorrelationTrace {
        tau: trace.tau.clone(),
        value,
        stderr,
        meta: TraceMeta {
            kind: TraceKind::MeasuredSim,
            acquisition_time_s: Some(acquisition_time),
            dark_rate_hz: Some(dark_rate),
            clipped,
            ..trace.meta.clone()
        },
    })
}

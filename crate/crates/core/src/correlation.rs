//! Coincidence signals: the direct G²(τ), its decomposition into the two
//! measurable mask settings, single-realization signals and traces.
//!
//! For a mask M the detected rate is the squared full-band amplitude
//!
//! ```text
//! S[M] = |Σ_{all k} Λ(Ω_k) · M(Ω_k)M(−Ω_k) · ΔΩ|²
//! ```
//!
//! For symmetric Λ, G²(τ) is recovered from two mask settings as
//! `S[M_a(τ)] − 4·|Σ_{Ω_k>0} Λ(Ω_k) sin(Ω_kτ) ΔΩ|²`; the second term is the
//! half-band amplitude of the M_b setting. This holds bin-exactly on the
//! discrete grid when Λ is real up to a global phase.

use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::montecarlo::{self, EnsembleConfig, RunStats};
use crate::shaper::{compose, ma_mask, mb_mask, pair_profile, TransferFunction};
use crate::spectral::SpectralAmplitude;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceKind {
    Direct,
    Split,
    MeasuredSim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub sigma: f64,
    pub n_realizations: usize,
    pub seed: u64,
    pub kind: TraceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acquisition_time_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dark_rate_hz: Option<f64>,
    /// Set when poissonization met a negative expected rate and clipped it.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub clipped: bool,
}

impl TraceMeta {
    pub fn noiseless(kind: TraceKind) -> Self {
        Self {
            sigma: 0.0,
            n_realizations: 1,
            seed: 0,
            kind,
            acquisition_time_s: None,
            dark_rate_hz: None,
            clipped: false,
        }
    }
}

/// Sampled S(τ) in Hz with a per-sample standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTrace {
    pub tau: Vec<f64>,
    pub value: Vec<f64>,
    pub stderr: Vec<f64>,
    pub meta: TraceMeta,
}

#[derive(Debug, Serialize)]
struct Sidecar<'a> {
    meta: &'a TraceMeta,
    #[serde(skip_serializing_if = "Option::is_none")]
    run_stats: Option<&'a RunStats>,
}

impl CorrelationTrace {
    pub fn validate(&self) -> Result<()> {
        let n = self.tau.len();
        if n == 0 {
            return Err(Error::Empty("trace has no samples".into()));
        }
        if self.value.len() != n || self.stderr.len() != n {
            return Err(Error::ShapeMismatch("trace columns differ in length".into()));
        }
        if self.tau.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("tau samples must be strictly increasing"));
        }
        if self.value.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("trace has non-finite values"));
        }
        if self.stderr.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::invalid("trace has negative or NaN stderr"));
        }
        if self.meta.kind == TraceKind::Direct && self.value.iter().any(|v| *v < 0.0) {
            return Err(Error::invalid("direct trace has negative values"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    /// Index of the sample at τ, if present to within 1e-9 fs.
    pub fn index_of(&self, tau: f64) -> Option<usize> {
        self.tau.iter().position(|t| (t - tau).abs() < 1e-9)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["tau_fs", "value_hz", "stderr_hz"])?;
        for i in 0..self.len() {
            w.write_record([
                self.tau[i].to_string(),
                self.value[i].to_string(),
                self.stderr[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a `tau_fs,value_hz[,stderr_hz]` CSV. Metadata is not stored in
    /// the CSV; the returned trace carries `kind = measured-sim` placeholders.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h.trim() == name);
        let (Some(it), Some(iv)) = (col("tau_fs"), col("value_hz")) else {
            return Err(Error::invalid(
                "trace CSV must have tau_fs and value_hz columns",
            ));
        };
        let is = col("stderr_hz");
        let mut trace = CorrelationTrace {
            tau: Vec::new(),
            value: Vec::new(),
            stderr: Vec::new(),
            meta: TraceMeta::noiseless(TraceKind::MeasuredSim),
        };
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64> {
                let field = rec.get(i).unwrap_or("");
                field.trim().parse::<f64>().map_err(|_| {
                    Error::invalid(format!(
                        "row {}: cannot parse {:?} as a number",
                        line + 2,
                        field
                    ))
                })
            };
            trace.tau.push(parse(it)?);
            trace.value.push(parse(iv)?);
            trace.stderr.push(match is {
                Some(i) => parse(i)?,
                None => 0.0,
            });
        }
        trace.validate()?;
        Ok(trace)
    }

    /// JSON metadata sidecar: `{meta, run_stats}`.
    pub fn write_sidecar<W: Write>(&self, mut out: W, stats: Option<&RunStats>) -> Result<()> {
        let sidecar = Sidecar {
            meta: &self.meta,
            run_stats: stats,
        };
        serde_json::to_writer_pretty(&mut out, &sidecar)?;
        out.write_all(b"\n")?;
        Ok(())
    }

    /// Writes `<stem>.csv` and the `<stem>.json` metadata sidecar.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str, stats: Option<&RunStats>) -> Result<()> {
        let dir = dir.as_ref();
        self.write_csv(std::fs::File::create(dir.join(format!("{stem}.csv")))?)?;
        self.write_sidecar(std::fs::File::create(dir.join(format!("{stem}.json")))?, stats)
    }
}

/// Σ_{all k} Λ_k · p(|Ω_k|) · ΔΩ, with `profile` indexed by positive bin.
pub fn full_band_amplitude(lambda: &SpectralAmplitude, profile: &[Complex64]) -> Complex64 {
    let g = lambda.grid();
    let n = g.n_pos();
    let a = lambda.amp();
    (0..n)
        .map(|j| (a[n + j] + a[n - 1 - j]) * profile[j])
        .sum::<Complex64>()
        * g.bin_width()
}

/// Σ_{Ω_k>0} Λ_k · p(Ω_k) · ΔΩ.
pub fn half_band_amplitude(lambda: &SpectralAmplitude, profile: &[Complex64]) -> Complex64 {
    let g = lambda.grid();
    let n = g.n_pos();
    let a = lambda.amp();
    (0..n).map(|j| a[n + j] * profile[j]).sum::<Complex64>() * g.bin_width()
}

/// Detected rate for one mask setting (one ensemble member, no averaging).
/// Any τ dependence is carried by the mask itself, e.g. a composition of a
/// random dephaser with [`ma_mask`].
pub fn signal_one_realization(lambda: &SpectralAmplitude, m_total: &TransferFunction) -> Result<f64> {
    if lambda.grid() != m_total.grid() {
        return Err(Error::GridMismatch);
    }
    Ok(full_band_amplitude(lambda, &pair_profile(m_total)).norm_sqr())
}

/// G²(τ) = |Σ_k Λ(Ω_k) e^{iΩ_kτ} ΔΩ|².
pub fn g2_direct(lambda: &SpectralAmplitude, tau: f64) -> f64 {
    let g = lambda.grid();
    let n = g.n_pos();
    let a = lambda.amp();
    let w = g.positive_values();
    let sum: Complex64 = (0..n)
        .map(|j| {
            a[n + j] * Complex64::from_polar(1.0, w[j] * tau)
                + a[n - 1 - j] * Complex64::from_polar(1.0, -w[j] * tau)
        })
        .sum();
    (sum * g.bin_width()).norm_sqr()
}

/// The two measured components of the decomposed signal at one τ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSignal {
    /// Full-band rate under `m_random · M_a(τ)`.
    pub s_a: f64,
    /// Half-band rate under `m_random · M_b(τ)`, before the factor 4.
    pub s_b_raw: f64,
}

impl SplitSignal {
    pub fn combined(&self) -> f64 {
        self.s_a - 4.0 * self.s_b_raw
    }
}

pub fn split_components(
    lambda: &SpectralAmplitude,
    tau: f64,
    m_random: Option<&TransferFunction>,
) -> Result<SplitSignal> {
    lambda.require_symmetric()?;
    let g = lambda.grid();
    let (ma, mb) = match m_random {
        Some(m) => (compose(m, &ma_mask(tau, g))?, compose(m, &mb_mask(tau, g))?),
        None => (ma_mask(tau, g), mb_mask(tau, g)),
    };
    Ok(SplitSignal {
        s_a: full_band_amplitude(lambda, &pair_profile(&ma)).norm_sqr(),
        s_b_raw: half_band_amplitude(lambda, &pair_profile(&mb)).norm_sqr(),
    })
}

/// `S_a − 4·S_b,raw`; equals [`g2_direct`] when `m_random` is `None` or the
/// identity.
pub fn g2_split(
    lambda: &SpectralAmplitude,
    tau: f64,
    m_random: Option<&TransferFunction>,
) -> Result<f64> {
    Ok(split_components(lambda, tau, m_random)?.combined())
}

/// Empirical σ = 0 fit model `B·cos(μτ)·exp(−σ′²τ²/2)`.
pub fn analytic_sigma0(b_hz: f64, mu: f64, sigma_p: f64, tau: f64) -> f64 {
    b_hz * (mu * tau).cos() * (-0.5 * sigma_p * sigma_p * tau * tau).exp()
}

pub fn analytic_trace(b_hz: f64, mu: f64, sigma_p: f64, tau: &[f64]) -> CorrelationTrace {
    CorrelationTrace {
        tau: tau.to_vec(),
        value: tau.iter().map(|&t| analytic_sigma0(b_hz, mu, sigma_p, t)).collect(),
        stderr: vec![0.0; tau.len()],
        meta: TraceMeta::noiseless(TraceKind::Split),
    }
}

pub fn g2_direct_trace(lambda: &SpectralAmplitude, tau: &[f64]) -> Result<CorrelationTrace> {
    if tau.is_empty() {
        return Err(Error::Empty("tau grid".into()));
    }
    let t = CorrelationTrace {
        tau: tau.to_vec(),
        value: tau.iter().map(|&t| g2_direct(lambda, t)).collect(),
        stderr: vec![0.0; tau.len()],
        meta: TraceMeta::noiseless(TraceKind::Direct),
    };
    t.validate()?;
    Ok(t)
}

/// Signal of the fully dephased (classically correlated) state: the
/// incoherent sum of every pair bin's split signal,
/// `Σ_j |Λ₊+Λ₋|²ΔΩ² − 4|Λ₊|²ΔΩ² sin²(Ω_jτ)`. For symmetric Λ this is
/// `4ΔΩ² Σ_j |Λ_j|² cos²(Ω_jτ)`, which is not flat: it peaks at τ = 0 at
/// twice its far-τ level.
pub fn classical_signal(lambda: &SpectralAmplitude, tau: f64) -> f64 {
    let g = lambda.grid();
    let n = g.n_pos();
    let a = lambda.amp();
    let w = g.positive_values();
    let dw2 = g.bin_width() * g.bin_width();
    (0..n)
        .map(|j| {
            let s = (w[j] * tau).sin();
            (a[n + j] + a[n - 1 - j]).norm_sqr() - 4.0 * a[n + j].norm_sqr() * s * s
        })
        .sum::<f64>()
        * dw2
}

/// Exact N → ∞ ensemble mean of the split signal under Gaussian dephasing:
/// `e^{−σ²}·G²(τ) + (1 − e^{−σ²})·C(τ)` with C from [`classical_signal`].
pub fn expected_signal(lambda: &SpectralAmplitude, sigma: f64, tau: f64) -> Result<f64> {
    crate::shaper::check_sigma(sigma)?;
    let f = (-sigma * sigma).exp();
    Ok(f * g2_split(lambda, tau, None)? + (1.0 - f) * classical_signal(lambda, tau))
}

pub fn expected_trace(lambda: &SpectralAmplitude, sigma: f64, tau: &[f64]) -> Result<CorrelationTrace> {
    if tau.is_empty() {
        return Err(Error::Empty("tau grid".into()));
    }
    let value = tau
        .iter()
        .map(|&t| expected_signal(lambda, sigma, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(CorrelationTrace {
        tau: tau.to_vec(),
        value,
        stderr: vec![0.0; tau.len()],
        meta: TraceMeta {
            sigma,
            n_realizations: 0,
            ..TraceMeta::noiseless(TraceKind::Split)
        },
    })
}

/// Ensemble-averaged split trace over `n_realizations` random dephasers.
pub fn trace_scan(
    lambda: &SpectralAmplitude,
    sigma: f64,
    n_realizations: usize,
    master_seed: u64,
    tau: &[f64],
) -> Result<CorrelationTrace> {
    let config = EnsembleConfig {
        n_realizations,
        sigma,
        master_seed,
        ..EnsembleConfig::default()
    };
    Ok(montecarlo::run_ensemble(lambda, &config, tau, None)?.0)
}

//! Command-line front end: `simulate`, `verify`, `sweep` and `fit`.
//!
//! Exit codes: 0 success, 1 configuration or input error, 2 runtime or
//! numerical failure, 3 verification failure.

use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::analysis::{
    crossing, fit_sigma0, fit_width, sweep, write_curve_csv, CurvePoint, FitResult, SpectralWidth,
    SweepOptions, SweepPoint,
};
use crate::config::{OutputFormat, RunConfig};
use crate::correlation::CorrelationTrace;
use crate::density::{
    classical_state, ensemble_average, matrix_distance, predicted_mixture, pure_state,
    signal_from_state, DensityMatrix,
};
use crate::error::Error;
use crate::montecarlo::{derive_seed, poissonize, run_ensemble, EnsembleConfig};

/// Mixed into the master seed for the Poisson noise streams so they never
/// coincide with the dephaser streams.
const NOISE_STREAM: u64 = 0x6E6F_6973_6500_0001;

#[derive(Debug, Parser)]
#[command(name = "biphoton", version, about = "Entangled photon-pair dephasing simulator")]
pub struct Cli {
    /// JSON run configuration; omitted sections take defaults.
    #[arg(long, global = true, env = "BIPHOTON_CONFIG", value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed for the dephasing ensemble.
    #[arg(long, global = true, env = "BIPHOTON_SEED", value_name = "U64")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "BIPHOTON_OUT", value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// σ values: `0,0.5,1` or `start:stop:step` (inclusive).
    #[arg(long, global = true, env = "BIPHOTON_SIGMA", value_name = "LIST")]
    pub sigma: Option<String>,
    /// Worker threads (default: all cores). Does not change results.
    #[arg(long, global = true, env = "BIPHOTON_WORKERS", value_name = "N")]
    pub workers: Option<usize>,
    /// τ sampling step, fs.
    #[arg(long, global = true, env = "BIPHOTON_TAU_STEP", value_name = "FS")]
    pub tau_step: Option<f64>,
    /// Number of dephasing realizations per σ.
    #[arg(long, global = true, env = "BIPHOTON_REALIZATIONS", value_name = "N")]
    pub realizations: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ensemble-averaged coincidence traces, one per σ.
    Simulate,
    /// Density-matrix oracle checks on a small grid.
    Verify,
    /// Entangled fraction, background and peak ratio versus σ.
    Sweep,
    /// Fit the σ = 0 model to a trace CSV.
    Fit {
        /// CSV with tau_fs,value_hz[,stderr_hz] columns.
        trace: PathBuf,
    },
}

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Runtime(String),
    Verification(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Verification(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Runtime(m) | Failure::Verification(m) => m,
        }
    }
}

fn config_err(context: &str) -> impl Fn(Error) -> Failure + '_ {
    move |e| Failure::Config(format!("{context}: {e}"))
}

fn runtime(e: Error) -> Failure {
    Failure::Runtime(e.to_string())
}

/// Parses `a,b,c` or `start:stop:step`.
pub fn parse_sigma_list(s: &str) -> Result<Vec<f64>, String> {
    let num = |t: &str| {
        t.trim()
            .parse::<f64>()
            .map_err(|_| format!("cannot parse {t:?} as a number"))
    };
    let out = if s.contains(':') {
        let parts: Vec<&str> = s.split(':').collect();
        let [a, b, step] = parts[..] else {
            return Err(format!("range {s:?} must be start:stop:step"));
        };
        let (a, b, step) = (num(a)?, num(b)?, num(step)?);
        if !(step > 0.0) || !(b >= a) {
            return Err(format!("range {s:?} needs step > 0 and stop >= start"));
        }
        let n = ((b - a) / step + 1e-9).floor() as usize;
        (0..=n).map(|i| a + i as f64 * step).collect()
    } else {
        s.split(',').map(num).collect::<Result<Vec<_>, _>>()?
    };
    if out.is_empty() {
        return Err("empty sigma list".into());
    }
    Ok(out)
}

/// Loads the config file (if any), applies command-line overrides and
/// validates the result.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.ensemble.master_seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output.directory = out.clone();
    }
    if let Some(step) = cli.tau_step {
        cfg.tau.step = step;
    }
    if let Some(n) = cli.realizations {
        cfg.ensemble.n_realizations = n;
    }
    if let Some(list) = &cli.sigma {
        let sigmas = parse_sigma_list(list).map_err(|e| Failure::Config(format!("--sigma: {e}")))?;
        if matches!(cli.command, Command::Verify) {
            cfg.verify.sigmas = sigmas;
        } else {
            cfg.ensemble.sigmas = sigmas;
        }
    }
    if cli.workers == Some(0) {
        return Err(Failure::Config("--workers must be >= 1".into()));
    }
    cfg.validate().map_err(config_err("invalid configuration"))?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let io = |e: std::io::Error| Failure::Runtime(format!("{}: {e}", path.display()));
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    s.push('\n');
    std::fs::write(path, s).map_err(io)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

/// File-name fragment for σ; shortest round-trip decimal.
fn sigma_tag(sigma: f64) -> String {
    format!("{sigma}")
}

#[derive(Serialize)]
struct Timing {
    command: &'static str,
    total_s: f64,
    per_sigma: Vec<(f64, f64)>,
}

fn cmd_simulate(cfg: &RunConfig, dir: &Path) -> Result<Timing, Failure> {
    let lambda = cfg.spectrum().map_err(runtime)?;
    let tau = cfg.tau_values().map_err(runtime)?;
    let start = Instant::now();
    let mut per_sigma = Vec::new();
    for (i, &sigma) in cfg.ensemble.sigmas.iter().enumerate() {
        let ec = EnsembleConfig {
            n_realizations: cfg.ensemble.n_realizations,
            sigma,
            master_seed: cfg.ensemble.master_seed,
            acquisition_time: cfg.noise.acquisition_time,
            dark_rate: cfg.noise.dark_rate,
        };
        let (mut trace, stats) = run_ensemble(&lambda, &ec, &tau, None).map_err(runtime)?;
        if cfg.noise.poisson {
            let seed = derive_seed(cfg.ensemble.master_seed ^ NOISE_STREAM, i as u64);
            trace = poissonize(&trace, cfg.noise.acquisition_time, cfg.noise.dark_rate, seed)
                .map_err(runtime)?;
        }
        let stem = format!("trace_sigma_{}", sigma_tag(sigma));
        if cfg.output.wants(OutputFormat::Csv) {
            trace
                .write_csv(create(&dir.join(format!("{stem}.csv")))?)
                .map_err(runtime)?;
        }
        if cfg.output.wants(OutputFormat::Json) {
            trace
                .write_sidecar(create(&dir.join(format!("{stem}.json")))?, Some(&stats))
                .map_err(runtime)?;
        }
        let zero = trace.index_of(0.0).map(|k| trace.value[k]);
        println!(
            "sigma={sigma}: {} points, {} realizations, S(0)={}, {:.2}s",
            trace.len(),
            stats.n_effective,
            zero.map_or("n/a".into(), |v| format!("{v:.3} Hz")),
            stats.wall_time.as_secs_f64()
        );
        per_sigma.push((sigma, stats.wall_time.as_secs_f64()));
    }
    Ok(Timing {
        command: "simulate",
        total_s: start.elapsed().as_secs_f64(),
        per_sigma,
    })
}

#[derive(Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub sigma: f64,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Debug, Serialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub n_pos: usize,
    pub n_realizations: usize,
    pub tolerance: f64,
    /// ‖ρq − ρc‖_F, the scale of the mixture distances.
    pub reference_distance: f64,
    pub checks: Vec<Check>,
}

const SIGNAL_TAUS: [f64; 5] = [-120.0, -35.0, 0.0, 40.0, 150.0];

fn verify_state(
    rho: &DensityMatrix,
    pure: &DensityMatrix,
    sigma: f64,
    checks: &mut Vec<Check>,
) {
    let min_eig = rho.min_eigenvalue();
    checks.push(Check {
        name: "invariants".into(),
        sigma,
        value: min_eig,
        threshold: crate::density::EIGEN_FLOOR,
        passed: rho.check_invariants().is_ok(),
    });
    let scale = pure.diagonal().iter().map(|c| c.re).fold(0.0, f64::max);
    let diag_dev = rho
        .diagonal()
        .iter()
        .zip(pure.diagonal())
        .map(|(a, b)| (a - b).norm())
        .fold(0.0, f64::max)
        / scale;
    checks.push(Check {
        name: "diagonal_unchanged".into(),
        sigma,
        value: diag_dev,
        threshold: 1e-12,
        passed: diag_dev <= 1e-12,
    });
}

pub fn run_verify(cfg: &RunConfig) -> Result<VerifyReport, Failure> {
    let v = &cfg.verify;
    let lambda = cfg.verify_spectrum().map_err(runtime)?;
    let pure = pure_state(&lambda).map_err(runtime)?;
    let classical = classical_state(&lambda).map_err(runtime)?;
    let reference = matrix_distance(&pure, &classical).map_err(runtime)?;
    let seed = cfg.ensemble.master_seed;
    let mut checks = Vec::new();
    for &sigma in &v.sigmas {
        let rho = ensemble_average(&lambda, sigma, v.n_realizations, seed).map_err(runtime)?;
        verify_state(&rho, &pure, sigma, &mut checks);
        let predicted = predicted_mixture(sigma, &lambda).map_err(runtime)?;
        let d = matrix_distance(&rho, &predicted).map_err(runtime)? / reference;
        checks.push(Check {
            name: "mixture_distance".into(),
            sigma,
            value: d,
            threshold: v.tolerance,
            passed: d <= v.tolerance,
        });
        if sigma == 0.0 {
            let d0 = matrix_distance(&rho, &pure).map_err(runtime)?;
            checks.push(Check {
                name: "distance_to_pure".into(),
                sigma,
                value: d0,
                threshold: 0.0,
                passed: d0 == 0.0,
            });
        }
        // trace-scan average versus Tr[ρ E(τ)] of the same ensemble
        let ec = EnsembleConfig {
            n_realizations: v.n_realizations,
            sigma,
            master_seed: seed,
            ..EnsembleConfig::default()
        };
        let (trace, _) = run_ensemble(&lambda, &ec, &SIGNAL_TAUS, None).map_err(runtime)?;
        let mut worst: f64 = 0.0;
        for (k, &t) in SIGNAL_TAUS.iter().enumerate() {
            let s = signal_from_state(&rho, &lambda, t).map_err(runtime)?;
            let scale = s.abs().max(trace.value[k].abs()).max(1e-6 * cfg.spectrum.b_hz);
            worst = worst.max((s - trace.value[k]).abs() / scale);
        }
        checks.push(Check {
            name: "signal_consistency".into(),
            sigma,
            value: worst,
            threshold: 1e-9,
            passed: worst <= 1e-9,
        });
    }
    let passed = checks.iter().all(|c| c.passed);
    Ok(VerifyReport {
        passed,
        n_pos: v.n_pos,
        n_realizations: v.n_realizations,
        tolerance: v.tolerance,
        reference_distance: reference,
        checks,
    })
}

fn cmd_verify(cfg: &RunConfig, dir: &Path) -> Result<Timing, Failure> {
    let start = Instant::now();
    let report = run_verify(cfg)?;
    write_json(&dir.join("verify_report.json"), &report)?;
    for c in &report.checks {
        println!(
            "{} {} sigma={} value={:e} threshold={:e}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.sigma,
            c.value,
            c.threshold
        );
    }
    if !report.passed {
        let n = report.checks.iter().filter(|c| !c.passed).count();
        return Err(Failure::Verification(format!("{n} verification check(s) failed")));
    }
    Ok(Timing {
        command: "verify",
        total_s: start.elapsed().as_secs_f64(),
        per_sigma: Vec::new(),
    })
}

#[derive(Serialize)]
struct SweepSummary<'a> {
    n_realizations: usize,
    master_seed: u64,
    background_window: &'a [(f64, f64)],
    /// σ where the entangled fraction crosses 1/2, if inside the grid.
    fraction_half_crossing: Option<f64>,
    points: &'a [SweepPoint],
}

fn cmd_sweep(cfg: &RunConfig, dir: &Path) -> Result<Timing, Failure> {
    let start = Instant::now();
    let lambda = cfg.spectrum().map_err(runtime)?;
    let opts = SweepOptions {
        tau: cfg.tau_values().map_err(runtime)?,
        window: cfg.window(),
        workers: None,
    };
    let e = &cfg.ensemble;
    let points = sweep(&lambda, &e.sigmas, e.n_realizations, e.master_seed, &opts).map_err(runtime)?;
    let curve = |f: fn(&SweepPoint) -> (f64, f64)| -> Vec<CurvePoint> {
        points
            .iter()
            .map(|p| {
                let (value, stderr) = f(p);
                CurvePoint {
                    sigma: p.sigma,
                    value,
                    stderr,
                }
            })
            .collect()
    };
    let fraction = curve(|p| (p.fraction_entangled, 0.0));
    let background = curve(|p| (p.background, p.background_stderr));
    let peak = curve(|p| (p.peak_ratio, p.peak_ratio_stderr));
    let half = crossing(
        &fraction.iter().map(|p| (p.sigma, p.value)).collect::<Vec<_>>(),
        0.5,
    );
    if cfg.output.wants(OutputFormat::Csv) {
        for (name, c) in [("fraction", &fraction), ("background", &background), ("peak_ratio", &peak)] {
            write_curve_csv(c, create(&dir.join(format!("{name}.csv")))?).map_err(runtime)?;
        }
    }
    if cfg.output.wants(OutputFormat::Json) {
        let summary = SweepSummary {
            n_realizations: e.n_realizations,
            master_seed: e.master_seed,
            background_window: &cfg.analysis.background_window,
            fraction_half_crossing: half,
            points: &points,
        };
        write_json(&dir.join("sweep.json"), &summary)?;
    }
    for p in &points {
        println!(
            "sigma={}: fraction={:.6} background={:.3}±{:.3} Hz peak_ratio={:.4}±{:.4}",
            p.sigma,
            p.fraction_entangled,
            p.background,
            p.background_stderr,
            p.peak_ratio,
            p.peak_ratio_stderr
        );
    }
    if let Some(h) = half {
        println!("fraction crosses 0.5 at sigma={h:.4}");
    }
    Ok(Timing {
        command: "sweep",
        total_s: start.elapsed().as_secs_f64(),
        per_sigma: Vec::new(),
    })
}

#[derive(Debug, Serialize)]
struct FitReport {
    source: PathBuf,
    fit: FitResult,
    width: SpectralWidth,
}

fn cmd_fit(cfg: &RunConfig, dir: &Path, path: &Path) -> Result<Timing, Failure> {
    let start = Instant::now();
    let file = File::open(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let trace = CorrelationTrace::read_csv(file).map_err(config_err(&path.display().to_string()))?;
    let fit = fit_sigma0(&trace).map_err(|e| match e {
        Error::InvalidParameter(m) => Failure::Config(format!("{}: {m}", path.display())),
        other => runtime(other),
    })?;
    let width = fit_width(&fit, cfg.spectrum.lambda0_nm).map_err(runtime)?;
    println!(
        "B={:.4} Hz mu={:.6} rad/fs sigma_p={:.6} rad/fs residual_rms={:.4} Hz",
        fit.b_hz, fit.mu, fit.sigma_p, fit.residual_rms
    );
    println!(
        "spectral width {:.6} rad/fs = {:.3} nm at {} nm",
        width.rad_per_fs, width.nm, width.lambda0_nm
    );
    write_json(
        &dir.join("fit.json"),
        &FitReport {
            source: path.to_path_buf(),
            fit,
            width,
        },
    )?;
    Ok(Timing {
        command: "fit",
        total_s: start.elapsed().as_secs_f64(),
        per_sigma: Vec::new(),
    })
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    let cfg = resolve_config(cli)?;
    let dir = cfg.output.directory.clone();
    std::fs::create_dir_all(&dir)
        .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    let resolved = cfg.to_json().map_err(runtime)?;
    std::fs::write(dir.join("config.resolved.json"), resolved)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;

    let body = || match &cli.command {
        Command::Simulate => cmd_simulate(&cfg, &dir),
        Command::Verify => cmd_verify(&cfg, &dir),
        Command::Sweep => cmd_sweep(&cfg, &dir),
        Command::Fit { trace } => cmd_fit(&cfg, &dir, trace),
    };
    let timing = match cli.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Failure::Runtime(format!("thread pool: {e}")))?
            .install(body)?,
        None => body()?,
    };
    write_json(&dir.join("timing.json"), &timing)
}

/// Entry point used by the binary; returns the process exit code.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

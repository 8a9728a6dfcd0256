//! Brute-force density-matrix oracle on the perfectly anticorrelated pair
//! subspace.
//!
//! Basis state `j` is the (coherent, symmetric) pair mode built on the `j`-th
//! positive bin: `|Ω_j⟩ᵢ|−Ω_j⟩ₛ` together with its mirror. Masks act through
//! their pair profile, which depends only on |Ω|, so the mirror components
//! always move together and `n_pos × n_pos` matrices suffice. The state
//! vector component is `c_j ∝ Λ(Ω_j) + Λ(−Ω_j)`.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::montecarlo::derive_seed;
use crate::shaper::{check_sigma, ma_mask, mb_mask, pair_profile, random_dephaser, TransferFunction};
use crate::spectral::{FrequencyGrid, SpectralAmplitude};

pub const HERMITIAN_TOL: f64 = 1e-12;
pub const TRACE_TOL: f64 = 1e-10;
pub const EIGEN_FLOOR: f64 = -1e-9;

const ENSEMBLE_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    grid: FrequencyGrid,
    mat: DMatrix<Complex64>,
}

impl DensityMatrix {
    pub fn grid(&self) -> &FrequencyGrid {
        &self.grid
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.mat
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn trace(&self) -> Complex64 {
        self.mat.trace()
    }

    pub fn purity(&self) -> f64 {
        (&self.mat * &self.mat).trace().re
    }

    pub fn diagonal(&self) -> Vec<Complex64> {
        self.mat.diagonal().iter().copied().collect()
    }

    pub fn hermiticity_error(&self) -> f64 {
        (&self.mat - self.mat.adjoint()).iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        // symmetrize first so rounding noise cannot break the Hermitian solver
        let h = (&self.mat + self.mat.adjoint()) * Complex64::new(0.5, 0.0);
        h.symmetric_eigenvalues().iter().copied().collect()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().into_iter().fold(f64::INFINITY, f64::min)
    }

    /// Hermitian, unit trace and positive semidefinite within tolerance.
    pub fn check_invariants(&self) -> Result<()> {
        let herm = self.hermiticity_error();
        if herm > HERMITIAN_TOL {
            return Err(Error::invalid(format!("not Hermitian: max |ρ − ρ†| = {herm:e}")));
        }
        let tr = self.trace();
        if (tr - Complex64::new(1.0, 0.0)).norm() > TRACE_TOL {
            return Err(Error::invalid(format!("trace {tr} ≠ 1")));
        }
        let min = self.min_eigenvalue();
        if min < EIGEN_FLOOR {
            return Err(Error::invalid(format!("negative eigenvalue {min:e}")));
        }
        Ok(())
    }

    /// `w1·self + w2·other`.
    pub fn mix(&self, w1: f64, other: &Self, w2: f64) -> Result<Self> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch);
        }
        Ok(Self {
            grid: self.grid.clone(),
            mat: &self.mat * Complex64::new(w1, 0.0) + &other.mat * Complex64::new(w2, 0.0),
        })
    }

    /// Tr[ρ·E].
    pub fn expectation(&self, op: &DMatrix<Complex64>) -> Result<Complex64> {
        if op.shape() != self.mat.shape() {
            return Err(Error::ShapeMismatch(format!(
                "operator {:?} vs state {:?}",
                op.shape(),
                self.mat.shape()
            )));
        }
        Ok((&self.mat * op).trace())
    }

    /// Writes `row,col,re,im` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["row", "col", "re", "im"])?;
        for i in 0..self.dim() {
            for j in 0..self.dim() {
                let c = self.mat[(i, j)];
                w.write_record([i.to_string(), j.to_string(), c.re.to_string(), c.im.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Pair-mode amplitudes c_j = Λ(Ω_j) + Λ(−Ω_j), unnormalized.
pub fn pair_vector(lambda: &SpectralAmplitude) -> DVector<Complex64> {
    let g = lambda.grid();
    let n = g.n_pos();
    let a = lambda.amp();
    DVector::from_iterator(n, (0..n).map(|j| a[n + j] + a[n - 1 - j]))
}

fn normalized_pair_vector(lambda: &SpectralAmplitude) -> Result<DVector<Complex64>> {
    let c = pair_vector(lambda);
    let norm = c.norm();
    if !(norm > 0.0) {
        return Err(Error::ZeroAmplitude);
    }
    Ok(c.unscale(norm))
}

/// ρ⁽q⁾ = |Ψ⟩⟨Ψ| on the pair subspace.
pub fn pure_state(lambda: &SpectralAmplitude) -> Result<DensityMatrix> {
    let c = normalized_pair_vector(lambda)?;
    Ok(DensityMatrix {
        grid: lambda.grid().clone(),
        mat: &c * c.adjoint(),
    })
}

/// ρ⁽c⁾ = Σ_j p_j |j⟩⟨j| with p_j ∝ |c_j|².
pub fn classical_state(lambda: &SpectralAmplitude) -> Result<DensityMatrix> {
    let c = normalized_pair_vector(lambda)?;
    let diag = DVector::from_iterator(c.len(), c.iter().map(|x| Complex64::new(x.norm_sqr(), 0.0)));
    Ok(DensityMatrix {
        grid: lambda.grid().clone(),
        mat: DMatrix::from_diagonal(&diag),
    })
}

fn profile_vector(m: &TransferFunction) -> DVector<Complex64> {
    DVector::from_vec(pair_profile(m))
}

/// D ρ D† with D = diag(pair_profile(m)). Renormalized to unit trace when
/// the profile is not unit-modulus everywhere.
pub fn apply_mask(rho: &DensityMatrix, m: &TransferFunction) -> Result<DensityMatrix> {
    if rho.grid != *m.grid() {
        return Err(Error::GridMismatch);
    }
    let d = profile_vector(m);
    let n = rho.dim();
    let mat = DMatrix::from_fn(n, n, |i, j| d[i] * rho.mat[(i, j)] * d[j].conj());
    let mut out = DensityMatrix {
        grid: rho.grid.clone(),
        mat,
    };
    if d.iter().any(|x| (x.norm() - 1.0).abs() > 1e-12) {
        let tr = out.trace().re;
        if !(tr > 0.0) {
            return Err(Error::ZeroAmplitude);
        }
        out.mat.unscale_mut(tr);
    }
    Ok(out)
}

/// State-vector form of [`apply_mask`], without renormalization.
pub fn apply_mask_vector(c: &DVector<Complex64>, m: &TransferFunction) -> Result<DVector<Complex64>> {
    let d = profile_vector(m);
    if d.len() != c.len() {
        return Err(Error::GridMismatch);
    }
    Ok(c.component_mul(&d))
}

/// Equal-weight mixture of the pure state under `n` random dephasers
/// seeded by `derive_seed(master_seed, j)`.
pub fn ensemble_average(
    lambda: &SpectralAmplitude,
    sigma: f64,
    n: usize,
    master_seed: u64,
) -> Result<DensityMatrix> {
    check_sigma(sigma)?;
    if n == 0 {
        return Err(Error::invalid("ensemble needs at least one realization"));
    }
    let rho_q = pure_state(lambda)?;
    if sigma == 0.0 {
        // every realization is the identity mask
        return Ok(rho_q);
    }
    let g = lambda.grid();
    let chunks: Vec<_> = (0..n.div_ceil(ENSEMBLE_CHUNK))
        .map(|c| c * ENSEMBLE_CHUNK..((c + 1) * ENSEMBLE_CHUNK).min(n))
        .collect();
    let partials: Vec<DMatrix<Complex64>> = chunks
        .par_iter()
        .map(|r| {
            let mut acc = DMatrix::zeros(rho_q.dim(), rho_q.dim());
            for j in r.clone() {
                let m = random_dephaser(sigma, derive_seed(master_seed, j as u64), g)?;
                acc += apply_mask(&rho_q, &m)?.mat;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let sum = partials
        .into_iter()
        .reduce(|a, b| a + b)
        .expect("at least one chunk");
    Ok(DensityMatrix {
        grid: g.clone(),
        mat: sum.unscale(n as f64),
    })
}

/// Fraction of the entangled pure state in the dephased mixture, e^{−σ²}.
pub fn fraction_entangled(sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    Ok((-sigma * sigma).exp())
}

/// e^{−σ²}ρ⁽q⁾ + (1 − e^{−σ²})ρ⁽c⁾.
pub fn predicted_mixture(sigma: f64, lambda: &SpectralAmplitude) -> Result<DensityMatrix> {
    let f = fraction_entangled(sigma)?;
    pure_state(lambda)?.mix(f, &classical_state(lambda)?, 1.0 - f)
}

/// Frobenius norm of ρ₁ − ρ₂.
pub fn matrix_distance(a: &DensityMatrix, b: &DensityMatrix) -> Result<f64> {
    if a.mat.shape() != b.mat.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.mat.shape(),
            b.mat.shape()
        )));
    }
    Ok((&a.mat - &b.mat).norm())
}

/// Measurement operator of the split signal at τ, scaled so that
/// `signal = Σ_j|c_j|² · Tr[ρ·E(τ)]` for a normalized ρ built from `lambda`.
///
/// E = u_a u_a† − 4·u_b u_b† with u the conjugated per-mode detection
/// amplitudes of the M_a (full band) and M_b (half band) settings.
pub fn measurement_operator(lambda: &SpectralAmplitude, tau: f64) -> Result<DMatrix<Complex64>> {
    lambda.require_symmetric()?;
    let g = lambda.grid();
    let n = g.n_pos();
    let dw = g.bin_width();
    let pa = pair_profile(&ma_mask(tau, g));
    let pb = pair_profile(&mb_mask(tau, g));
    // full band: Σ_j c_j p_j ΔΩ; half band for symmetric Λ: Σ_j (c_j/2) p_j ΔΩ
    let ua = DVector::from_iterator(n, pa.iter().map(|p| (p * dw).conj()));
    let ub = DVector::from_iterator(n, pb.iter().map(|p| (p * dw * 0.5).conj()));
    Ok(&ua * ua.adjoint() - (&ub * ub.adjoint()) * Complex64::new(4.0, 0.0))
}

/// Signal rate predicted by a density matrix, `Σ|c_j|² · Tr[ρ·E(τ)]`.
pub fn signal_from_state(rho: &DensityMatrix, lambda: &SpectralAmplitude, tau: f64) -> Result<f64> {
    let scale = pair_vector(lambda).norm_squared();
    Ok(scale * rho.expectation(&measurement_operator(lambda, tau)?)?.re)
}

/// Unnormalized pure-state signal under one mask, via the state vector.
pub fn signal_from_vector(lambda: &SpectralAmplitude, m: &TransferFunction) -> Result<f64> {
    let c = apply_mask_vector(&pair_vector(lambda), m)?;
    Ok((c.sum() * lambda.grid().bin_width()).norm_sqr())
}

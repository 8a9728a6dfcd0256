//! Spectral transfer functions applied by the pulse shaper.
//!
//! A mask acts on the pair state only through the product M(Ω)·M(−Ω), so
//! every mask is ultimately reduced to its [`pair_profile`] over the
//! positive bins.

use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::FrequencyGrid;

const PASSIVE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferFunction {
    grid: FrequencyGrid,
    mask: Vec<Complex64>,
}

impl TransferFunction {
    pub fn new(grid: FrequencyGrid, mask: Vec<Complex64>) -> Result<Self> {
        if mask.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} mask samples for a grid of {} bins",
                mask.len(),
                grid.len()
            )));
        }
        for (k, m) in mask.iter().enumerate() {
            if !m.re.is_finite() || !m.im.is_finite() {
                return Err(Error::invalid(format!("mask sample {k} is not finite")));
            }
            if m.norm() > 1.0 + PASSIVE_TOL {
                return Err(Error::invalid(format!(
                    "mask sample {k} has modulus {} > 1",
                    m.norm()
                )));
            }
        }
        Ok(Self { grid, mask })
    }

    pub fn identity(grid: &FrequencyGrid) -> Self {
        Self {
            grid: grid.clone(),
            mask: vec![Complex64::new(1.0, 0.0); grid.len()],
        }
    }

    pub fn grid(&self) -> &FrequencyGrid {
        &self.grid
    }

    pub fn mask(&self) -> &[Complex64] {
        &self.mask
    }

    /// Writes `omega_rad_per_fs,re,im` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["omega_rad_per_fs", "re", "im"])?;
        for (omega, m) in self.grid.values().iter().zip(&self.mask) {
            w.write_record([omega.to_string(), m.re.to_string(), m.im.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Gaussian random phases, one per positive-frequency bin (one SLM pixel per
/// bin). Phases are `σ·z_k` with `z_k` standard normal draws from a ChaCha8
/// stream seeded by `seed`, taken in order of increasing Ω.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRealization {
    sigma: f64,
    seed: u64,
    phases: Vec<f64>,
}

impl PhaseRealization {
    pub fn draw(sigma: f64, seed: u64, grid: &FrequencyGrid) -> Result<Self> {
        let mut phases = vec![0.0; grid.n_pos()];
        fill_phases(sigma, seed, &mut phases)?;
        Ok(Self {
            sigma,
            seed,
            phases,
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn phases(&self) -> &[f64] {
        &self.phases
    }
}

/// Fills `out` with `σ·z_k`; the allocation-free core of
/// [`PhaseRealization::draw`].
pub(crate) fn fill_phases(sigma: f64, seed: u64, out: &mut [f64]) -> Result<()> {
    check_sigma(sigma)?;
    if sigma == 0.0 {
        out.iter_mut().for_each(|p| *p = 0.0);
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in out.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *p = sigma * z;
    }
    Ok(())
}

pub(crate) fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!(
            "sigma must be non-negative and finite, got {sigma}"
        )));
    }
    Ok(())
}

/// e^{−iΩτ/2} for Ω < 0, e^{+iΩτ/2} for Ω > 0. Pair product e^{i|Ω|τ}.
pub fn ma_mask(tau: f64, grid: &FrequencyGrid) -> TransferFunction {
    let mask = grid
        .values()
        .iter()
        .map(|&w| Complex64::from_polar(1.0, w.abs() * tau / 2.0))
        .collect();
    TransferFunction {
        grid: grid.clone(),
        mask,
    }
}

/// 1 for Ω < 0, sin(Ωτ) for Ω > 0. Pair product sin(|Ω|τ).
pub fn mb_mask(tau: f64, grid: &FrequencyGrid) -> TransferFunction {
    let mask = grid
        .values()
        .iter()
        .map(|&w| {
            if w < 0.0 {
                Complex64::new(1.0, 0.0)
            } else {
                Complex64::new((w * tau).sin(), 0.0)
            }
        })
        .collect();
    TransferFunction {
        grid: grid.clone(),
        mask,
    }
}

/// Unit transmission with zero phase on Ω < 0 and e^{iφ(Ω)} on Ω > 0.
///
/// The Ω < 0 branch is not zero: a zero there would annihilate every pair
/// amplitude through M(Ω)M(−Ω).
pub fn random_dephaser(sigma: f64, seed: u64, grid: &FrequencyGrid) -> Result<TransferFunction> {
    let realization = PhaseRealization::draw(sigma, seed, grid)?;
    Ok(dephaser_from(&realization, grid))
}

pub fn dephaser_from(realization: &PhaseRealization, grid: &FrequencyGrid) -> TransferFunction {
    let n = grid.n_pos();
    let mut mask = vec![Complex64::new(1.0, 0.0); grid.len()];
    for (j, &phi) in realization.phases().iter().enumerate() {
        mask[n + j] = Complex64::from_polar(1.0, phi);
    }
    TransferFunction {
        grid: grid.clone(),
        mask,
    }
}

/// Pointwise product of two masks on the same grid.
pub fn compose(m1: &TransferFunction, m2: &TransferFunction) -> Result<TransferFunction> {
    if m1.grid != m2.grid {
        return Err(Error::GridMismatch);
    }
    let mask = m1.mask.iter().zip(&m2.mask).map(|(a, b)| a * b).collect();
    Ok(TransferFunction {
        grid: m1.grid.clone(),
        mask,
    })
}

/// M(Ω)·M(−Ω) for each Ω > 0 bin, in order of increasing Ω.
pub fn pair_profile(m: &TransferFunction) -> Vec<Complex64> {
    let g = &m.grid;
    (0..g.n_pos())
        .map(|j| {
            let k = g.positive_index(j);
            m.mask[k] * m.mask[g.mirror(k)]
        })
        .collect()
}

/// e^{i[φ(Ω)+φ(−Ω)−φ(Ω′)−φ(−Ω′)]} with φ the mask phases at grid indices
/// `k` (Ω) and `kp` (Ω′). Identically 1 when |Ω′| = |Ω|.
pub fn four_phase_correlator(m: &TransferFunction, k: usize, kp: usize) -> Result<Complex64> {
    let g = &m.grid;
    if k >= g.len() || kp >= g.len() {
        return Err(Error::invalid(format!("bin index out of range for {} bins", g.len())));
    }
    let arg = |i: usize| m.mask[i].arg();
    let phase = (arg(k) + arg(g.mirror(k))) - (arg(kp) + arg(g.mirror(kp)));
    Ok(Complex64::from_polar(1.0, phase))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::make_grid;
    use approx::assert_relative_eq;

    fn grid() -> FrequencyGrid {
        make_grid(32, 0.15).unwrap()
    }

    fn assert_mask_eq(a: &TransferFunction, b: &TransferFunction, tol: f64) {
        for (x, y) in a.mask().iter().zip(b.mask()) {
            assert!((x - y).norm() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn ma_identity_and_pair_product() {
        let g = grid();
        assert_mask_eq(&ma_mask(0.0, &g), &TransferFunction::identity(&g), 0.0);
        let m = ma_mask(137.0, &g);
        assert!(m.mask().iter().all(|c| (c.norm() - 1.0).abs() < 1e-15));
        for (j, p) in pair_profile(&ma_mask(42.0, &g)).iter().enumerate() {
            let w = g.positive_values()[j];
            let e = Complex64::from_polar(1.0, w * 42.0);
            assert!((p - e).norm() < 1e-14);
        }
    }

    #[test]
    fn mb_zero_tau_and_pair_product() {
        let g = grid();
        let m = mb_mask(0.0, &g);
        assert!(m.mask()[g.n_pos()..].iter().all(|c| *c == Complex64::new(0.0, 0.0)));
        for tau in [-300.0, -7.5, 13.0, 250.0] {
            let m = mb_mask(tau, &g);
            assert!(m.mask().iter().all(|c| c.norm() <= 1.0));
            for (j, p) in pair_profile(&m).iter().enumerate() {
                let w = g.positive_values()[j];
                assert_eq!(*p, Complex64::new((w * tau).sin(), 0.0));
            }
        }
    }

    #[test]
    fn dephaser_determinism_and_identity() {
        let g = grid();
        assert_mask_eq(
            &random_dephaser(0.0, 99, &g).unwrap(),
            &TransferFunction::identity(&g),
            0.0,
        );
        let a = random_dephaser(0.7, 1234, &g).unwrap();
        let b = random_dephaser(0.7, 1234, &g).unwrap();
        assert_eq!(a, b);
        let c = random_dephaser(0.7, 1235, &g).unwrap();
        assert_ne!(a, c);
        assert!(random_dephaser(-0.1, 1, &g).is_err());
    }

    #[test]
    fn dephaser_pair_profile_is_phase() {
        let g = grid();
        let r = PhaseRealization::draw(1.3, 77, &g).unwrap();
        let p = pair_profile(&dephaser_from(&r, &g));
        for (pp, phi) in p.iter().zip(r.phases()) {
            assert_eq!(*pp, Complex64::from_polar(1.0, *phi));
        }
    }

    #[test]
    fn compose_properties() {
        let g = grid();
        let m = random_dephaser(0.5, 3, &g).unwrap();
        assert_mask_eq(&compose(&TransferFunction::identity(&g), &m).unwrap(), &m, 0.0);
        let c = compose(&ma_mask(80.0, &g), &ma_mask(-80.0, &g)).unwrap();
        assert_mask_eq(&c, &TransferFunction::identity(&g), 1e-15);
        let mb = mb_mask(33.0, &g);
        let c = compose(&m, &mb).unwrap();
        for k in 0..g.len() {
            assert_relative_eq!(
                c.mask()[k].norm(),
                m.mask()[k].norm() * mb.mask()[k].norm(),
                epsilon = 1e-15
            );
        }
        let other = make_grid(16, 0.15).unwrap();
        assert!(matches!(
            compose(&m, &TransferFunction::identity(&other)),
            Err(Error::GridMismatch)
        ));
    }

    #[test]
    fn pair_profile_identity_and_evenness() {
        let g = grid();
        assert!(pair_profile(&TransferFunction::identity(&g))
            .iter()
            .all(|p| *p == Complex64::new(1.0, 0.0)));
        // building the profile from the −Ω entries gives the same product
        let m = compose(&random_dephaser(2.0, 5, &g).unwrap(), &mb_mask(17.0, &g)).unwrap();
        let forward = pair_profile(&m);
        for (j, f) in forward.iter().enumerate() {
            let kneg = g.n_pos() - 1 - j;
            let backward = m.mask()[g.mirror(kneg)] * m.mask()[kneg];
            assert_eq!(*f, backward);
        }
    }

    #[test]
    fn rejects_active_masks() {
        let g = make_grid(2, 0.1).unwrap();
        let bad = vec![Complex64::new(1.5, 0.0); 4];
        assert!(TransferFunction::new(g.clone(), bad).is_err());
        let nan = vec![Complex64::new(f64::NAN, 0.0); 4];
        assert!(TransferFunction::new(g, nan).is_err());
    }

    #[test]
    fn csv_export_has_header_and_rows() {
        let g = make_grid(2, 0.1).unwrap();
        let mut buf = Vec::new();
        ma_mask(10.0, &g).write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "omega_rad_per_fs,re,im");
        assert_eq!(lines.len(), 5);
    }
}

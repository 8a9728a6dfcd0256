//! Simulation and analysis of energy-entangled photon pairs whose spectral
//! phase is scrambled by a random pulse-shaper mask.
//!
//! The pair state lives on a discretized difference-frequency grid
//! ([`spectral`]). Masks ([`shaper`]) act through their pair profile, the
//! coincidence signal is computed per realization ([`correlation`]) and
//! averaged over random dephasers ([`montecarlo`]); the same physics is
//! available as a density matrix ([`density`]). [`analysis`] turns traces
//! into fitted widths and decay curves.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod config;
pub mod correlation;
pub mod density;
pub mod error;
pub mod montecarlo;
pub mod shaper;
pub mod spectral;

pub use error::{Error, Result};

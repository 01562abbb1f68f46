//! Low-dose measurement simulation.
//!
//! Clean log-domain sinograms are corrupted per the compound measurement
//! model: photon counts are Poisson with mean `I_eff * exp(-y0)` plus
//! zero-mean Gaussian electronic noise of variance `sigma_e^2`, where
//! `I_eff = dose_fraction * I0`. Counts are clamped to >= 1 before the log
//! and the resulting log sinogram is clamped at zero; both clamp counts are
//! reported in [`DoseStats`].
//!
//! Sampling uses one derived sub-stream per sinogram row, so results are
//! bit-identical regardless of row-level parallelism.

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LdctError, Result};
use crate::geometry::Sinogram;

/// Dose simulation parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DoseConfig {
    /// Incident photon count I0 at full dose.
    pub incident_photons: f64,
    /// Electronic noise variance sigma_e^2 (counts^2).
    pub electronic_noise_variance: f64,
    /// Dose fraction in (0, 1]; scales I0 to the effective photon count.
    pub dose_fraction: f64,
    pub rng_seed: u64,
}

impl Default for DoseConfig {
    fn default() -> Self {
        DoseConfig {
            incident_photons: 1.5e5,
            electronic_noise_variance: 10.0,
            dose_fraction: 1.0,
            rng_seed: 0,
        }
    }
}

impl DoseConfig {
    pub fn effective_photons(&self) -> f64 {
        self.dose_fraction * self.incident_photons
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.incident_photons > 0.0) {
            return Err(LdctError::validation("incident_photons must be positive"));
        }
        if self.electronic_noise_variance < 0.0 {
            return Err(LdctError::validation(
                "electronic_noise_variance must be non-negative",
            ));
        }
        if !(self.dose_fraction > 0.0 && self.dose_fraction <= 1.0) {
            return Err(LdctError::validation("dose_fraction must lie in (0, 1]"));
        }
        if !(self.effective_photons() > 0.0) {
            return Err(LdctError::validation("effective photon count must be positive"));
        }
        Ok(())
    }
}

/// Clamp counters from one simulation run.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct DoseStats {
    /// Measurements whose noisy count fell below 1 and was clamped.
    pub clamped_counts: usize,
    /// Log values that came out negative and were clamped to 0.
    pub clamped_log: usize,
}

/// Sample one row of raw (unclamped) noisy counts. `row` indexes the
/// sub-stream.
fn sample_counts_row(y0_row: &[f64], i_eff: f64, sigma_e2: f64, seed: u64, row: usize) -> Vec<f64> {
    let mut rng = crate::rng::indexed_stream(seed, "simulate/row", row);
    let normal = (sigma_e2 > 0.0).then(|| Normal::new(0.0, sigma_e2.sqrt()).unwrap());
    y0_row
        .iter()
        .map(|&y0| {
            let lambda = i_eff * (-y0).exp();
            let mut counts = if lambda > 0.0 {
                Poisson::new(lambda).unwrap().sample(&mut rng)
            } else {
                0.0
            };
            if let Some(n) = &normal {
                counts += n.sample(&mut rng);
            }
            counts
        })
        .collect()
}

/// Raw noisy counts `Poisson(I_eff exp(-y0)) + Gaussian(0, sigma_e^2)` for
/// every measurement, before any clamping. Exposed for moment checks.
pub fn sample_counts(clean: &Sinogram, cfg: &DoseConfig) -> Result<ndarray::Array2<f64>> {
    cfg.validate()?;
    if clean.data.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(LdctError::validation(
            "clean sinogram must be finite and non-negative",
        ));
    }
    let i_eff = cfg.effective_photons();
    let rows: Vec<Vec<f64>> = (0..clean.data.nrows())
        .into_par_iter()
        .map(|r| {
            let row: Vec<f64> = clean.data.row(r).to_vec();
            sample_counts_row(&row, i_eff, cfg.electronic_noise_variance, cfg.rng_seed, r)
        })
        .collect();
    let mut counts = ndarray::Array2::zeros(clean.data.raw_dim());
    for (r, row) in rows.into_iter().enumerate() {
        for (k, v) in row.into_iter().enumerate() {
            counts[[r, k]] = v;
        }
    }
    Ok(counts)
}

/// Generate a low-dose sinogram from a clean one.
pub fn simulate_low_dose(clean: &Sinogram, cfg: &DoseConfig) -> Result<(Sinogram, DoseStats)> {
    let counts = sample_counts(clean, cfg)?;
    let i_eff = cfg.effective_photons();
    let log_i_eff = i_eff.ln();
    let mut stats = DoseStats::default();
    let data = counts.mapv(|mut c| {
        if c < 1.0 {
            c = 1.0;
            stats.clamped_counts += 1;
        }
        let y = log_i_eff - c.ln();
        if y < 0.0 {
            stats.clamped_log += 1;
            0.0
        } else {
            y
        }
    });
    let sino = Sinogram::new(data, clean.geometry.clone(), Some(cfg.dose_fraction))?;
    Ok((sino, stats))
}

/// One low-dose sinogram per fraction, with independent sub-seeds derived
/// from the base seed and the fraction index.
pub fn make_dose_series(
    clean: &Sinogram,
    fractions: &[f64],
    base_cfg: &DoseConfig,
) -> Result<Vec<Sinogram>> {
    if fractions.is_empty() {
        return Err(LdctError::validation("fraction list must be non-empty"));
    }
    for (i, &f) in fractions.iter().enumerate() {
        if !(f > 0.0 && f <= 1.0) {
            return Err(LdctError::validation(format!(
                "fraction {f} at index {i} must lie in (0, 1]"
            )));
        }
        if fractions[..i].contains(&f) {
            return Err(LdctError::validation(format!("duplicate fraction {f}")));
        }
    }
    fractions
        .iter()
        .enumerate()
        .map(|(i, &fraction)| {
            let cfg = DoseConfig {
                dose_fraction: fraction,
                rng_seed: derive_series_seed(base_cfg.rng_seed, i),
                ..base_cfg.clone()
            };
            simulate_low_dose(clean, &cfg).map(|(s, _)| s)
        })
        .collect()
}

/// Sub-seed for entry `index` of a dose series.
pub fn derive_series_seed(base_seed: u64, index: usize) -> u64 {
    crate::rng::indexed_stream(base_seed, "dose-series", index).random()
}

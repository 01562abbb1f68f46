//! Full-reference image-quality metrics under a fixed HU window.
//!
//! Both images are converted to HU, clipped to the window, and rescaled to
//! [0,1] by the window span before any metric is computed. PSNR uses the
//! window span as its peak (so `PSNR = 20 log10(span / RMSE_HU)`); RMSE is
//! reported in HU. PSNR and NQM are capped sentinels with a `finite` flag
//! when the images are (perceptually) identical.

pub mod fft2;
pub mod fsim;
pub mod nqm;
pub mod ssim;
pub mod vif;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{LdctError, Result};
use crate::geometry::{mu_to_hu, CtImage};

/// Cap applied to PSNR for identical images.
pub const PSNR_CAP_DB: f64 = 300.0;

/// Metric values for one (prediction, reference) pair.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub psnr_db: f64,
    pub psnr_finite: bool,
    /// Mean SSIM in [0,1].
    pub ssim: f64,
    /// Root-mean-square error in HU.
    pub rmse_hu: f64,
    pub fsim: f64,
    pub vif: f64,
    pub nqm_db: f64,
    pub nqm_finite: bool,
}

/// Mean and population standard deviation of each metric over a batch.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AggregateStats {
    pub psnr_db: (f64, f64),
    pub ssim: (f64, f64),
    pub rmse_hu: (f64, f64),
    pub fsim: (f64, f64),
    pub vif: (f64, f64),
    pub nqm_db: (f64, f64),
}

/// Per-case metrics plus their aggregate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    /// HU window the metrics were computed under.
    pub window: (f64, f64),
    pub per_case: Vec<CaseMetrics>,
    pub aggregate: AggregateStats,
}

/// Clip to the HU window and rescale to [0,1].
pub fn windowed01(img: &CtImage, window: (f64, f64)) -> Array2<f64> {
    let (lo, hi) = window;
    let span = hi - lo;
    img.data
        .mapv(|mu| ((mu_to_hu(mu).clamp(lo, hi)) - lo) / span)
}

/// Evaluate all six metrics for one pair.
pub fn evaluate(pred: &CtImage, reference: &CtImage, window: (f64, f64)) -> Result<CaseMetrics> {
    if pred.size() != reference.size() {
        return Err(LdctError::validation(format!(
            "image sizes differ: {} vs {}",
            pred.size(),
            reference.size()
        )));
    }
    if window.0 >= window.1 {
        return Err(LdctError::validation("window must satisfy lo < hi"));
    }
    let span = window.1 - window.0;
    let p = windowed01(pred, window);
    let r = windowed01(reference, window);

    let mse01 = p
        .iter()
        .zip(r.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / p.len() as f64;
    let rmse01 = mse01.sqrt();
    let rmse_hu = rmse01 * span;
    let (psnr_db, psnr_finite) = if rmse01 > 0.0 {
        let v = 20.0 * (1.0 / rmse01).log10();
        (v.min(PSNR_CAP_DB), v < PSNR_CAP_DB)
    } else {
        (PSNR_CAP_DB, false)
    };
    // Internal identity: PSNR and RMSE come from the same residual.
    if psnr_finite {
        let cross = 20.0 * (span / rmse_hu).log10();
        debug_assert!((cross - psnr_db).abs() <= 1e-9);
    }

    let (nqm_db, nqm_finite) = nqm::nqm(&r, &p);
    Ok(CaseMetrics {
        psnr_db,
        psnr_finite,
        ssim: ssim::ssim(&p, &r, 1.0),
        rmse_hu,
        fsim: fsim::fsim(&r, &p),
        vif: vif::vif(&r, &p),
        nqm_db,
        nqm_finite,
    })
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Aggregate a non-empty batch of per-case metrics.
pub fn aggregate(window: (f64, f64), per_case: Vec<CaseMetrics>) -> Result<MetricsReport> {
    if per_case.is_empty() {
        return Err(LdctError::validation("no cases to aggregate"));
    }
    let aggregate = AggregateStats {
        psnr_db: mean_std(per_case.iter().map(|c| c.psnr_db)),
        ssim: mean_std(per_case.iter().map(|c| c.ssim)),
        rmse_hu: mean_std(per_case.iter().map(|c| c.rmse_hu)),
        fsim: mean_std(per_case.iter().map(|c| c.fsim)),
        vif: mean_std(per_case.iter().map(|c| c.vif)),
        nqm_db: mean_std(per_case.iter().map(|c| c.nqm_db)),
    };
    Ok(MetricsReport {
        window,
        per_case,
        aggregate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{hu_to_mu, DEFAULT_HU_WINDOW};
    use rand::Rng;

    fn image_from_hu(hu: &Array2<f64>) -> CtImage {
        CtImage::new(hu.mapv(hu_to_mu), 1.0, DEFAULT_HU_WINDOW).unwrap()
    }

    fn textured(n: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, n), |(r, c)| {
            80.0 * ((r as f64 / 5.0).sin() + (c as f64 / 7.0).cos())
        })
    }

    #[test]
    fn identity_pair_maxes_out() {
        let a = image_from_hu(&textured(32));
        let m = evaluate(&a, &a, DEFAULT_HU_WINDOW).unwrap();
        assert!(!m.psnr_finite && m.psnr_db == PSNR_CAP_DB);
        assert_eq!(m.rmse_hu, 0.0);
        assert!((m.ssim - 1.0).abs() < 1e-12);
        assert!((m.fsim - 1.0).abs() < 1e-12);
        assert!((m.vif - 1.0).abs() < 1e-9);
        assert!(!m.nqm_finite);
    }

    #[test]
    fn one_percent_offset_gives_exactly_40_db() {
        let base = textured(32);
        let a = image_from_hu(&base);
        let b = image_from_hu(&base.mapv(|v| v + 40.96));
        let m = evaluate(&b, &a, DEFAULT_HU_WINDOW).unwrap();
        assert!(
            (m.psnr_db - 40.0).abs() <= 1e-9,
            "psnr {}",
            m.psnr_db
        );
        assert!((m.rmse_hu - 40.96).abs() <= 1e-9);
    }

    #[test]
    fn psnr_rmse_cross_identity() {
        let mut rng = crate::rng::stream(1, "met/x");
        let a = image_from_hu(&textured(32));
        let b = image_from_hu(&textured(32).mapv(|v| v + 30.0 * (rng.random::<f64>() - 0.5)));
        let m = evaluate(&b, &a, DEFAULT_HU_WINDOW).unwrap();
        let span = DEFAULT_HU_WINDOW.1 - DEFAULT_HU_WINDOW.0;
        let cross = 20.0 * (span / m.rmse_hu).log10();
        assert!((cross - m.psnr_db).abs() <= 1e-9);
    }

    #[test]
    fn metrics_invariant_under_prior_windowing() {
        let mut rng = crate::rng::stream(2, "met/w");
        let base = textured(32);
        let noisy = base.mapv(|v| v + 50.0 * (rng.random::<f64>() - 0.5));
        let a = image_from_hu(&base);
        let b = image_from_hu(&noisy);
        let w = DEFAULT_HU_WINDOW;
        let m1 = evaluate(&b, &a, w).unwrap();
        // Pre-clip both to the window, then evaluate again.
        let aw = image_from_hu(&base.mapv(|v| v.clamp(w.0, w.1)));
        let bw = image_from_hu(&noisy.mapv(|v| v.clamp(w.0, w.1)));
        let m2 = evaluate(&bw, &aw, w).unwrap();
        assert!((m1.psnr_db - m2.psnr_db).abs() < 1e-12);
        assert!((m1.ssim - m2.ssim).abs() < 1e-12);
        assert!((m1.fsim - m2.fsim).abs() < 1e-12);
        assert!((m1.vif - m2.vif).abs() < 1e-12);
        assert!((m1.nqm_db - m2.nqm_db).abs() < 1e-12);
    }

    #[test]
    fn aggregate_matches_hand_stats() {
        let a = image_from_hu(&textured(32));
        let b = image_from_hu(&textured(32).mapv(|v| v + 40.96));
        let c = image_from_hu(&textured(32).mapv(|v| v + 81.92));
        let m1 = evaluate(&b, &a, DEFAULT_HU_WINDOW).unwrap();
        let m2 = evaluate(&c, &a, DEFAULT_HU_WINDOW).unwrap();
        let rep = aggregate(DEFAULT_HU_WINDOW, vec![m1, m2]).unwrap();
        let mean = (m1.psnr_db + m2.psnr_db) / 2.0;
        let std = (((m1.psnr_db - mean).powi(2) + (m2.psnr_db - mean).powi(2)) / 2.0).sqrt();
        assert!((rep.aggregate.psnr_db.0 - mean).abs() < 1e-12);
        assert!((rep.aggregate.psnr_db.1 - std).abs() < 1e-12);
        assert!(aggregate(DEFAULT_HU_WINDOW, vec![]).is_err());
    }

    #[test]
    fn ranges_hold_under_distortion() {
        let mut rng = crate::rng::stream(3, "met/r");
        let a = image_from_hu(&textured(32));
        let b = image_from_hu(&textured(32).mapv(|v| v + 200.0 * (rng.random::<f64>() - 0.5)));
        let m = evaluate(&b, &a, DEFAULT_HU_WINDOW).unwrap();
        for v in [m.ssim, m.fsim, m.vif] {
            assert!((0.0..=1.0).contains(&v), "metric out of range: {v}");
        }
        assert!(m.rmse_hu > 0.0 && m.psnr_finite && m.nqm_finite);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = image_from_hu(&textured(32));
        let b = image_from_hu(&textured(16));
        assert!(evaluate(&b, &a, DEFAULT_HU_WINDOW).is_err());
        assert!(evaluate(&a, &a, (100.0, 100.0)).is_err());
    }
}

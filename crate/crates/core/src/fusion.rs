//! Pixel-level self-correcting fusion and dose-shift policy.
//!
//! The low-dose image and the projection-stage prior are blended per pixel:
//! `lambda = clip(C_e + C_n + b, 0, 1)` where `C_e = sigmoid(k2 (G - tau_e))`
//! is edge confidence from the prior's Sobel gradient magnitude,
//! `C_n = sigmoid(k1 (N - tau_n))` is noise confidence from the low-dose
//! image's local noise level, and `b` is the tunable dose shift. The fused
//! image is `x_hat0 + lambda * (x_ld - x_hat0)`, which is bitwise `x` when
//! both inputs are `x` and reduces to the unshifted rule at `b = 0`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{LdctError, Result};
use crate::geometry::CtImage;
use crate::util::percentile;

/// Fusion parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Sigmoid slope of the noise confidence.
    pub k1: f64,
    /// Sigmoid slope of the edge confidence.
    pub k2: f64,
    /// Edge-confidence threshold on the normalized gradient.
    pub tau_e: f64,
    /// Noise-confidence threshold on the normalized noise level.
    pub tau_n: f64,
    /// Dose shift b in [-1, 1]; positive favours the low-dose image.
    pub dose_shift: f64,
    /// Window (odd, >= 3) of the local noise estimator.
    pub noise_window: usize,
    /// Gradient operator name; only "sobel" is implemented.
    pub gradient_operator: String,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            k1: 10.0,
            k2: 10.0,
            tau_e: 0.15,
            tau_n: 0.3,
            dose_shift: 0.0,
            noise_window: 7,
            gradient_operator: "sobel".into(),
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1 > 0.0 && self.k2 > 0.0) {
            return Err(LdctError::validation("k1 and k2 must be positive"));
        }
        if !(-1.0..=1.0).contains(&self.dose_shift) {
            return Err(LdctError::validation("dose_shift must lie in [-1, 1]"));
        }
        if self.noise_window < 3 || self.noise_window % 2 == 0 {
            return Err(LdctError::validation("noise_window must be odd and >= 3"));
        }
        if self.gradient_operator != "sobel" {
            return Err(LdctError::configuration(format!(
                "unsupported gradient operator {}",
                self.gradient_operator
            )));
        }
        Ok(())
    }
}

/// Per-pixel fusion weights and their ingredients.
#[derive(Debug, Clone)]
pub struct FusionWeightMap {
    pub lambda: Array2<f64>,
    pub c_e: Array2<f64>,
    pub c_n: Array2<f64>,
    /// Normalized gradient magnitude of the prior.
    pub g: Array2<f64>,
    /// Normalized noise level of the low-dose image.
    pub n: Array2<f64>,
}

/// Sobel gradient magnitude with replicate-edge padding, unnormalized.
pub fn sobel_magnitude_replicate(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let at = |r: isize, c: isize| -> f64 {
        let r = r.clamp(0, h as isize - 1) as usize;
        let c = c.clamp(0, w as isize - 1) as usize;
        img[[r, c]]
    };
    // Paired differences cancel exactly on constant inputs.
    Array2::from_shape_fn((h, w), |(r, c)| {
        let (r, c) = (r as isize, c as isize);
        let gx = (at(r - 1, c + 1) - at(r - 1, c - 1))
            + 2.0 * (at(r, c + 1) - at(r, c - 1))
            + (at(r + 1, c + 1) - at(r + 1, c - 1));
        let gy = (at(r + 1, c - 1) - at(r - 1, c - 1))
            + 2.0 * (at(r + 1, c) - at(r - 1, c))
            + (at(r + 1, c + 1) - at(r - 1, c + 1));
        (gx * gx + gy * gy).sqrt()
    })
}

/// Guard added to the normalizing percentile so that numerically flat maps
/// normalize to ~0 instead of amplifying rounding noise.
const NORMALIZATION_GUARD: f64 = 1e-6;

fn normalize_by_q99(map: &Array2<f64>) -> Array2<f64> {
    let q99 = percentile(map, 0.99);
    map.mapv(|v| (v / (q99 + NORMALIZATION_GUARD)).clamp(0.0, 1.0))
}

/// Sobel magnitude of the image, normalized to [0,1] by its (clipped)
/// 99th percentile.
pub fn gradient_magnitude(img: &CtImage) -> Array2<f64> {
    normalize_by_q99(&sobel_magnitude_replicate(&img.data))
}

/// Local standard deviation of the high-pass residual (image minus a
/// Gaussian blur with sigma = window/6), before normalization. Estimates
/// are computed where the full window fits and replicated outward, so
/// smooth ramps yield ~0 everywhere.
pub fn local_noise_std(img: &Array2<f64>, window: usize) -> Result<Array2<f64>> {
    let (h, w) = img.dim();
    if window < 3 || window % 2 == 0 {
        return Err(LdctError::validation("window must be odd and >= 3"));
    }
    if 2 * window - 1 > h || 2 * window - 1 > w {
        return Err(LdctError::validation(format!(
            "window {window} too large for {h}x{w} image (needs at least {}x{})",
            2 * window - 1,
            2 * window - 1
        )));
    }
    let half = window / 2;
    let sigma = window as f64 / 6.0;
    let mut kernel = Array2::zeros((window, window));
    let mut ksum = 0.0;
    for y in 0..window {
        for x in 0..window {
            let dy = y as f64 - half as f64;
            let dx = x as f64 - half as f64;
            let v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            kernel[[y, x]] = v;
            ksum += v;
        }
    }
    kernel.mapv_inplace(|v| v / ksum);

    // Blur and residual on the interior where the full window fits.
    let mut residual = Array2::zeros((h, w));
    for r in half..h - half {
        for c in half..w - half {
            let mut b = 0.0;
            for y in 0..window {
                for x in 0..window {
                    b += kernel[[y, x]] * img[[r + y - half, c + x - half]];
                }
            }
            residual[[r, c]] = img[[r, c]] - b;
        }
    }
    // Windowed std of the residual where the residual window is fully valid.
    let lo = 2 * half;
    let hi_r = h - 1 - 2 * half;
    let hi_c = w - 1 - 2 * half;
    let mut std_map = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let rr = r.clamp(lo, hi_r);
            let cc = c.clamp(lo, hi_c);
            let mut s = 0.0;
            let mut s2 = 0.0;
            for y in 0..window {
                for x in 0..window {
                    let v = residual[[rr + y - half, cc + x - half]];
                    s += v;
                    s2 += v * v;
                }
            }
            let n = (window * window) as f64;
            let var = (s2 / n - (s / n) * (s / n)).max(0.0);
            std_map[[r, c]] = var.sqrt();
        }
    }
    Ok(std_map)
}

/// Local noise level normalized to [0,1] by its (clipped) 99th percentile.
pub fn noise_level(img: &CtImage, window: usize) -> Result<Array2<f64>> {
    Ok(normalize_by_q99(&local_noise_std(&img.data, window)?))
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Fusion given precomputed normalized statistics (exposed for the
/// hand-evaluated contract tests).
pub fn fuse_from_stats(
    x_ld: &Array2<f64>,
    x_hat0: &Array2<f64>,
    g_norm: &Array2<f64>,
    n_norm: &Array2<f64>,
    cfg: &FusionConfig,
) -> Result<(Array2<f64>, FusionWeightMap)> {
    cfg.validate()?;
    let shape = x_ld.dim();
    if x_hat0.dim() != shape || g_norm.dim() != shape || n_norm.dim() != shape {
        return Err(LdctError::validation("fusion inputs must share one shape"));
    }
    let c_e = g_norm.mapv(|g| sigmoid(cfg.k2 * (g - cfg.tau_e)));
    let c_n = n_norm.mapv(|n| sigmoid(cfg.k1 * (n - cfg.tau_n)));
    let lambda =
        Array2::from_shape_fn(shape, |i| (c_e[i] + c_n[i] + cfg.dose_shift).clamp(0.0, 1.0));
    if lambda.iter().all(|&l| l == 1.0) {
        return Err(LdctError::validation(
            "fusion weights are identically 1; the fused image would ignore the prior",
        ));
    }
    let fused = Array2::from_shape_fn(shape, |i| x_hat0[i] + lambda[i] * (x_ld[i] - x_hat0[i]));
    Ok((
        fused,
        FusionWeightMap {
            lambda,
            c_e,
            c_n,
            g: g_norm.clone(),
            n: n_norm.clone(),
        },
    ))
}

/// Pixel-level self-correcting fusion of the low-dose image and the prior.
pub fn fuse(
    x_ld: &CtImage,
    x_hat0: &CtImage,
    cfg: &FusionConfig,
) -> Result<(CtImage, FusionWeightMap)> {
    cfg.validate()?;
    if x_ld.size() != x_hat0.size() {
        return Err(LdctError::validation(format!(
            "image sizes differ: {} vs {}",
            x_ld.size(),
            x_hat0.size()
        )));
    }
    let g = gradient_magnitude(x_hat0);
    let n = noise_level(x_ld, cfg.noise_window)?;
    let (fused, map) = fuse_from_stats(&x_ld.data, &x_hat0.data, &g, &n, cfg)?;
    Ok((
        CtImage::new(fused, x_ld.pixel_spacing, x_ld.hu_window)?,
        map,
    ))
}

/// Additive dose shift: `b = 0.25 * log2(test/train)` clipped to [-0.5, 0.5].
/// Negative for lower test dose (favour the prior), positive for higher.
pub fn dose_shift_policy(train_dose: f64, test_dose: f64) -> Result<f64> {
    for (name, d) in [("train_dose", train_dose), ("test_dose", test_dose)] {
        if !(d > 0.0 && d <= 1.0) {
            return Err(LdctError::validation(format!("{name} must lie in (0, 1]")));
        }
    }
    Ok((0.25 * (test_dose / train_dose).log2()).clamp(-0.5, 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::DEFAULT_HU_WINDOW;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn img(data: Array2<f64>) -> CtImage {
        CtImage::new(data, 1.0, DEFAULT_HU_WINDOW).unwrap()
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let gm = gradient_magnitude(&img(Array2::from_elem((16, 16), 0.02)));
        assert!(gm.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn step_edge_maximizes_on_edge_column() {
        let data = Array2::from_shape_fn((16, 16), |(_, c)| if c < 8 { 0.0 } else { 1.0 });
        let raw = sobel_magnitude_replicate(&data);
        // Largest response must sit on the columns adjacent to the step.
        for r in 1..15 {
            let best = (0..16).max_by(|&a, &b| raw[[r, a]].partial_cmp(&raw[[r, b]]).unwrap());
            assert!(matches!(best, Some(7) | Some(8)), "row {r}: {best:?}");
        }
    }

    #[test]
    fn sobel_matches_analytic_values_on_ramp() {
        // img(x,y) = 3x + 2y: interior gx = 8*3, gy = 8*2.
        let data = Array2::from_shape_fn((5, 5), |(r, c)| 3.0 * c as f64 + 2.0 * r as f64);
        let raw = sobel_magnitude_replicate(&data);
        let expected = ((24.0_f64).powi(2) + (16.0_f64).powi(2)).sqrt();
        for r in 1..4 {
            for c in 1..4 {
                assert!(
                    (raw[[r, c]] - expected).abs() <= 1e-6,
                    "({r},{c}): {} vs {expected}",
                    raw[[r, c]]
                );
            }
        }
    }

    #[test]
    fn noise_level_of_constant_is_zero_and_window_validated() {
        let image = img(Array2::from_elem((32, 32), 0.019));
        let n = noise_level(&image, 7).unwrap();
        assert!(n.iter().all(|&v| v == 0.0));
        assert!(noise_level(&image, 6).is_err());
        assert!(noise_level(&image, 33).is_err());
    }

    #[test]
    fn noisier_input_has_larger_pre_normalization_estimate() {
        let mut rng = crate::rng::stream(2, "fusion/noise");
        let normal = Normal::new(0.0, 1.0).unwrap();
        let strong = Array2::from_shape_fn((32, 32), |_| normal.sample(&mut rng));
        let weak = strong.mapv(|v| v * (0.1_f64).sqrt());
        let s = local_noise_std(&strong, 7).unwrap();
        let w = local_noise_std(&weak, 7).unwrap();
        let mean = |a: &Array2<f64>| a.iter().sum::<f64>() / a.len() as f64;
        assert!(mean(&s) > mean(&w));
    }

    #[test]
    fn smooth_ramp_has_near_zero_noise_level() {
        let data = Array2::from_shape_fn((32, 32), |(r, c)| 0.001 * (r as f64 + 2.0 * c as f64));
        let n = noise_level(&img(data), 7).unwrap();
        assert!(
            n.iter().all(|&v| v < 0.05),
            "max {}",
            n.iter().cloned().fold(0.0, f64::max)
        );
    }

    #[test]
    fn fusing_an_image_with_itself_is_identity() {
        // Smooth disk on a background, plus mild noise in one quadrant so
        // the weight map is heterogeneous.
        let mut rng = crate::rng::stream(3, "fusion/self");
        let data = Array2::from_shape_fn((32, 32), |(r, c)| {
            let d = ((r as f64 - 16.0).powi(2) + (c as f64 - 16.0).powi(2)).sqrt();
            let base = if d < 10.0 { 0.022 } else { 0.019 };
            let noise = if r < 16 && c < 16 {
                2e-4 * (rng.random::<f64>() - 0.5)
            } else {
                0.0
            };
            base + noise
        });
        let a = img(data);
        let (fused, map) = fuse(&a, &a, &FusionConfig::default()).unwrap();
        assert_eq!(fused.data, a.data);
        assert!(map.lambda.iter().all(|&l| (0.0..=1.0).contains(&l)));
    }

    #[test]
    fn midpoint_stats_trigger_all_ones_contract_error() {
        let cfg = FusionConfig::default();
        let g = Array2::from_elem((4, 4), cfg.tau_e);
        let n = Array2::from_elem((4, 4), cfg.tau_n);
        let x = Array2::zeros((4, 4));
        let err = fuse_from_stats(&x, &x, &g, &n, &cfg).unwrap_err();
        assert!(format!("{err}").contains("identically 1"));
    }

    #[test]
    fn lambda_matches_hand_evaluated_sigmoids() {
        let cfg = FusionConfig {
            k1: 10.0,
            k2: 10.0,
            ..FusionConfig::default()
        };
        let g = Array2::from_shape_fn((4, 4), |(r, c)| 0.05 * (r * 4 + c) as f64);
        let n = Array2::from_shape_fn((4, 4), |(r, c)| 0.06 * (c * 4 + r) as f64);
        let x = Array2::zeros((4, 4));
        let y = Array2::ones((4, 4));
        let (_, map) = fuse_from_stats(&x, &y, &g, &n, &cfg).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let ce = 1.0 / (1.0 + (-(10.0 * (g[[r, c]] - 0.15))).exp());
                let cn = 1.0 / (1.0 + (-(10.0 * (n[[r, c]] - 0.3))).exp());
                let lam = (ce + cn).clamp(0.0, 1.0);
                assert!(
                    (map.lambda[[r, c]] - lam).abs() <= 1e-6,
                    "({r},{c}): {} vs {lam}",
                    map.lambda[[r, c]]
                );
            }
        }
    }

    #[test]
    fn zero_shift_is_bit_identical_to_unshifted_rule() {
        let mut rng = crate::rng::stream(4, "fusion/b0");
        let x = Array2::from_shape_fn((16, 16), |_| rng.random::<f64>());
        let y = Array2::from_shape_fn((16, 16), |_| rng.random::<f64>());
        let g = Array2::from_shape_fn((16, 16), |_| rng.random::<f64>());
        let n = Array2::from_shape_fn((16, 16), |_| rng.random::<f64>());
        let cfg0 = FusionConfig::default();
        let (f0, m0) = fuse_from_stats(&x, &y, &g, &n, &cfg0).unwrap();
        // Reference: the rule written without any shift term.
        for ((i, &l), &f) in m0.lambda.indexed_iter().zip(f0.iter()) {
            let ce = m0.c_e[i];
            let cn = m0.c_n[i];
            assert_eq!(l, (ce + cn).clamp(0.0, 1.0));
            assert_eq!(f, y[i] + l * (x[i] - y[i]));
        }
    }

    #[test]
    fn lambda_is_monotone_in_shift_and_noise() {
        let mut rng = crate::rng::stream(5, "fusion/mono");
        let x = Array2::zeros((8, 8));
        let g = Array2::from_shape_fn((8, 8), |_| rng.random::<f64>());
        let mut n = Array2::from_shape_fn((8, 8), |_| 0.5 * rng.random::<f64>());
        let lam = |b: f64, n: &Array2<f64>| {
            let cfg = FusionConfig {
                dose_shift: b,
                ..FusionConfig::default()
            };
            fuse_from_stats(&x, &x, &g, n, &cfg).unwrap().1.lambda
        };
        let l_neg = lam(-0.3, &n);
        let l_zero = lam(0.0, &n);
        let l_pos = lam(0.3, &n);
        for i in 0..64 {
            let idx = (i / 8, i % 8);
            assert!(l_neg[idx] <= l_zero[idx] && l_zero[idx] <= l_pos[idx]);
        }
        let before = lam(0.0, &n);
        n[[3, 3]] += 0.2;
        let after = lam(0.0, &n);
        assert!(after[[3, 3]] >= before[[3, 3]]);
    }

    #[test]
    fn dose_shift_policy_direction_and_values() {
        assert_eq!(dose_shift_policy(0.25, 0.25).unwrap(), 0.0);
        assert!(dose_shift_policy(0.25, 0.10).unwrap() < 0.0);
        let up = dose_shift_policy(0.25, 0.50).unwrap();
        assert!((up - 0.25).abs() < 1e-12);
        assert_eq!(dose_shift_policy(1.0, 1.0 / 16.0).unwrap(), -0.5);
        assert!(dose_shift_policy(0.0, 0.5).is_err());
        assert!(dose_shift_policy(0.5, 1.5).is_err());
    }
}

//! Noise quality measure (higher is better).
//!
//! Both images pass through a cosine-log octave decomposition (bands
//! centred at 2..32 cycles/image plus a lowpass), band contrasts are formed
//! against the running lowpass (Peli contrast), sub-threshold contrasts are
//! removed using a Mannos-Sakrison contrast sensitivity model at the band's
//! frequency in cycles/degree (the image is assumed to subtend
//! `VIEWING_ANGLE_DEG`), and the score is the SNR in dB between the two
//! reconstructed "perceived" images. Identical inputs produce an infinite
//! SNR, reported through a capped sentinel.

use ndarray::Array2;

use super::fft2::{fft2, freq_coord, ifft2};

/// Assumed angular size of the image.
pub const VIEWING_ANGLE_DEG: f64 = 4.0;

/// Octave band centres in cycles/image (2^k for k = 1..=5).
const NUM_BANDS: usize = 5;

/// Cap applied to the dB score when the images are identical.
pub const NQM_CAP_DB: f64 = 300.0;

/// Contrast sensitivity (Mannos-Sakrison form) at `f` cycles/degree.
fn csf(f: f64) -> f64 {
    2.6 * (0.0192 + 0.114 * f) * (-(0.114 * f).powf(1.1)).exp()
}

/// Detection threshold for band contrast at `f` cycles/degree.
fn contrast_threshold(f: f64) -> f64 {
    1.0 / (200.0 * csf(f).max(1e-6))
}

/// Radial cosine-log band weight for band k (centres 2^k), and the lowpass
/// weight for k = 0.
fn band_weight(r: f64, k: usize) -> f64 {
    if k == 0 {
        if r <= 1.0 {
            1.0
        } else if r <= 2.0 {
            0.5 * (1.0 + (std::f64::consts::PI * r.log2()).cos())
        } else {
            0.0
        }
    } else {
        let lo = 2.0_f64.powi(k as i32 - 1);
        let hi = 2.0_f64.powi(k as i32 + 1);
        if r > lo && r <= hi {
            0.5 * (1.0 + (std::f64::consts::PI * (r.log2() - k as f64)).cos())
        } else {
            0.0
        }
    }
}

/// Decompose into lowpass (index 0) plus band images.
fn decompose(img: &Array2<f64>) -> Vec<Array2<f64>> {
    let (h, w) = img.dim();
    let spectrum = fft2(img);
    (0..=NUM_BANDS)
        .map(|k| {
            let mut filtered = spectrum.clone();
            for r in 0..h {
                for c in 0..w {
                    let fy = freq_coord(r, h);
                    let fx = freq_coord(c, w);
                    let radius = (fx * fx + fy * fy).sqrt();
                    filtered[[r, c]] *= band_weight(radius, k);
                }
            }
            ifft2(&filtered).mapv(|v| v.re)
        })
        .collect()
}

/// Reconstruct the perceived image: lowpass plus supra-threshold bands.
fn perceived(img: &Array2<f64>) -> Array2<f64> {
    let bands = decompose(img);
    let mut lowpass = bands[0].clone();
    let mut out = bands[0].clone();
    for k in 1..=NUM_BANDS {
        let f_cpd = 2.0_f64.powi(k as i32) / VIEWING_ANGLE_DEG;
        let t = contrast_threshold(f_cpd);
        for i in 0..out.len() {
            let idx = (i / out.ncols(), i % out.ncols());
            let base = lowpass[idx].abs().max(1e-6);
            let contrast = bands[k][idx] / base;
            if contrast.abs() >= t {
                out[idx] += bands[k][idx];
            }
        }
        lowpass = &lowpass + &bands[k];
    }
    out
}

/// NQM in dB of `dist` against `reference`, both in [0,1]. Returns
/// `(value_db, finite)`; identical perceived images return the cap with
/// `finite = false`.
pub fn nqm(reference01: &Array2<f64>, dist01: &Array2<f64>) -> (f64, bool) {
    assert_eq!(reference01.dim(), dist01.dim());
    let o = perceived(&reference01.mapv(|v| v * 255.0));
    let i = perceived(&dist01.mapv(|v| v * 255.0));
    let signal: f64 = o.iter().map(|v| v * v).sum();
    let noise: f64 = o
        .iter()
        .zip(i.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    if noise <= 0.0 || signal <= 0.0 {
        return (NQM_CAP_DB, false);
    }
    let db = 10.0 * (signal / noise).log10();
    (db.min(NQM_CAP_DB), db < NQM_CAP_DB)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn test_image(n: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, n), |(r, c)| {
            0.4 + 0.3 * ((r as f64 / 6.0).sin() + (c as f64 / 9.0).cos()) / 2.0
        })
    }

    #[test]
    fn identity_hits_the_cap() {
        let a = test_image(32);
        let (v, finite) = nqm(&a, &a);
        assert_eq!(v, NQM_CAP_DB);
        assert!(!finite);
    }

    #[test]
    fn more_noise_means_lower_nqm() {
        let a = test_image(64);
        let mut rng = crate::rng::stream(9, "nqm/n");
        let mild = a.mapv(|v| v + 0.02 * (rng.random::<f64>() - 0.5));
        let heavy = a.mapv(|v| v + 0.2 * (rng.random::<f64>() - 0.5));
        let (v1, f1) = nqm(&a, &mild);
        let (v2, f2) = nqm(&a, &heavy);
        assert!(f1 && f2);
        assert!(v1 > v2, "mild {v1} dB vs heavy {v2} dB");
    }
}

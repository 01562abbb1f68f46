//! Feature similarity index.
//!
//! Combines phase congruency (log-Gabor filter bank: 4 scales, 4
//! orientations, smallest wavelength 6, scale multiplier 2, sigmaOnf 0.55,
//! angular spread sigma pi/4/1.2, noise gain k = 2) with Scharr gradient
//! magnitude. Similarity constants T1 = 0.85 and T2 = 160 assume a 0..255
//! intensity scale, so inputs in [0,1] are scaled by 255. Images whose
//! short side exceeds 256 are average-pooled by `round(min(h,w)/256)`
//! first. The phase-congruency noise floor uses the median response of the
//! smallest-scale filter per orientation.

use ndarray::Array2;

use super::fft2::{fft2, freq_coord, ifft2, C64};

const NSCALE: usize = 4;
const NORIENT: usize = 4;
const MIN_WAVELENGTH: f64 = 6.0;
const MULT: f64 = 2.0;
const SIGMA_ONF: f64 = 0.55;
const D_THETA_ON_SIGMA: f64 = 1.2;
const NOISE_K: f64 = 2.0;
const EPSILON: f64 = 1e-4;
const T1: f64 = 0.85;
const T2: f64 = 160.0;

/// Phase congruency map of one image.
fn phase_congruency(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let spectrum = fft2(img);

    // Normalized radius and angle of every frequency sample.
    let mut radius = Array2::zeros((h, w));
    let mut theta = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let fy = freq_coord(r, h) / h as f64;
            let fx = freq_coord(c, w) / w as f64;
            radius[[r, c]] = (fx * fx + fy * fy).sqrt();
            theta[[r, c]] = (-fy).atan2(fx);
        }
    }
    radius[[0, 0]] = 1.0; // avoid log(0) at DC; filter value is zeroed there

    let sigma_theta = std::f64::consts::PI / NORIENT as f64 / D_THETA_ON_SIGMA;
    let mut total_energy = Array2::<f64>::zeros((h, w));
    let mut total_sum_an = Array2::<f64>::zeros((h, w));

    for o in 0..NORIENT {
        let angle = o as f64 * std::f64::consts::PI / NORIENT as f64;
        // Angular spread around this orientation.
        let spread = Array2::from_shape_fn((h, w), |(r, c)| {
            let ds = theta[[r, c]].sin() * angle.cos() - theta[[r, c]].cos() * angle.sin();
            let dc = theta[[r, c]].cos() * angle.cos() + theta[[r, c]].sin() * angle.sin();
            let dtheta = ds.atan2(dc).abs();
            (-dtheta * dtheta / (2.0 * sigma_theta * sigma_theta)).exp()
        });

        let mut sum_e = Array2::<f64>::zeros((h, w));
        let mut sum_o = Array2::<f64>::zeros((h, w));
        let mut sum_an = Array2::<f64>::zeros((h, w));
        let mut responses: Vec<(Array2<f64>, Array2<f64>)> = Vec::with_capacity(NSCALE);

        for s in 0..NSCALE {
            let wavelength = MIN_WAVELENGTH * MULT.powi(s as i32);
            let f0 = 1.0 / wavelength;
            let log_sigma = SIGMA_ONF.ln();
            let mut filt = Array2::zeros((h, w));
            for r in 0..h {
                for c in 0..w {
                    let lg = ((radius[[r, c]] / f0).ln()).powi(2)
                        / (2.0 * log_sigma * log_sigma);
                    filt[[r, c]] = (-lg).exp() * spread[[r, c]];
                }
            }
            filt[[0, 0]] = 0.0;
            let mut filtered = Array2::from_elem((h, w), C64::new(0.0, 0.0));
            for r in 0..h {
                for c in 0..w {
                    filtered[[r, c]] = spectrum[[r, c]] * filt[[r, c]];
                }
            }
            let eo = ifft2(&filtered);
            let re = eo.mapv(|v| v.re);
            let im = eo.mapv(|v| v.im);
            for r in 0..h {
                for c in 0..w {
                    let a = (re[[r, c]].powi(2) + im[[r, c]].powi(2)).sqrt();
                    sum_an[[r, c]] += a;
                    sum_e[[r, c]] += re[[r, c]];
                    sum_o[[r, c]] += im[[r, c]];
                }
            }
            responses.push((re, im));
        }

        // Energy along the principal phase direction.
        let mut energy = Array2::<f64>::zeros((h, w));
        for r in 0..h {
            for c in 0..w {
                let x = (sum_e[[r, c]].powi(2) + sum_o[[r, c]].powi(2)).sqrt() + EPSILON;
                let me = sum_e[[r, c]] / x;
                let mo = sum_o[[r, c]] / x;
                let mut acc = 0.0;
                for (re, im) in &responses {
                    acc += re[[r, c]] * me + im[[r, c]] * mo
                        - (re[[r, c]] * mo - im[[r, c]] * me).abs();
                }
                energy[[r, c]] = acc;
            }
        }

        // Noise floor from the smallest-scale amplitude distribution.
        let mut a1: Vec<f64> = responses[0]
            .0
            .iter()
            .zip(responses[0].1.iter())
            .map(|(re, im)| re * re + im * im)
            .collect();
        a1.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median_a1sq = a1[a1.len() / 2];
        let tau = (median_a1sq / (4.0_f64).ln()).sqrt();
        // Total noise amplitude accumulates over scales falling off as 1/mult^s.
        let scale_sum: f64 = (0..NSCALE).map(|s| 1.0 / MULT.powi(s as i32)).sum();
        let tau_total = tau * scale_sum;
        let est_noise = tau_total * (std::f64::consts::PI / 2.0).sqrt();
        let est_sigma = (tau_total * tau_total * (2.0 - std::f64::consts::PI / 2.0)).sqrt();
        let t = est_noise + NOISE_K * est_sigma;

        for r in 0..h {
            for c in 0..w {
                total_energy[[r, c]] += (energy[[r, c]] - t).max(0.0);
                total_sum_an[[r, c]] += sum_an[[r, c]];
            }
        }
    }

    Array2::from_shape_fn((h, w), |i| total_energy[i] / (total_sum_an[i] + EPSILON))
}

/// Scharr gradient magnitude (kernel [3 0 -3; 10 0 -10; 3 0 -3] / 16).
fn scharr_magnitude(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let at = |r: isize, c: isize| -> f64 {
        let r = r.clamp(0, h as isize - 1) as usize;
        let c = c.clamp(0, w as isize - 1) as usize;
        img[[r, c]]
    };
    Array2::from_shape_fn((h, w), |(r, c)| {
        let (r, c) = (r as isize, c as isize);
        let gx = (3.0 * (at(r - 1, c - 1) - at(r - 1, c + 1))
            + 10.0 * (at(r, c - 1) - at(r, c + 1))
            + 3.0 * (at(r + 1, c - 1) - at(r + 1, c + 1)))
            / 16.0;
        let gy = (3.0 * (at(r - 1, c - 1) - at(r + 1, c - 1))
            + 10.0 * (at(r - 1, c) - at(r + 1, c))
            + 3.0 * (at(r - 1, c + 1) - at(r + 1, c + 1)))
            / 16.0;
        (gx * gx + gy * gy).sqrt()
    })
}

fn downsample(img: &Array2<f64>, f: usize) -> Array2<f64> {
    if f <= 1 {
        return img.clone();
    }
    let (h, w) = (img.nrows() / f, img.ncols() / f);
    Array2::from_shape_fn((h, w), |(r, c)| {
        let mut s = 0.0;
        for y in 0..f {
            for x in 0..f {
                s += img[[r * f + y, c * f + x]];
            }
        }
        s / (f * f) as f64
    })
}

/// FSIM between two images in [0,1].
pub fn fsim(a01: &Array2<f64>, b01: &Array2<f64>) -> f64 {
    assert_eq!(a01.dim(), b01.dim());
    let a = a01.mapv(|v| v * 255.0);
    let b = b01.mapv(|v| v * 255.0);
    let min_dim = a.nrows().min(a.ncols());
    let f = ((min_dim as f64 / 256.0).round() as usize).max(1);
    let a = downsample(&a, f);
    let b = downsample(&b, f);

    let pc1 = phase_congruency(&a);
    let pc2 = phase_congruency(&b);
    let g1 = scharr_magnitude(&a);
    let g2 = scharr_magnitude(&b);

    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..a.len() {
        let idx = (i / a.ncols(), i % a.ncols());
        let s_pc =
            (2.0 * pc1[idx] * pc2[idx] + T1) / (pc1[idx].powi(2) + pc2[idx].powi(2) + T1);
        let s_g = (2.0 * g1[idx] * g2[idx] + T2) / (g1[idx].powi(2) + g2[idx].powi(2) + T2);
        let pcm = pc1[idx].max(pc2[idx]);
        num += s_pc * s_g * pcm;
        den += pcm;
    }
    if den <= 0.0 {
        return 1.0; // two featureless images
    }
    (num / den).clamp(0.0, 1.0)
}

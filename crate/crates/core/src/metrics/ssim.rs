//! Mean structural similarity with the standard constants
//! (K1 = 0.01, K2 = 0.03, 11x11 Gaussian window of sigma 1.5, valid mode).
//! Images smaller than the window fall back to the largest odd window that
//! fits, with sigma scaled proportionally.

use ndarray::Array2;

fn gaussian_kernel(win: usize) -> Array2<f64> {
    let sigma = 1.5 * win as f64 / 11.0;
    let half = (win / 2) as f64;
    let mut k = Array2::zeros((win, win));
    let mut sum = 0.0;
    for y in 0..win {
        for x in 0..win {
            let dy = y as f64 - half;
            let dx = x as f64 - half;
            let v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            k[[y, x]] = v;
            sum += v;
        }
    }
    k.mapv(|v| v / sum)
}

fn window_size(h: usize, w: usize) -> usize {
    let win = 11usize.min(h).min(w);
    if win % 2 == 0 {
        win - 1
    } else {
        win
    }
}

/// Mean SSIM of two equally-shaped images over `data_range`.
pub fn ssim(a: &Array2<f64>, b: &Array2<f64>, data_range: f64) -> f64 {
    assert_eq!(a.dim(), b.dim());
    let (h, w) = a.dim();
    let win = window_size(h, w);
    let k = gaussian_kernel(win);
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let (oh, ow) = (h - win + 1, w - win + 1);
    let mut total = 0.0;
    for oy in 0..oh {
        for ox in 0..ow {
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            let mut e11 = 0.0;
            let mut e22 = 0.0;
            let mut e12 = 0.0;
            for y in 0..win {
                for x in 0..win {
                    let kv = k[[y, x]];
                    let va = a[[oy + y, ox + x]];
                    let vb = b[[oy + y, ox + x]];
                    m1 += kv * va;
                    m2 += kv * vb;
                    e11 += kv * va * va;
                    e22 += kv * vb * vb;
                    e12 += kv * va * vb;
                }
            }
            let v1 = e11 - m1 * m1;
            let v2 = e22 - m2 * m2;
            let cv = e12 - m1 * m2;
            total += ((2.0 * m1 * m2 + c1) * (2.0 * cv + c2))
                / ((m1 * m1 + m2 * m2 + c1) * (v1 + v2 + c2));
        }
    }
    total / (oh * ow) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn identity_is_one_and_symmetric() {
        let mut rng = crate::rng::stream(1, "ssim/t");
        let a = Array2::from_shape_fn((32, 32), |_| rng.random::<f64>());
        let b = Array2::from_shape_fn((32, 32), |_| rng.random::<f64>());
        assert!((ssim(&a, &a, 1.0) - 1.0).abs() < 1e-12);
        assert!((ssim(&a, &b, 1.0) - ssim(&b, &a, 1.0)).abs() <= 1e-9);
    }

    #[test]
    fn noise_lowers_ssim() {
        let mut rng = crate::rng::stream(2, "ssim/n");
        let a = Array2::from_shape_fn((32, 32), |(r, c)| ((r + c) as f64 / 64.0));
        let b = a.mapv(|v| v + 0.1 * (rng.random::<f64>() - 0.5));
        let s = ssim(&a, &b, 1.0);
        assert!(s < 0.99 && s > 0.0);
    }
}

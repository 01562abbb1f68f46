//! Pixel-domain visual information fidelity (multi-scale).
//!
//! Four scales with Gaussian windows of size 2^(4-k+1)+1 and sigma N/5;
//! between scales both images are low-passed and decimated by 2. The
//! additive-noise variance constant sigma_n^2 = 2 assumes a 0..255 scale,
//! so [0,1] inputs are scaled by 255.

use ndarray::Array2;

const SIGMA_NSQ: f64 = 2.0;

fn gaussian(n: usize) -> Array2<f64> {
    let sigma = n as f64 / 5.0;
    let half = (n / 2) as f64;
    let mut k = Array2::zeros((n, n));
    let mut sum = 0.0;
    for y in 0..n {
        for x in 0..n {
            let dy = y as f64 - half;
            let dx = x as f64 - half;
            let v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            k[[y, x]] = v;
            sum += v;
        }
    }
    k.mapv(|v| v / sum)
}

/// Valid-mode correlation with a kernel.
fn filter_valid(img: &Array2<f64>, k: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let (kh, kw) = k.dim();
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    Array2::from_shape_fn((oh, ow), |(r, c)| {
        let mut s = 0.0;
        for y in 0..kh {
            for x in 0..kw {
                s += k[[y, x]] * img[[r + y, c + x]];
            }
        }
        s
    })
}

fn decimate2(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h.div_ceil(2), w.div_ceil(2)), |(r, c)| img[[2 * r, 2 * c]])
}

/// VIF of `dist` against `reference`, both in [0,1]. Clamped to [0,1].
pub fn vif(reference01: &Array2<f64>, dist01: &Array2<f64>) -> f64 {
    assert_eq!(reference01.dim(), dist01.dim());
    let mut reference = reference01.mapv(|v| v * 255.0);
    let mut dist = dist01.mapv(|v| v * 255.0);
    let mut num = 0.0;
    let mut den = 0.0;
    for scale in 1..=4usize {
        let n = (1 << (4 - scale + 1)) + 1;
        let k = gaussian(n);
        if scale > 1 {
            if reference.nrows() < n || reference.ncols() < n {
                break;
            }
            reference = decimate2(&filter_valid(&reference, &k));
            dist = decimate2(&filter_valid(&dist, &k));
        }
        if reference.nrows() < n || reference.ncols() < n {
            break;
        }
        let mu1 = filter_valid(&reference, &k);
        let mu2 = filter_valid(&dist, &k);
        let e11 = filter_valid(&reference.mapv(|v| v * v), &k);
        let e22 = filter_valid(&dist.mapv(|v| v * v), &k);
        let e12 = filter_valid(&(&reference * &dist), &k);
        for i in 0..mu1.len() {
            let idx = (i / mu1.ncols(), i % mu1.ncols());
            let m1 = mu1[idx];
            let m2 = mu2[idx];
            let mut s1 = (e11[idx] - m1 * m1).max(0.0);
            let s2 = (e22[idx] - m2 * m2).max(0.0);
            let s12 = e12[idx] - m1 * m2;
            let mut g = s12 / (s1 + 1e-10);
            let mut sv = s2 - g * s12;
            if s1 < 1e-10 {
                g = 0.0;
                sv = s2;
                s1 = 0.0;
            }
            if s2 < 1e-10 {
                g = 0.0;
                sv = 0.0;
            }
            if g < 0.0 {
                sv = s2;
                g = 0.0;
            }
            if sv < 1e-10 {
                sv = 1e-10;
            }
            num += (1.0 + g * g * s1 / (sv + SIGMA_NSQ)).log10();
            den += (1.0 + s1 / SIGMA_NSQ).log10();
        }
    }
    if den <= 0.0 {
        return 1.0; // featureless reference carries no information
    }
    (num / den).clamp(0.0, 1.0)
}

//! 2-D FFT helpers on `Array2<Complex<f64>>` (row-column decomposition).

use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};

pub type C64 = Complex<f64>;

fn transform(data: &mut Array2<C64>, inverse: bool) {
    let (h, w) = data.dim();
    let mut planner = FftPlanner::new();
    let row_fft = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    let mut buf = vec![C64::new(0.0, 0.0); w];
    for r in 0..h {
        for c in 0..w {
            buf[c] = data[[r, c]];
        }
        row_fft.process(&mut buf);
        for c in 0..w {
            data[[r, c]] = buf[c];
        }
    }
    let col_fft = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    let mut buf = vec![C64::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            buf[r] = data[[r, c]];
        }
        col_fft.process(&mut buf);
        for r in 0..h {
            data[[r, c]] = buf[r];
        }
    }
}

pub fn fft2(real: &Array2<f64>) -> Array2<C64> {
    let mut data = real.mapv(|v| C64::new(v, 0.0));
    transform(&mut data, false);
    data
}

/// Inverse FFT including the 1/(H*W) normalization.
pub fn ifft2(freq: &Array2<C64>) -> Array2<C64> {
    let mut data = freq.clone();
    transform(&mut data, true);
    let n = (data.nrows() * data.ncols()) as f64;
    data.mapv_inplace(|v| v / n);
    data
}

/// Unshifted frequency coordinate of index `i` in an `n`-point transform,
/// in cycles per image (0, 1, ..., n/2, -(n/2-1), ..., -1).
pub fn freq_coord(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_recovers_input() {
        let a = Array2::from_shape_fn((8, 6), |(r, c)| (r * 6 + c) as f64 * 0.1);
        let back = ifft2(&fft2(&a));
        for (x, y) in a.iter().zip(back.iter()) {
            assert!((x - y.re).abs() < 1e-12 && y.im.abs() < 1e-12);
        }
    }

    #[test]
    fn dc_component_is_sum() {
        let a = Array2::from_elem((4, 4), 2.0);
        let f = fft2(&a);
        assert!((f[[0, 0]].re - 32.0).abs() < 1e-12);
    }
}

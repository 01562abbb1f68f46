//! Small numeric helpers shared across modules.

use ndarray::Array2;

/// Linearly-interpolated percentile, `q` in [0, 1].
pub fn percentile(values: &Array2<f64>, q: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 < v.len() {
        v[lo] * (1.0 - frac) + v[lo + 1] * frac
    } else {
        v[lo]
    }
}

/// max - min of the values (at least `floor`).
pub fn value_range(a: &Array2<f64>, floor: f64) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in a.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (hi - lo).max(floor)
}

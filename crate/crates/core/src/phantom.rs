//! Synthetic ground-truth phantoms.
//!
//! Phantoms are additive stacks of ellipses in the unit disk, rasterized
//! analytically with 2x2 subsampling per pixel. Ellipse values are in
//! multiples of the water attenuation, so a value of 1.0 is 0 HU.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LdctError, Result};
use crate::geometry::{mu_to_hu, CtImage, DEFAULT_HU_WINDOW, MU_WATER};

/// One additive ellipse in unit coordinates ([-1, 1] across the image).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Ellipse {
    /// Centre (x, y).
    pub center: (f64, f64),
    /// Semi-axes (a, b) before rotation.
    pub axes: (f64, f64),
    /// Rotation angle in radians, counter-clockwise.
    pub angle: f64,
    /// Additive attenuation in multiples of `MU_WATER`.
    pub value: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.center.0;
        let dy = y - self.center.1;
        let (s, c) = self.angle.sin_cos();
        let xr = dx * c + dy * s;
        let yr = -dx * s + dy * c;
        let (a, b) = self.axes;
        (xr / a).powi(2) + (yr / b).powi(2) <= 1.0
    }
}

/// Phantom families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    SheppLogan,
    RandomEllipses,
}

/// Recipe for one phantom image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    /// Image side length in pixels.
    pub size: usize,
    /// Pixel pitch in mm.
    pub pixel_spacing: f64,
    /// Seed for the random-ellipses family (ignored for Shepp-Logan).
    pub seed: u64,
}

/// Declared bound on the image-mean attenuation of random-ellipse phantoms,
/// in multiples of `MU_WATER`; checked by the Monte-Carlo bound test.
pub const RANDOM_MEAN_BOUNDS: (f64, f64) = (0.2, 1.2);

/// The classic ten-ellipse Shepp-Logan head phantom.
pub fn shepp_logan_ellipses() -> Vec<Ellipse> {
    let deg = std::f64::consts::PI / 180.0;
    let e = |cx: f64, cy: f64, a: f64, b: f64, ang: f64, v: f64| Ellipse {
        center: (cx, cy),
        axes: (a, b),
        angle: ang * deg,
        value: v,
    };
    vec![
        e(0.0, 0.0, 0.69, 0.92, 0.0, 2.0),
        e(0.0, -0.0184, 0.6624, 0.874, 0.0, -0.98),
        e(0.22, 0.0, 0.11, 0.31, -18.0, -0.02),
        e(-0.22, 0.0, 0.16, 0.41, 18.0, -0.02),
        e(0.0, 0.35, 0.21, 0.25, 0.0, 0.01),
        e(0.0, 0.1, 0.046, 0.046, 0.0, 0.01),
        e(0.0, -0.1, 0.046, 0.046, 0.0, 0.01),
        e(-0.08, -0.605, 0.046, 0.023, 0.0, 0.01),
        e(0.0, -0.605, 0.023, 0.023, 0.0, 0.01),
        e(0.06, -0.605, 0.023, 0.046, 0.0, 0.01),
    ]
}

/// Seeded random-ellipse phantom: a water background ellipse plus 4..=10
/// inner ellipses. Negative deltas are budgeted so stacked values keep
/// HU inside [-1024, 3072].
pub fn random_ellipses(seed: u64) -> Vec<Ellipse> {
    let mut rng = crate::rng::stream(seed, "phantom/random-ellipses");
    let bg_axes: (f64, f64) = (rng.random_range(0.72..0.9), rng.random_range(0.72..0.9));
    let mut list = vec![Ellipse {
        center: (0.0, 0.0),
        axes: bg_axes,
        angle: rng.random_range(0.0..std::f64::consts::PI),
        value: 1.0,
    }];
    // Inner ellipses stay inside the background's inscribed circle so
    // negative deltas always sit on the water background.
    let inner_reach = bg_axes.0.min(bg_axes.1) - 0.02;
    let count: usize = rng.random_range(4..=10);
    let mut negative_budget = 0.9;
    for _ in 0..count {
        let (center, axes) = loop {
            let cx: f64 = rng.random_range(-0.6..0.6);
            let cy: f64 = rng.random_range(-0.6..0.6);
            let a: f64 = rng.random_range(0.05..0.35);
            let b: f64 = rng.random_range(0.05..0.35);
            let reach = (cx * cx + cy * cy).sqrt() + a.max(b);
            if reach <= inner_reach {
                break ((cx, cy), (a, b));
            }
        };
        let mut value = rng.random_range(-0.25..0.6);
        if value < 0.0 {
            if negative_budget + value < 0.0 {
                value = 0.0;
            } else {
                negative_budget += value;
            }
        }
        list.push(Ellipse {
            center,
            axes,
            angle: rng.random_range(0.0..std::f64::consts::PI),
            value,
        });
    }
    list
}

fn validate_ellipses(ellipses: &[Ellipse]) -> Result<()> {
    for (i, e) in ellipses.iter().enumerate() {
        if e.axes.0 <= 0.0 || e.axes.1 <= 0.0 {
            return Err(LdctError::validation(format!(
                "ellipse {i} has non-positive axes"
            )));
        }
        let reach = (e.center.0.powi(2) + e.center.1.powi(2)).sqrt() + e.axes.0.max(e.axes.1);
        if reach > 1.0 + 1e-9 {
            return Err(LdctError::validation(format!(
                "ellipse {i} extends outside the unit disk (reach {reach:.3})"
            )));
        }
    }
    Ok(())
}

/// Rasterize an ellipse stack on an `n x n` grid with 2x2 subsampling.
pub fn rasterize(ellipses: &[Ellipse], n: usize) -> Array2<f64> {
    let half = 0.5 * (n as f64 - 1.0);
    let scale = 2.0 / n as f64; // pixel pitch in unit coordinates
    Array2::from_shape_fn((n, n), |(r, c)| {
        let mut acc = 0.0;
        for (dx, dy) in [(-0.25, -0.25), (-0.25, 0.25), (0.25, -0.25), (0.25, 0.25)] {
            let x = (c as f64 + dx - half) * scale;
            let y = (half - r as f64 + dy) * scale;
            for e in ellipses {
                if e.contains(x, y) {
                    acc += e.value;
                }
            }
        }
        acc * 0.25 * MU_WATER
    })
}

/// Generate the phantom image for `spec`.
pub fn generate(spec: &PhantomSpec) -> Result<CtImage> {
    if spec.size == 0 {
        return Err(LdctError::validation("phantom size must be positive"));
    }
    let ellipses = match spec.kind {
        PhantomKind::SheppLogan => shepp_logan_ellipses(),
        PhantomKind::RandomEllipses => random_ellipses(spec.seed),
    };
    validate_ellipses(&ellipses)?;
    let data = rasterize(&ellipses, spec.size);
    let (lo, hi) = DEFAULT_HU_WINDOW;
    for &mu in data.iter() {
        let hu = mu_to_hu(mu);
        if hu < lo - 1e-9 || hu > hi + 1e-9 {
            return Err(LdctError::validation(format!(
                "phantom attenuation {mu:.5} mm^-1 ({hu:.0} HU) is outside [{lo}, {hi}] HU"
            )));
        }
    }
    CtImage::new(data, spec.pixel_spacing, DEFAULT_HU_WINDOW)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: PhantomKind, size: usize, seed: u64) -> PhantomSpec {
        PhantomSpec {
            kind,
            size,
            pixel_spacing: 400.0 / size as f64,
            seed,
        }
    }

    #[test]
    fn shepp_logan_support_is_outer_ellipse() {
        let img = generate(&spec(PhantomKind::SheppLogan, 256, 0)).unwrap();
        let outer = &shepp_logan_ellipses()[0];
        let half = 0.5 * 255.0;
        let scale = 2.0 / 256.0;
        for ((r, c), &v) in img.data.indexed_iter() {
            if v != 0.0 {
                // Nonzero pixels must have at least one subsample inside the
                // outer ellipse; test the pixel centre with a small margin.
                let x = (c as f64 - half) * scale;
                let y = (half - r as f64) * scale;
                let margin = Ellipse {
                    axes: (outer.axes.0 + scale, outer.axes.1 + scale),
                    ..outer.clone()
                };
                assert!(margin.contains(x, y), "stray value at ({r},{c})");
            }
        }
    }

    #[test]
    fn same_seed_same_phantom() {
        let a = generate(&spec(PhantomKind::RandomEllipses, 64, 42)).unwrap();
        let b = generate(&spec(PhantomKind::RandomEllipses, 64, 42)).unwrap();
        assert_eq!(a.data, b.data);
        let c = generate(&spec(PhantomKind::RandomEllipses, 64, 43)).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn random_mean_attenuation_within_declared_bounds() {
        for seed in 0..100 {
            let img = generate(&spec(PhantomKind::RandomEllipses, 64, seed)).unwrap();
            let mean = img.data.iter().sum::<f64>() / (64.0 * 64.0) / MU_WATER;
            assert!(
                mean >= RANDOM_MEAN_BOUNDS.0 && mean <= RANDOM_MEAN_BOUNDS.1,
                "seed {seed}: mean {mean:.3} outside {RANDOM_MEAN_BOUNDS:?}"
            );
        }
    }

    #[test]
    fn rasterization_converges_with_resolution() {
        let coarse = generate(&spec(PhantomKind::SheppLogan, 128, 0)).unwrap();
        let fine = generate(&spec(PhantomKind::SheppLogan, 256, 0)).unwrap();
        let mean = |img: &CtImage| img.data.iter().sum::<f64>() / img.data.len() as f64;
        let (mc, mf) = (mean(&coarse), mean(&fine));
        assert!(
            (mc - mf).abs() / mf.abs() < 0.005,
            "means {mc:.6} vs {mf:.6} differ by more than 0.5%"
        );
    }
}

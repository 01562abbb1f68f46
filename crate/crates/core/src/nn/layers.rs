//! Named parameter storage, initializers, and small layer helpers.
//!
//! Parameters live in a [`ParamSet`] keyed by insertion order; a training
//! step binds them into a fresh [`Graph`] and reads gradients back by the
//! same indices. Initialization draws from a per-name RNG sub-stream, so
//! adding or reordering parameters never perturbs other layers' weights.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{LdctError, Result};

use super::graph::{Graph, Var};

/// Index of a parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Weight initializer.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Kaiming normal for leaky-ReLU fan-in: std = sqrt(2 / ((1+a^2) fan_in)).
    HeNormal { fan_in: usize, slope: f64 },
    /// Uniform(-s, s) with s = sqrt(6 / (fan_in + fan_out)).
    XavierUniform { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

/// Ordered, named collection of trainable arrays.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
    /// Seed that keyed the per-name init streams.
    pub init_seed: u64,
}

impl ParamSet {
    pub fn new(init_seed: u64) -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
            init_seed,
        }
    }

    pub fn register(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        let mut rng = crate::rng::stream(self.init_seed, &format!("init/{name}"));
        let value = match init {
            Init::HeNormal { fan_in, slope } => {
                let std = (2.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt();
                let normal = Normal::new(0.0, std).unwrap();
                ArrayD::from_shape_fn(IxDyn(shape), |_| normal.sample(&mut rng))
            }
            Init::XavierUniform { fan_in, fan_out } => {
                let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
                ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-s..s))
            }
            Init::Zeros => ArrayD::zeros(IxDyn(shape)),
            Init::Ones => ArrayD::from_elem(IxDyn(shape), 1.0),
        };
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.values[id.0]
    }

    pub fn values_mut(&mut self) -> &mut [ArrayD<f64>] {
        &mut self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Bind every parameter into `g`, in order. `trainable = false` binds
    /// them as constants (inference).
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.values
            .iter()
            .map(|v| {
                if trainable {
                    g.param(v.clone())
                } else {
                    g.constant(v.clone())
                }
            })
            .collect()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Serialize as little-endian f64 in registration order.
    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_scalars() * 8);
        for v in &self.values {
            for &x in v.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Load values from a blob produced by [`ParamSet::to_blob`] for an
    /// identically-built set.
    pub fn load_blob(&mut self, blob: &[u8]) -> Result<()> {
        if blob.len() != self.num_scalars() * 8 {
            return Err(LdctError::configuration(format!(
                "weight blob holds {} bytes but the architecture needs {}",
                blob.len(),
                self.num_scalars() * 8
            )));
        }
        let mut off = 0;
        for v in &mut self.values {
            for x in v.iter_mut() {
                let mut b = [0u8; 8];
                b.copy_from_slice(&blob[off..off + 8]);
                *x = f64::from_le_bytes(b);
                off += 8;
            }
        }
        Ok(())
    }
}

/// Fully-connected layer.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, name: &str, d_in: usize, d_out: usize) -> Self {
        Linear {
            w: ps.register(
                &format!("{name}.w"),
                &[d_in, d_out],
                Init::XavierUniform {
                    fan_in: d_in,
                    fan_out: d_out,
                },
            ),
            b: ps.register(&format!("{name}.b"), &[d_out], Init::Zeros),
        }
    }

    /// `[T, d_in] -> [T, d_out]`.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Var {
        let y = g.matmul(x, vars[self.w.0]);
        g.add_row(y, vars[self.b.0])
    }
}

/// Same-padding convolution layer with odd square kernels.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv2d {
    pub fn new(ps: &mut ParamSet, name: &str, c_in: usize, c_out: usize, k: usize) -> Self {
        Conv2d {
            w: ps.register(
                &format!("{name}.w"),
                &[c_out, c_in, k, k],
                Init::HeNormal {
                    fan_in: c_in * k * k,
                    slope: 0.1,
                },
            ),
            b: ps.register(&format!("{name}.b"), &[c_out], Init::Zeros),
        }
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Var {
        g.conv2d(x, vars[self.w.0], vars[self.b.0])
    }
}

/// Layer-norm gain/bias pair.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: ps.register(&format!("{name}.gamma"), &[d], Init::Ones),
            beta: ps.register(&format!("{name}.beta"), &[d], Init::Zeros),
        }
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Var {
        g.layer_norm(x, vars[self.gamma.0], vars[self.beta.0], 1e-5)
    }
}

/// Sinusoidal embedding of a scalar position (used for diffusion timesteps):
/// interleaved sin/cos at geometrically spaced frequencies.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> ArrayD<f64> {
    assert!(dim % 2 == 0);
    let half = dim / 2;
    let mut out = ArrayD::zeros(IxDyn(&[dim]));
    for i in 0..half {
        let freq = (10_000.0_f64).powf(-(i as f64) / half as f64);
        out[[2 * i]] = (t * freq).sin();
        out[[2 * i + 1]] = (t * freq).cos();
    }
    out
}

/// Fixed 2-D sin/cos positional table for a `gh x gw` token grid, `[T, dim]`.
pub fn positional_table(gh: usize, gw: usize, dim: usize) -> ArrayD<f64> {
    assert!(dim % 2 == 0);
    let mut out = ArrayD::zeros(IxDyn(&[gh * gw, dim]));
    for by in 0..gh {
        for bx in 0..gw {
            let tok = by * gw + bx;
            let ey = sinusoidal_embedding(by as f64, dim / 2);
            let ex = sinusoidal_embedding(bx as f64, dim / 2);
            for i in 0..dim / 2 {
                out[[tok, i]] = ey[[i]];
                out[[tok, dim / 2 + i]] = ex[[i]];
            }
        }
    }
    out
}

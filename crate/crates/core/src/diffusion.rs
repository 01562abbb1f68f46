//! Gaussian diffusion schedule and samplers.
//!
//! Timesteps are 1-based: `beta(1)` is the first corruption step. The
//! sampling grid holds `T_L` timesteps `T, T - T/T_L, ...` (rounded); the
//! final hop from the last grid entry to the clean state is handled inside
//! [`reverse_step`], which is also where each jump between grid timesteps
//! happens: the step reconstructs the clean-latent estimate from the
//! predicted noise and re-noises it to the target timestep, using the
//! per-step variance `sigma_t^2 = 1 - alpha_t` (capped by the target's
//! total noise level so the jump stays well defined). On a dense grid
//! (`T_L = T`) this reduces to the usual one-step posterior update.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{LdctError, Result};

/// Beta curve family.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BetaSpec {
    Linear { start: f64, end: f64 },
}

impl Default for BetaSpec {
    fn default() -> Self {
        // Standard DDPM default.
        BetaSpec::Linear {
            start: 1e-4,
            end: 0.02,
        }
    }
}

impl BetaSpec {
    fn betas(&self, t_total: usize) -> Vec<f64> {
        match *self {
            BetaSpec::Linear { start, end } => (0..t_total)
                .map(|i| {
                    if t_total == 1 {
                        start
                    } else {
                        start + (end - start) * i as f64 / (t_total - 1) as f64
                    }
                })
                .collect(),
        }
    }
}

/// Precomputed `{alpha_t, alpha_bar_t, sigma_t^2}` tables plus the sampling
/// grid.
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    pub t_total: usize,
    pub t_sample: usize,
    pub beta_spec: BetaSpec,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigma2s: Vec<f64>,
    /// Descending sampling timesteps, length `t_sample`, starting at `t_total`.
    pub sample_grid: Vec<usize>,
}

/// Terminal-signal bound `alpha_bar_T <= 1e-3` is enforced for schedules of
/// at least this many steps (generation-grade schedules); shorter test
/// schedules only need monotonicity.
const TERMINAL_BOUND_MIN_T: usize = 100;

impl DiffusionSchedule {
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// Reverse-step variance `sigma_t^2 = 1 - alpha_t`.
    pub fn sigma2(&self, t: usize) -> f64 {
        self.sigma2s[t - 1]
    }

    fn grid_successor(&self, t: usize) -> Result<usize> {
        match self.sample_grid.iter().position(|&g| g == t) {
            Some(i) => Ok(*self.sample_grid.get(i + 1).unwrap_or(&0)),
            None => Err(LdctError::validation(format!(
                "timestep {t} is not on the sampling grid"
            ))),
        }
    }
}

/// Build and validate a schedule.
pub fn build_schedule(
    t_total: usize,
    t_sample: usize,
    beta_spec: BetaSpec,
) -> Result<DiffusionSchedule> {
    if t_total == 0 || t_sample == 0 || t_sample > t_total {
        return Err(LdctError::configuration(
            "need 1 <= T_L <= T for a diffusion schedule",
        ));
    }
    let betas = beta_spec.betas(t_total);
    if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
        return Err(LdctError::configuration("betas must lie in (0, 1)"));
    }
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_total);
    let mut prod = 1.0;
    for &a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    for w in alpha_bars.windows(2) {
        if w[1] >= w[0] {
            return Err(LdctError::configuration(
                "alpha_bar must be strictly decreasing",
            ));
        }
    }
    if alpha_bars[0] < 0.99 {
        return Err(LdctError::configuration(format!(
            "alpha_bar_1 = {} must be >= 0.99",
            alpha_bars[0]
        )));
    }
    if t_total >= TERMINAL_BOUND_MIN_T && alpha_bars[t_total - 1] > 1e-3 {
        return Err(LdctError::configuration(format!(
            "alpha_bar_T = {:.3e} exceeds the 1e-3 terminal bound",
            alpha_bars[t_total - 1]
        )));
    }
    let sigma2s: Vec<f64> = alphas.iter().map(|a| 1.0 - a).collect();

    let step = t_total as f64 / t_sample as f64;
    let mut sample_grid = Vec::with_capacity(t_sample);
    for k in 0..t_sample {
        let t = (t_total as f64 - k as f64 * step).round() as usize;
        sample_grid.push(t.max(1));
    }
    if sample_grid[0] != t_total
        || sample_grid.windows(2).any(|w| w[1] >= w[0])
        || sample_grid.iter().any(|&t| t < 1 || t > t_total)
    {
        return Err(LdctError::configuration(format!(
            "degenerate sampling grid {sample_grid:?}"
        )));
    }
    Ok(DiffusionSchedule {
        t_total,
        t_sample,
        beta_spec,
        betas,
        alphas,
        alpha_bars,
        sigma2s,
        sample_grid,
    })
}

/// A `1000/0.0001..0.02` production schedule with `t_sample` grid points.
pub fn standard_schedule(t_sample: usize) -> Result<DiffusionSchedule> {
    build_schedule(1000, t_sample, BetaSpec::default())
}

/// Short strict schedule for algebra tests: satisfies every invariant
/// including the terminal bound despite having only 50 steps.
pub fn short_test_schedule(t_sample: usize) -> Result<DiffusionSchedule> {
    build_schedule(
        50,
        t_sample,
        BetaSpec::Linear {
            start: 0.002,
            end: 0.28,
        },
    )
}

/// Latent-space tensor tagged with its diffusion step (0 = clean).
#[derive(Debug, Clone)]
pub struct LatentTensor {
    pub data: Array3<f64>,
    pub step: usize,
}

impl LatentTensor {
    pub fn new(data: Array3<f64>, step: usize) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LdctError::validation("latent tensor is not finite"));
        }
        Ok(LatentTensor { data, step })
    }
}

/// `sqrt(ab) z0 + sqrt(1-ab) eps` (exact at ab = 1 and ab = 0).
pub fn mix_signal_noise(z0: &Array3<f64>, eps: &Array3<f64>, alpha_bar: f64) -> Array3<f64> {
    let s = alpha_bar.sqrt();
    let n = (1.0 - alpha_bar).sqrt();
    z0 * s + eps * n
}

/// Forward corruption to step `t`.
pub fn forward_diffuse(
    z0: &LatentTensor,
    t: usize,
    eps: &Array3<f64>,
    sched: &DiffusionSchedule,
) -> Result<LatentTensor> {
    if t < 1 || t > sched.t_total {
        return Err(LdctError::validation(format!(
            "timestep {t} outside 1..={}",
            sched.t_total
        )));
    }
    if eps.dim() != z0.data.dim() {
        return Err(LdctError::validation("noise shape mismatch"));
    }
    LatentTensor::new(mix_signal_noise(&z0.data, eps, sched.alpha_bar(t)), t)
}

/// Invert the forward corruption given the (predicted) noise.
pub fn predict_x0(
    zt: &LatentTensor,
    eps_hat: &Array3<f64>,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<LatentTensor> {
    if t < 1 || t > sched.t_total {
        return Err(LdctError::validation(format!(
            "timestep {t} outside 1..={}",
            sched.t_total
        )));
    }
    let ab = sched.alpha_bar(t);
    if ab <= 0.0 {
        return Err(LdctError::validation(
            "alpha_bar is zero; clean-state estimate is singular",
        ));
    }
    let n = (1.0 - ab).sqrt();
    let data = (&zt.data - &(eps_hat * n)) / ab.sqrt();
    LatentTensor::new(data, 0)
}

/// Noise predictor interface: `(z_t, t) -> eps_hat`.
pub trait NoisePredictor {
    fn predict(&self, zt: &Array3<f64>, t: usize) -> Array3<f64>;
}

impl<F: Fn(&Array3<f64>, usize) -> Array3<f64>> NoisePredictor for F {
    fn predict(&self, zt: &Array3<f64>, t: usize) -> Array3<f64> {
        self(zt, t)
    }
}

/// One reverse jump from grid timestep `t` to its grid successor (or to the
/// clean state after the last grid entry). `xi` is the standard-normal
/// sample for the stochastic part; pass `None` to force sigma = 0. No noise
/// is added on the terminal step.
pub fn reverse_step<P: NoisePredictor>(
    zt: &LatentTensor,
    t: usize,
    predictor: &P,
    sched: &DiffusionSchedule,
    xi: Option<&Array3<f64>>,
) -> Result<LatentTensor> {
    let t_next = sched.grid_successor(t)?;
    let eps_hat = predictor.predict(&zt.data, t);
    if eps_hat.iter().any(|v| !v.is_finite()) {
        return Err(LdctError::training_fault(
            "noise predictor produced non-finite values during inference",
        ));
    }
    let z0_hat = predict_x0(zt, &eps_hat, t, sched)?;
    if t_next == 0 {
        return Ok(z0_hat);
    }
    let ab_next = sched.alpha_bar(t_next);
    // `xi = None` forces sigma to 0, making the jump fully deterministic.
    let sigma2 = match xi {
        Some(_) => sched.sigma2(t).min(1.0 - ab_next),
        None => 0.0,
    };
    let eps_coeff = (1.0 - ab_next - sigma2).max(0.0).sqrt();
    let mut data = &z0_hat.data * ab_next.sqrt() + &eps_hat * eps_coeff;
    if let Some(xi) = xi {
        data = data + xi * sigma2.sqrt();
    }
    LatentTensor::new(data, t_next)
}

/// Run the full reverse chain from `z_init` (treated as the state at the
/// first grid timestep). Returns the clean-state estimate and the number of
/// reverse steps performed.
pub fn sample_chain<P: NoisePredictor>(
    z_init: &Array3<f64>,
    predictor: &P,
    sched: &DiffusionSchedule,
    noise_seed: Option<u64>,
) -> Result<(LatentTensor, usize)> {
    use rand_distr::{Distribution, Normal};
    let mut z = LatentTensor::new(z_init.clone(), sched.t_total)?;
    let mut steps = 0;
    let normal = Normal::new(0.0, 1.0).unwrap();
    for (k, &t) in sched.sample_grid.clone().iter().enumerate() {
        let xi = noise_seed.map(|seed| {
            let mut rng = crate::rng::indexed_stream(seed, "reverse/xi", k);
            Array3::from_shape_fn(z.data.dim(), |_| normal.sample(&mut rng))
        });
        z = reverse_step(&z, t, predictor, sched, xi.as_ref())?;
        steps += 1;
    }
    Ok((z, steps))
}

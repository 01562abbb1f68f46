//! Projection-domain denoiser.
//!
//! A fully convolutional encoder-decoder with a residual output (input
//! plus a zero-initialized correction head, so training starts from the
//! identity) is trained on half-resolution contextual sub-data pairs with
//! a self-enhancing similarity loss: pixels
//! where the two sub-sinograms disagree strongly are down-weighted by masks
//! derived from the normalized absolute difference. The trained network is
//! applied to whole sinograms at inference (it is shape-preserving at any
//! input size).
//!
//! Mask normalization maps `|d|` into [0,1] via `clip(|d| / (q95 + 1e-8))`
//! where `q95` is the per-sample 95th percentile of `|d|` (linearly
//! interpolated). Masks are recomputed from the current batch every step
//! and treated as constants: no gradient flows through them, nor through
//! the full-resolution denoising branch they are built from.

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LdctError, Result};
use crate::geometry::Sinogram;
use crate::nn::layers::{Conv2d, Init, ParamSet};
use crate::nn::optim::{halving_lr, Adam};
use crate::nn::{Graph, Var};
use crate::sampler::{choose_pair, sample_subdata_array, subsample_like};

/// Encoder-decoder architecture parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProjNetConfig {
    /// Channels at the finest scale; deeper scales double.
    pub base_channels: usize,
    /// Number of scales (1 = no downsampling).
    pub depth: usize,
    /// Activation name, e.g. "leaky_relu_0.1" or "silu".
    pub activation: String,
    /// Free-text note on the receptive field of the chosen depth.
    pub receptive_field_note: String,
}

impl Default for ProjNetConfig {
    fn default() -> Self {
        ProjNetConfig {
            base_channels: 48,
            depth: 3,
            activation: "leaky_relu_0.1".into(),
            receptive_field_note:
                "3 scales of 3x3 convs span roughly 40 detector bins/views".into(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Activation {
    LeakyRelu(f64),
    Silu,
}

impl Activation {
    fn parse(name: &str) -> Result<Self> {
        if name == "silu" {
            return Ok(Activation::Silu);
        }
        if let Some(rest) = name.strip_prefix("leaky_relu_") {
            let slope: f64 = rest
                .parse()
                .map_err(|_| LdctError::configuration(format!("bad activation {name}")))?;
            return Ok(Activation::LeakyRelu(slope));
        }
        Err(LdctError::configuration(format!(
            "unknown activation {name} (expected silu or leaky_relu_<slope>)"
        )))
    }

    fn apply(&self, g: &mut Graph, x: Var) -> Var {
        match *self {
            Activation::LeakyRelu(s) => g.leaky_relu(x, s),
            Activation::Silu => g.silu(x),
        }
    }
}

/// Pair of per-pixel similarity masks.
#[derive(Debug, Clone)]
pub struct SimilarityMasks {
    pub eps1: Array2<f64>,
    pub eps2: Array2<f64>,
}

impl SimilarityMasks {
    pub fn w1(&self) -> Array2<f64> {
        self.eps1.mapv(|e| 1.0 - e)
    }

    pub fn w2(&self) -> Array2<f64> {
        self.eps2.mapv(|e| 1.0 - e)
    }
}

use crate::util::percentile;

fn normalized_gap(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let d = (a - b).mapv(f64::abs);
    let q95 = percentile(&d, 0.95);
    d.mapv(|x| (x / (q95 + 1e-8)).clamp(0.0, 1.0))
}

/// Build masks from the noisy sub-pair and the denoised sub-pair.
pub fn compute_masks(
    pair_in: (&Array2<f64>, &Array2<f64>),
    pair_out: (&Array2<f64>, &Array2<f64>),
) -> Result<SimilarityMasks> {
    let shape = pair_in.0.dim();
    for arr in [pair_in.0, pair_in.1, pair_out.0, pair_out.1] {
        if arr.dim() != shape {
            return Err(LdctError::validation("mask inputs must share one shape"));
        }
        if arr.iter().any(|v| !v.is_finite()) {
            return Err(LdctError::validation("mask inputs must be finite"));
        }
    }
    Ok(SimilarityMasks {
        eps1: normalized_gap(pair_in.0, pair_in.1),
        eps2: normalized_gap(pair_out.0, pair_out.1),
    })
}

/// Self-enhancing similarity loss:
/// `mean(((f - t) . w1)^2) + alpha * mean((((f - t) . w1) - ((fi - fj) . w2))^2)`.
pub fn projection_loss(
    f_out_sub: &Array2<f64>,
    target_sub: &Array2<f64>,
    f_full_sub_i: &Array2<f64>,
    f_full_sub_j: &Array2<f64>,
    masks: &SimilarityMasks,
    alpha: f64,
) -> Result<f64> {
    if f_out_sub.iter().any(|v| !v.is_finite()) {
        return Err(LdctError::training_fault(
            "network output is not finite; step skipped",
        ));
    }
    let w1 = masks.w1();
    let w2 = masks.w2();
    let masked_residual = (f_out_sub - target_sub) * &w1;
    let reg_target = (f_full_sub_i - f_full_sub_j) * &w2;
    let n = masked_residual.len() as f64;
    let term1 = masked_residual.iter().map(|x| x * x).sum::<f64>() / n;
    let term2 = masked_residual
        .iter()
        .zip(reg_target.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    Ok(term1 + alpha * term2)
}

/// The same loss as a graph expression (gradients flow through `f_out_sub`
/// only; every other operand is a constant).
pub fn projection_loss_graph(
    g: &mut Graph,
    f_out_sub: Var,
    target_sub: &Array2<f64>,
    reg_target: &Array2<f64>,
    w1: &Array2<f64>,
    alpha: f64,
) -> Var {
    let t = g.constant(target_sub.clone().into_dyn());
    let w1v = g.constant(w1.clone().into_dyn());
    let rt = g.constant(reg_target.clone().into_dyn());
    let resid = g.sub(f_out_sub, t);
    let masked = g.mul(resid, w1v);
    let sq = g.mul(masked, masked);
    let term1 = g.mean_all(sq);
    let diff = g.sub(masked, rt);
    let sq2 = g.mul(diff, diff);
    let term2 = g.mean_all(sq2);
    let term2s = g.scale(term2, alpha);
    g.add(term1, term2s)
}

/// Training hyper-parameters for the projection stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjTrainConfig {
    /// Regularization weight of the consistency term.
    pub alpha: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Learning rate halves every this many epochs.
    pub lr_halving_period: usize,
    /// Adaptive-moment optimizer family; only "adam" is implemented.
    pub optimizer: String,
    pub seed: u64,
}

impl Default for ProjTrainConfig {
    fn default() -> Self {
        ProjTrainConfig {
            alpha: 0.02,
            lr: 3e-4,
            batch_size: 8,
            epochs: 100,
            lr_halving_period: 20,
            optimizer: "adam".into(),
            seed: 0,
        }
    }
}

impl ProjTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(LdctError::validation("alpha must be >= 0"));
        }
        if !(self.lr > 0.0) {
            return Err(LdctError::validation("lr must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(LdctError::validation("batch_size must be >= 1"));
        }
        if self.optimizer != "adam" {
            return Err(LdctError::configuration(format!(
                "unsupported optimizer {}",
                self.optimizer
            )));
        }
        Ok(())
    }
}

/// Fully convolutional encoder-decoder over single-channel maps.
pub struct ProjNet {
    pub cfg: ProjNetConfig,
    pub params: ParamSet,
    enc: Vec<(Conv2d, Conv2d)>,
    dec: Vec<(Conv2d, Conv2d)>,
    head: Conv2d,
    act: Activation,
}

impl ProjNet {
    pub fn new(cfg: &ProjNetConfig, init_seed: u64) -> Result<Self> {
        if cfg.base_channels == 0 || cfg.depth == 0 {
            return Err(LdctError::configuration(
                "base_channels and depth must be positive",
            ));
        }
        let act = Activation::parse(&cfg.activation)?;
        let mut ps = ParamSet::new(init_seed);
        let ch = |s: usize| cfg.base_channels << s;
        let mut enc = Vec::new();
        for s in 0..cfg.depth {
            let c_in = if s == 0 { 1 } else { ch(s - 1) };
            enc.push((
                Conv2d::new(&mut ps, &format!("enc{s}.a"), c_in, ch(s), 3),
                Conv2d::new(&mut ps, &format!("enc{s}.b"), ch(s), ch(s), 3),
            ));
        }
        let mut dec = Vec::new();
        for s in (0..cfg.depth.saturating_sub(1)).rev() {
            let c_in = ch(s + 1) + ch(s); // upsampled deeper features + skip
            dec.push((
                Conv2d::new(&mut ps, &format!("dec{s}.a"), c_in, ch(s), 3),
                Conv2d::new(&mut ps, &format!("dec{s}.b"), ch(s), ch(s), 3),
            ));
        }
        // Zero-init head: with the residual output below, the network is
        // exactly the identity at initialization.
        let head = Conv2d {
            w: ps.register("head.w", &[1, cfg.base_channels, 1, 1], Init::Zeros),
            b: ps.register("head.b", &[1], Init::Zeros),
        };
        Ok(ProjNet {
            cfg: cfg.clone(),
            params: ps,
            enc,
            dec,
            head,
            act,
        })
    }

    /// Shape-preserving forward pass on a `[1,H,W]` map. Inputs are padded
    /// to a multiple of `2^(depth-1)` and cropped back.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Var {
        let (h, w) = {
            let s = g.data(x).shape();
            (s[1], s[2])
        };
        let factor = 1 << (self.cfg.depth - 1);
        let h2 = h.div_ceil(factor) * factor;
        let w2 = w.div_ceil(factor) * factor;
        let mut cur = if (h2, w2) != (h, w) {
            g.pad_zero_to(x, h2, w2)
        } else {
            x
        };
        let mut skips = Vec::new();
        for (s, (a, b)) in self.enc.iter().enumerate() {
            let y = a.forward(g, vars, cur);
            let y = self.act.apply(g, y);
            let y = b.forward(g, vars, y);
            let y = self.act.apply(g, y);
            if s + 1 < self.cfg.depth {
                skips.push(y);
                cur = g.avg_pool2(y);
            } else {
                cur = y;
            }
        }
        for (d, (a, b)) in self.dec.iter().enumerate() {
            let skip = skips[self.cfg.depth - 2 - d];
            let up = g.upsample2(cur);
            let cat = g.concat_channels(up, skip);
            let y = a.forward(g, vars, cat);
            let y = self.act.apply(g, y);
            let y = b.forward(g, vars, y);
            cur = self.act.apply(g, y);
        }
        let correction = self.head.forward(g, vars, cur);
        let correction = if (h2, w2) != (h, w) {
            g.crop_to(correction, h, w)
        } else {
            correction
        };
        // Residual output: the network predicts a correction to its input.
        g.add(x, correction)
    }

    /// Plain inference on a raw 2-D array (no gradients).
    pub fn infer_array(&self, input: &Array2<f64>) -> Array2<f64> {
        let (h, w) = input.dim();
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let x = g.constant(
            input
                .clone()
                .into_shape_with_order(ndarray::IxDyn(&[1, h, w]))
                .unwrap(),
        );
        let y = self.forward(&mut g, &vars, x);
        g.data(y)
            .clone()
            .into_shape_with_order((h, w))
            .unwrap()
            .into_dimensionality()
            .unwrap()
    }
}

/// Trained projection-stage model plus everything needed to reproduce it.
pub struct ProjCheckpoint {
    pub net_cfg: ProjNetConfig,
    pub train_cfg: ProjTrainConfig,
    /// Input normalization (mean, std) computed on the training set.
    pub input_mean: f64,
    pub input_std: f64,
    pub epochs_run: usize,
    /// Mean loss per epoch.
    pub loss_curve: Vec<f64>,
    pub net: ProjNet,
}

fn dataset_stats(sinos: &[Sinogram]) -> (f64, f64) {
    let mut n = 0.0;
    let mut sum = 0.0;
    for s in sinos {
        n += s.data.len() as f64;
        sum += s.data.iter().sum::<f64>();
    }
    let mean = sum / n;
    let mut var = 0.0;
    for s in sinos {
        var += s.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    }
    (mean, (var / n).sqrt().max(1e-8))
}

struct StepResult {
    loss: f64,
    grads: Vec<Option<ndarray::ArrayD<f64>>>,
}

/// Train the projection denoiser on a set of low-dose sinograms.
pub fn train_projection(
    sinos: &[Sinogram],
    cfg: &ProjTrainConfig,
    net_cfg: &ProjNetConfig,
) -> Result<ProjCheckpoint> {
    cfg.validate()?;
    if sinos.is_empty() {
        return Err(LdctError::validation("training set is empty"));
    }
    for s in sinos {
        if s.num_views() % 2 != 0 || s.num_bins() % 2 != 0 {
            return Err(LdctError::validation(
                "sinogram dimensions must be even for sub-data sampling",
            ));
        }
    }
    let init_seed = crate::rng::stream(cfg.seed, "train-proj/init")
        .random_range(0..u64::MAX);
    let net = ProjNet::new(net_cfg, init_seed)?;
    let (mean, std) = dataset_stats(sinos);
    let normalized: Vec<Array2<f64>> = sinos
        .iter()
        .map(|s| s.data.mapv(|v| (v - mean) / std))
        .collect();

    let mut ckpt = ProjCheckpoint {
        net_cfg: net_cfg.clone(),
        train_cfg: cfg.clone(),
        input_mean: mean,
        input_std: std,
        epochs_run: 0,
        loss_curve: Vec::new(),
        net,
    };
    if cfg.epochs == 0 {
        return Ok(ckpt);
    }

    let mut opt = Adam::new(&ckpt.net.params, 0.0);
    let mut initial_loss: Option<f64> = None;
    let mut high_loss_streak = 0usize;
    use rand::seq::SliceRandom;

    for epoch in 0..cfg.epochs {
        let lr = halving_lr(cfg.lr, cfg.lr_halving_period, epoch);
        let mut order: Vec<usize> = (0..normalized.len()).collect();
        order.shuffle(&mut crate::rng::indexed_stream(
            cfg.seed,
            "train-proj/order",
            epoch,
        ));
        let mut epoch_loss = 0.0;
        let mut steps_in_epoch = 0usize;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Result<Vec<StepResult>> = batch
                .par_iter()
                .map(|&idx| {
                    train_step(
                        &ckpt.net,
                        &normalized[idx],
                        cfg,
                        &format!("train-proj/e{epoch}/s{step}/i{idx}"),
                    )
                })
                .collect();
            let results = results?;
            let mut grads: Vec<Option<ndarray::ArrayD<f64>>> =
                vec![None; ckpt.net.params.len()];
            let mut batch_loss = 0.0;
            let scale = 1.0 / results.len() as f64;
            for r in &results {
                batch_loss += r.loss * scale;
                for (slot, g) in grads.iter_mut().zip(&r.grads) {
                    if let Some(g) = g {
                        match slot {
                            Some(acc) => *acc += &g.mapv(|x| x * scale),
                            slot => *slot = Some(g.mapv(|x| x * scale)),
                        }
                    }
                }
            }
            opt.step(&mut ckpt.net.params, &grads, lr);

            let init = *initial_loss.get_or_insert(batch_loss);
            if batch_loss > 1e3 * init.max(1e-12) {
                high_loss_streak += 1;
                if high_loss_streak >= 100 {
                    return Err(LdctError::training_fault(format!(
                        "projection training diverged: loss {batch_loss:.3e} stayed above \
                         1e3 x initial ({init:.3e}) for 100 consecutive steps"
                    )));
                }
            } else {
                high_loss_streak = 0;
            }
            epoch_loss += batch_loss;
            steps_in_epoch += 1;
        }
        ckpt.loss_curve.push(epoch_loss / steps_in_epoch as f64);
        ckpt.epochs_run = epoch + 1;
    }
    Ok(ckpt)
}

/// One sample's contribution: fresh sub-data draw, masked loss, gradients.
fn train_step(
    net: &ProjNet,
    y_norm: &Array2<f64>,
    cfg: &ProjTrainConfig,
    label: &str,
) -> Result<StepResult> {
    let sub_seed = crate::rng::stream(cfg.seed, &format!("{label}/sub")).random();
    let pair_seed = crate::rng::stream(cfg.seed, &format!("{label}/pair")).random();
    let sds = sample_subdata_array(y_norm, sub_seed)?;
    let (i, j) = choose_pair(&sds, pair_seed);
    let s_i = sds.slots[(i - 1) as usize].clone();
    let s_j = sds.slots[(j - 1) as usize].clone();

    // Full-resolution branch, treated as constant in the loss.
    let f_full = net.infer_array(y_norm);
    if f_full.iter().any(|v| !v.is_finite()) {
        return Err(LdctError::training_fault(
            "full-resolution branch produced non-finite values",
        ));
    }
    let f_full_i = subsample_like(&f_full, &sds, i)?;
    let f_full_j = subsample_like(&f_full, &sds, j)?;
    let masks = compute_masks((&s_i, &s_j), (&f_full_i, &f_full_j))?;
    let w1 = masks.w1();
    let reg_target = (&f_full_i - &f_full_j) * &masks.w2();

    let (h, w) = s_i.dim();
    let mut g = Graph::new();
    let vars = net.params.bind(&mut g, true);
    let x = g.constant(
        s_i.clone()
            .into_shape_with_order(ndarray::IxDyn(&[1, h, w]))
            .unwrap(),
    );
    let out3 = net.forward(&mut g, &vars, x);
    let out = g.reshape(out3, &[h, w]);
    if g.data(out).iter().any(|v| !v.is_finite()) {
        return Err(LdctError::training_fault(
            "network output is not finite; step skipped",
        ));
    }
    let loss = projection_loss_graph(&mut g, out, &s_j, &reg_target, &w1, cfg.alpha);
    let loss_value = g.value(loss);
    g.backward(loss);
    let grads = vars.iter().map(|&v| g.grad(v).cloned()).collect();
    Ok(StepResult {
        loss: loss_value,
        grads,
    })
}

/// Apply a trained checkpoint to a full-resolution sinogram.
pub fn denoise_projection(sino: &Sinogram, ckpt: &ProjCheckpoint) -> Result<Sinogram> {
    if sino.data.is_empty() {
        return Err(LdctError::configuration("empty sinogram"));
    }
    let y_norm = sino.data.mapv(|v| (v - ckpt.input_mean) / ckpt.input_std);
    let out_norm = ckpt.net.infer_array(&y_norm);
    if out_norm.iter().any(|v| !v.is_finite()) {
        return Err(LdctError::training_fault(
            "denoiser produced non-finite values",
        ));
    }
    // Back to line integrals; clamp tiny negatives per the sinogram contract.
    let out = out_norm.mapv(|v| (v * ckpt.input_std + ckpt.input_mean).max(0.0));
    Sinogram::new(out, sino.geometry.clone(), sino.dose_tag)
}

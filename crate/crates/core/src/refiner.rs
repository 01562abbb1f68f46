//! Latent-diffusion image refiner with knowledge distillation.
//!
//! Images are mapped to a 4x-downsampled latent space by a four-layer
//! convolutional encoder, corrupted by the Gaussian schedule, and denoised
//! by a four-block transformer over non-overlapping latent patches with a
//! sinusoidal timestep embedding added to every token. A four-layer decoder
//! maps latents back to image space. All three pieces train jointly: the
//! noise-prediction loss is combined with a denoising loss that pulls the
//! decoded clean-state estimate toward the projection-stage prior through
//! SSIM, Sobel gradient-magnitude, and L1 terms.
//!
//! Images enter the refiner normalized to [0,1] over the HU display window;
//! the SSIM window is `min(11, H, W)` (forced odd) with a Gaussian of
//! sigma `1.5 * window / 11`, evaluated in valid mode.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{BetaSpec, DiffusionSchedule, LatentTensor, NoisePredictor};
use crate::error::{LdctError, Result};
use crate::geometry::{mu_to_hu, CtImage};
use crate::nn::layers::{positional_table, sinusoidal_embedding, Conv2d, LayerNorm, Linear, ParamSet};
use crate::nn::optim::{cosine_lr, Adam};
use crate::nn::{Graph, Var};

/// Downsampling factor of the latent space (two pooling stages).
pub const LATENT_FACTOR: usize = 4;

/// Soft bound on encoder outputs: z = B * tanh(raw / B). Keeps latents on
/// the same scale as the standard-normal noise the schedule mixes in.
pub const LATENT_BOUND: f64 = 3.0;

/// Architecture of encoder, decoder, and noise predictor.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RefinerNetConfig {
    /// Channels of the latent space.
    pub latent_channels: usize,
    /// Base channel width of encoder/decoder convolutions.
    pub conv_channels: usize,
    /// Transformer embedding width.
    pub d_model: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    /// Latent patch edge for tokenization.
    pub patch: usize,
}

impl Default for RefinerNetConfig {
    fn default() -> Self {
        RefinerNetConfig {
            latent_channels: 64,
            conv_channels: 32,
            d_model: 256,
            num_heads: 4,
            num_blocks: 4,
            patch: 2,
        }
    }
}

/// Refiner training hyper-parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefinerTrainConfig {
    /// SSIM term weight.
    pub beta_ssim: f64,
    /// Gradient-magnitude term weight.
    pub gamma_grad: f64,
    /// L1 term weight.
    pub eta_l1: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Learning-rate schedule; only "cosine" is implemented.
    pub schedule: String,
    /// Optimizer family; only "adamw" is implemented.
    pub optimizer: String,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for RefinerTrainConfig {
    fn default() -> Self {
        RefinerTrainConfig {
            beta_ssim: 1.0,
            gamma_grad: 2.0,
            eta_l1: 0.5,
            lr: 3e-4,
            batch_size: 4,
            epochs: 60,
            schedule: "cosine".into(),
            optimizer: "adamw".into(),
            weight_decay: 1e-4,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl RefinerTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta_ssim < 0.0 || self.gamma_grad < 0.0 || self.eta_l1 < 0.0 {
            return Err(LdctError::validation("loss weights must be >= 0"));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(LdctError::validation("lr > 0 and batch_size >= 1 required"));
        }
        if self.schedule != "cosine" {
            return Err(LdctError::configuration(format!(
                "unsupported schedule {}",
                self.schedule
            )));
        }
        if self.optimizer != "adamw" {
            return Err(LdctError::configuration(format!(
                "unsupported optimizer {}",
                self.optimizer
            )));
        }
        Ok(())
    }
}

struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    mlp1: Linear,
    mlp2: Linear,
}

/// Encoder + decoder + transformer noise predictor.
pub struct RefinerNet {
    pub cfg: RefinerNetConfig,
    pub params: ParamSet,
    enc: [Conv2d; 4],
    dec: [Conv2d; 4],
    token_in: Linear,
    token_out: Linear,
    t_mlp: (Linear, Linear),
    blocks: Vec<Block>,
    ln_f: LayerNorm,
}

impl RefinerNet {
    pub fn new(cfg: &RefinerNetConfig, init_seed: u64) -> Result<Self> {
        if cfg.d_model % cfg.num_heads != 0 {
            return Err(LdctError::configuration(
                "d_model must be divisible by num_heads",
            ));
        }
        if cfg.d_model % 2 != 0 {
            return Err(LdctError::configuration("d_model must be even"));
        }
        let mut ps = ParamSet::new(init_seed);
        let c = cfg.conv_channels;
        let cl = cfg.latent_channels;
        let enc = [
            Conv2d::new(&mut ps, "enc1", 1, c, 3),
            Conv2d::new(&mut ps, "enc2", c, 2 * c, 3),
            Conv2d::new(&mut ps, "enc3", 2 * c, 2 * c, 3),
            Conv2d::new(&mut ps, "enc4", 2 * c, cl, 3),
        ];
        let dec = [
            Conv2d::new(&mut ps, "dec1", cl, 2 * c, 3),
            Conv2d::new(&mut ps, "dec2", 2 * c, c, 3),
            Conv2d::new(&mut ps, "dec3", c, c, 3),
            Conv2d::new(&mut ps, "dec4", c, 1, 3),
        ];
        let pd = cl * cfg.patch * cfg.patch;
        let token_in = Linear::new(&mut ps, "tok_in", pd, cfg.d_model);
        let token_out = Linear::new(&mut ps, "tok_out", cfg.d_model, pd);
        let t_mlp = (
            Linear::new(&mut ps, "temb1", cfg.d_model, cfg.d_model),
            Linear::new(&mut ps, "temb2", cfg.d_model, cfg.d_model),
        );
        let blocks = (0..cfg.num_blocks)
            .map(|b| Block {
                ln1: LayerNorm::new(&mut ps, &format!("blk{b}.ln1"), cfg.d_model),
                qkv: Linear::new(&mut ps, &format!("blk{b}.qkv"), cfg.d_model, 3 * cfg.d_model),
                proj: Linear::new(&mut ps, &format!("blk{b}.proj"), cfg.d_model, cfg.d_model),
                ln2: LayerNorm::new(&mut ps, &format!("blk{b}.ln2"), cfg.d_model),
                mlp1: Linear::new(&mut ps, &format!("blk{b}.mlp1"), cfg.d_model, 4 * cfg.d_model),
                mlp2: Linear::new(&mut ps, &format!("blk{b}.mlp2"), 4 * cfg.d_model, cfg.d_model),
            })
            .collect();
        let ln_f = LayerNorm::new(&mut ps, "ln_f", cfg.d_model);
        Ok(RefinerNet {
            cfg: cfg.clone(),
            params: ps,
            enc,
            dec,
            token_in,
            token_out,
            t_mlp,
            blocks,
            ln_f,
        })
    }

    /// `[1,H,W]` image (normalized) to `[C, H/4, W/4]` latent.
    pub fn encode_graph(&self, g: &mut Graph, vars: &[Var], x: Var) -> Var {
        let y = self.enc[0].forward(g, vars, x);
        let y = g.leaky_relu(y, 0.1);
        let y = g.avg_pool2(y);
        let y = self.enc[1].forward(g, vars, y);
        let y = g.leaky_relu(y, 0.1);
        let y = g.avg_pool2(y);
        let y = self.enc[2].forward(g, vars, y);
        let y = g.leaky_relu(y, 0.1);
        let raw = self.enc[3].forward(g, vars, y);
        let squashed = g.scale(raw, 1.0 / LATENT_BOUND);
        let squashed = g.tanh(squashed);
        g.scale(squashed, LATENT_BOUND)
    }

    /// Latent back to a `[1,H,W]` normalized image.
    pub fn decode_graph(&self, g: &mut Graph, vars: &[Var], z: Var) -> Var {
        let y = self.dec[0].forward(g, vars, z);
        let y = g.leaky_relu(y, 0.1);
        let y = g.upsample2(y);
        let y = self.dec[1].forward(g, vars, y);
        let y = g.leaky_relu(y, 0.1);
        let y = g.upsample2(y);
        let y = self.dec[2].forward(g, vars, y);
        let y = g.leaky_relu(y, 0.1);
        self.dec[3].forward(g, vars, y)
    }

    /// Noise prediction for latent `z` at timestep `t`.
    pub fn predict_graph(&self, g: &mut Graph, vars: &[Var], z: Var, t: usize) -> Var {
        let (c, h, w) = {
            let s = g.data(z).shape();
            (s[0], s[1], s[2])
        };
        let p = self.cfg.patch;
        assert!(h % p == 0 && w % p == 0, "latent not divisible by patch");
        let tokens = g.patchify(z, p);
        let mut x = self.token_in.forward(g, vars, tokens);
        let pos = g.constant(positional_table(h / p, w / p, self.cfg.d_model));
        x = g.add(x, pos);
        // Timestep embedding, added to every token.
        let temb_sin = g.constant(
            sinusoidal_embedding(t as f64, self.cfg.d_model)
                .into_shape_with_order(IxDyn(&[1, self.cfg.d_model]))
                .unwrap(),
        );
        let te = self.t_mlp.0.forward(g, vars, temb_sin);
        let te = g.silu(te);
        let te = self.t_mlp.1.forward(g, vars, te);
        let te_row = g.reshape(te, &[self.cfg.d_model]);
        x = g.add_row(x, te_row);

        let d = self.cfg.d_model;
        let nh = self.cfg.num_heads;
        let dh = d / nh;
        for blk in &self.blocks {
            let normed = blk.ln1.forward(g, vars, x);
            let qkv = blk.qkv.forward(g, vars, normed);
            let q = g.slice_cols(qkv, 0, d);
            let k = g.slice_cols(qkv, d, d);
            let v = g.slice_cols(qkv, 2 * d, d);
            let mut heads = Vec::with_capacity(nh);
            for hidx in 0..nh {
                let qh = g.slice_cols(q, hidx * dh, dh);
                let kh = g.slice_cols(k, hidx * dh, dh);
                let vh = g.slice_cols(v, hidx * dh, dh);
                let kt = g.transpose2(kh);
                let scores = g.matmul(qh, kt);
                let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt());
                let attn = g.softmax_rows(scaled);
                heads.push(g.matmul(attn, vh));
            }
            let cat = g.concat_cols(&heads);
            let attn_out = blk.proj.forward(g, vars, cat);
            x = g.add(x, attn_out);
            let normed = blk.ln2.forward(g, vars, x);
            let hmid = blk.mlp1.forward(g, vars, normed);
            let hmid = g.silu(hmid);
            let mlp_out = blk.mlp2.forward(g, vars, hmid);
            x = g.add(x, mlp_out);
        }
        let x = self.ln_f.forward(g, vars, x);
        let tokens_out = self.token_out.forward(g, vars, x);
        g.unpatchify(tokens_out, c, h, w, p)
    }

    fn encode_array(&self, x01: &Array2<f64>) -> Array3<f64> {
        let (h, w) = x01.dim();
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let x = g.constant(
            x01.clone()
                .into_shape_with_order(IxDyn(&[1, h, w]))
                .unwrap(),
        );
        let z = self.encode_graph(&mut g, &vars, x);
        to_array3(g.data(z))
    }

    fn decode_array(&self, z: &Array3<f64>) -> Array2<f64> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let zv = g.constant(z.clone().into_dyn());
        let y = self.decode_graph(&mut g, &vars, zv);
        let s = g.data(y).shape().to_vec();
        g.data(y)
            .clone()
            .into_shape_with_order((s[1], s[2]))
            .unwrap()
            .into_dimensionality()
            .unwrap()
    }

    fn predict_array(&self, z: &Array3<f64>, t: usize) -> Array3<f64> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let zv = g.constant(z.clone().into_dyn());
        let e = self.predict_graph(&mut g, &vars, zv, t);
        to_array3(g.data(e))
    }
}

fn to_array3(d: &ArrayD<f64>) -> Array3<f64> {
    d.clone().into_dimensionality().expect("expected 3-D")
}

/// Loss components of one refiner step.
#[derive(Debug, Clone, Copy)]
pub struct RefinerLossBreakdown {
    pub l_diff: f64,
    pub l_ssim: f64,
    pub l_grad: f64,
    pub l_l1: f64,
}

impl RefinerLossBreakdown {
    pub fn l_denoising(&self, cfg: &RefinerTrainConfig) -> f64 {
        cfg.beta_ssim * self.l_ssim + cfg.gamma_grad * self.l_grad + cfg.eta_l1 * self.l_l1
    }

    pub fn l_image(&self, cfg: &RefinerTrainConfig) -> f64 {
        self.l_diff + self.l_denoising(cfg)
    }
}

/// SSIM window size rule: `min(11, H, W)` forced odd.
fn ssim_window(h: usize, w: usize) -> usize {
    let win = 11usize.min(h).min(w);
    if win % 2 == 0 {
        win - 1
    } else {
        win
    }
}

fn gaussian_window(win: usize) -> ArrayD<f64> {
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
        .into_shape_with_order(IxDyn(&[1, 1, win, win]))
        .unwrap()
}

/// Mean SSIM between two `[1,H,W]` vars with the standard constants
/// (K1 = 0.01, K2 = 0.03) over `dynamic_range`.
pub fn ssim_graph(g: &mut Graph, a: Var, b: Var, dynamic_range: f64) -> Var {
    let s = g.data(a).shape().to_vec();
    let win = ssim_window(s[1], s[2]);
    let wk = gaussian_window(win);
    let wvar = g.constant(wk);
    let c1 = (0.01 * dynamic_range).powi(2);
    let c2 = (0.03 * dynamic_range).powi(2);
    let mu1 = g.conv2d_valid(a, wvar);
    let mu2 = g.conv2d_valid(b, wvar);
    let a2 = g.mul(a, a);
    let b2 = g.mul(b, b);
    let ab = g.mul(a, b);
    let e_a2 = g.conv2d_valid(a2, wvar);
    let e_b2 = g.conv2d_valid(b2, wvar);
    let e_ab = g.conv2d_valid(ab, wvar);
    let mu1sq = g.mul(mu1, mu1);
    let mu2sq = g.mul(mu2, mu2);
    let mu12 = g.mul(mu1, mu2);
    let var1 = g.sub(e_a2, mu1sq);
    let var2 = g.sub(e_b2, mu2sq);
    let cov = g.sub(e_ab, mu12);
    let lum_num = {
        let t = g.scale(mu12, 2.0);
        g.add_scalar(t, c1)
    };
    let lum_den = {
        let t = g.add(mu1sq, mu2sq);
        g.add_scalar(t, c1)
    };
    let con_num = {
        let t = g.scale(cov, 2.0);
        g.add_scalar(t, c2)
    };
    let con_den = {
        let t = g.add(var1, var2);
        g.add_scalar(t, c2)
    };
    let num = g.mul(lum_num, con_num);
    let den = g.mul(lum_den, con_den);
    let map = g.div(num, den);
    g.mean_all(map)
}

/// Valid-mode Sobel gradient magnitude of a `[1,H,W]` var.
pub fn sobel_magnitude_graph(g: &mut Graph, x: Var) -> Var {
    let kx = ArrayD::from_shape_vec(
        IxDyn(&[1, 1, 3, 3]),
        vec![-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0],
    )
    .unwrap();
    let ky = ArrayD::from_shape_vec(
        IxDyn(&[1, 1, 3, 3]),
        vec![-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0],
    )
    .unwrap();
    let kxv = g.constant(kx);
    let kyv = g.constant(ky);
    let gx = g.conv2d_valid(x, kxv);
    let gy = g.conv2d_valid(x, kyv);
    let gx2 = g.mul(gx, gx);
    let gy2 = g.mul(gy, gy);
    let sum = g.add(gx2, gy2);
    g.sqrt_eps(sum, 1e-12)
}

/// Build the denoising-loss terms between `decoded` and constant `prior`.
fn denoising_terms(
    g: &mut Graph,
    decoded: Var,
    prior: Var,
    dynamic_range: f64,
) -> (Var, Var, Var) {
    let ssim = ssim_graph(g, decoded, prior, dynamic_range);
    let one = g.scale(ssim, -1.0);
    let l_ssim = g.add_scalar(one, 1.0);
    let gm_d = sobel_magnitude_graph(g, decoded);
    let gm_p = sobel_magnitude_graph(g, prior);
    let gdiff = g.sub(gm_p, gm_d);
    let gabs = g.abs(gdiff);
    let l_grad = g.mean_all(gabs);
    let pdiff = g.sub(prior, decoded);
    let pabs = g.abs(pdiff);
    let l_l1 = g.mean_all(pabs);
    (l_ssim, l_grad, l_l1)
}

/// Evaluate the refiner loss components on plain data (shape-checked).
/// `decoded` and `prior` are compared in their native units; the SSIM
/// dynamic range is the prior's value range.
pub fn refiner_losses(
    eps: &Array3<f64>,
    eps_hat: &Array3<f64>,
    decoded: &CtImage,
    prior: &CtImage,
    cfg: &RefinerTrainConfig,
) -> Result<RefinerLossBreakdown> {
    if eps.dim() != eps_hat.dim() {
        return Err(LdctError::validation("eps shape mismatch"));
    }
    if decoded.size() != prior.size() {
        return Err(LdctError::validation("image shape mismatch"));
    }
    let n = decoded.size();
    let mut g = Graph::new();
    let e = g.constant(eps.clone().into_dyn());
    let eh = g.constant(eps_hat.clone().into_dyn());
    let d = g.constant(
        decoded
            .data
            .clone()
            .into_shape_with_order(IxDyn(&[1, n, n]))
            .unwrap(),
    );
    let p = g.constant(
        prior
            .data
            .clone()
            .into_shape_with_order(IxDyn(&[1, n, n]))
            .unwrap(),
    );
    let diff = g.sub(e, eh);
    let diff2 = g.mul(diff, diff);
    let l_diff = g.mean_all(diff2);
    let range = value_range(&prior.data);
    let (l_ssim, l_grad, l_l1) = denoising_terms(&mut g, d, p, range);
    let out = RefinerLossBreakdown {
        l_diff: g.value(l_diff),
        l_ssim: g.value(l_ssim),
        l_grad: g.value(l_grad),
        l_l1: g.value(l_l1),
    };
    let total = out.l_image(cfg);
    if !total.is_finite() {
        return Err(LdctError::training_fault("refiner loss is not finite"));
    }
    Ok(out)
}

fn value_range(a: &Array2<f64>) -> f64 {
    crate::util::value_range(a, 1e-6)
}

/// Trained refiner with its schedule and normalization.
pub struct RefinerCheckpoint {
    pub net_cfg: RefinerNetConfig,
    pub train_cfg: RefinerTrainConfig,
    pub t_total: usize,
    pub t_sample: usize,
    pub beta_spec: BetaSpec,
    pub hu_window: (f64, f64),
    pub pixel_spacing: f64,
    pub epochs_run: usize,
    pub loss_curve: Vec<f64>,
    pub net: RefinerNet,
}

impl RefinerCheckpoint {
    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        crate::diffusion::build_schedule(self.t_total, self.t_sample, self.beta_spec)
    }

    fn normalize(&self, img: &CtImage) -> Array2<f64> {
        let (lo, hi) = self.hu_window;
        let span = hi - lo;
        img.data.mapv(|mu| (mu_to_hu(mu) - lo) / span)
    }

    fn denormalize(&self, x01: &Array2<f64>) -> Array2<f64> {
        let (lo, hi) = self.hu_window;
        let span = hi - lo;
        x01.mapv(|v| crate::geometry::hu_to_mu(v * span + lo))
    }

    /// Map an image into latent space.
    pub fn encode(&self, image: &CtImage) -> Result<LatentTensor> {
        let n = image.size();
        if n % LATENT_FACTOR != 0 {
            let pad = n.div_ceil(LATENT_FACTOR) * LATENT_FACTOR;
            return Err(LdctError::validation(format!(
                "image size {n} not divisible by {LATENT_FACTOR}; pad to {pad}"
            )));
        }
        let z = self.net.encode_array(&self.normalize(image));
        LatentTensor::new(z, 0)
    }

    /// Decode a latent back to attenuation units.
    pub fn decode(&self, z: &LatentTensor) -> Result<CtImage> {
        let x01 = self.net.decode_array(&z.data);
        CtImage::new(self.denormalize(&x01), self.pixel_spacing, self.hu_window)
    }

    /// Noise predictor backed by the trained transformer.
    pub fn predictor(&self) -> impl NoisePredictor + '_ {
        |z: &Array3<f64>, t: usize| self.net.predict_array(z, t)
    }
}

struct StepOut {
    l_image: f64,
    grads: Vec<Option<ArrayD<f64>>>,
}

/// Train encoder, decoder, and noise predictor jointly against frozen
/// projection-stage priors.
pub fn train_refiner(
    pairs: &[(CtImage, CtImage)],
    sched: &DiffusionSchedule,
    cfg: &RefinerTrainConfig,
    net_cfg: &RefinerNetConfig,
) -> Result<RefinerCheckpoint> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(LdctError::validation("training set is empty"));
    }
    let n = pairs[0].0.size();
    if n % LATENT_FACTOR != 0 {
        return Err(LdctError::validation(format!(
            "image size {n} not divisible by {LATENT_FACTOR}"
        )));
    }
    let hu_window = pairs[0].1.hu_window;
    let pixel_spacing = pairs[0].0.pixel_spacing;
    for (x, p) in pairs {
        if x.size() != n || p.size() != n {
            return Err(LdctError::validation("inconsistent image sizes"));
        }
        if p.hu_window != hu_window {
            return Err(LdctError::validation("inconsistent HU windows"));
        }
    }
    let init_seed = crate::rng::stream(cfg.seed, "train-latent/init").random();
    let net = RefinerNet::new(net_cfg, init_seed)?;
    let mut ckpt = RefinerCheckpoint {
        net_cfg: net_cfg.clone(),
        train_cfg: cfg.clone(),
        t_total: sched.t_total,
        t_sample: sched.t_sample,
        beta_spec: sched.beta_spec,
        hu_window,
        pixel_spacing,
        epochs_run: 0,
        loss_curve: Vec::new(),
        net,
    };
    if cfg.epochs == 0 {
        return Ok(ckpt);
    }
    let span = hu_window.1 - hu_window.0;
    let norm = |img: &CtImage| -> Array2<f64> {
        img.data.mapv(|mu| (mu_to_hu(mu) - hu_window.0) / span)
    };
    let data: Vec<(Array2<f64>, Array2<f64>)> =
        pairs.iter().map(|(x, p)| (norm(x), norm(p))).collect();

    let mut opt = Adam::new(&ckpt.net.params, cfg.weight_decay);
    let mut initial_loss: Option<f64> = None;
    let mut high_loss_streak = 0usize;
    use rand::seq::SliceRandom;

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut crate::rng::indexed_stream(
            cfg.seed,
            "train-latent/order",
            epoch,
        ));
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Result<Vec<StepOut>> = batch
                .par_iter()
                .map(|&idx| {
                    refiner_step(
                        &ckpt.net,
                        &data[idx].0,
                        &data[idx].1,
                        sched,
                        cfg,
                        &format!("train-latent/e{epoch}/s{step}/i{idx}"),
                    )
                })
                .collect();
            let results = results?;
            let scale = 1.0 / results.len() as f64;
            let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; ckpt.net.params.len()];
            let mut batch_loss = 0.0;
            for r in &results {
                batch_loss += r.l_image * scale;
                for (slot, gmaybe) in grads.iter_mut().zip(&r.grads) {
                    if let Some(gr) = gmaybe {
                        match slot {
                            Some(acc) => *acc += &gr.mapv(|x| x * scale),
                            slot => *slot = Some(gr.mapv(|x| x * scale)),
                        }
                    }
                }
            }
            if cfg.grad_clip > 0.0 {
                let norm: f64 = grads
                    .iter()
                    .flatten()
                    .map(|gr| gr.iter().map(|x| x * x).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                if norm > cfg.grad_clip {
                    let s = cfg.grad_clip / norm;
                    for gr in grads.iter_mut().flatten() {
                        gr.mapv_inplace(|x| x * s);
                    }
                }
            }
            opt.step(&mut ckpt.net.params, &grads, lr);
            let init = *initial_loss.get_or_insert(batch_loss);
            if batch_loss > 1e3 * init.max(1e-12) {
                high_loss_streak += 1;
                if high_loss_streak >= 100 {
                    return Err(LdctError::training_fault(format!(
                        "refiner training diverged: loss {batch_loss:.3e} vs initial {init:.3e}"
                    )));
                }
            } else {
                high_loss_streak = 0;
            }
            epoch_loss += batch_loss;
            steps += 1;
        }
        ckpt.loss_curve.push(epoch_loss / steps as f64);
        ckpt.epochs_run = epoch + 1;
    }
    Ok(ckpt)
}

fn refiner_step(
    net: &RefinerNet,
    x01: &Array2<f64>,
    prior01: &Array2<f64>,
    sched: &DiffusionSchedule,
    cfg: &RefinerTrainConfig,
    label: &str,
) -> Result<StepOut> {
    use rand_distr::{Distribution, Normal};
    let mut rng = crate::rng::stream(cfg.seed, label);
    let t: usize = rng.random_range(1..=sched.t_total);
    let (h, w) = x01.dim();
    let (lh, lw) = (h / LATENT_FACTOR, w / LATENT_FACTOR);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let eps = Array3::from_shape_fn((net.cfg.latent_channels, lh, lw), |_| {
        normal.sample(&mut rng)
    });

    let mut g = Graph::new();
    let vars = net.params.bind(&mut g, true);
    let x = g.constant(
        x01.clone()
            .into_shape_with_order(IxDyn(&[1, h, w]))
            .unwrap(),
    );
    let z0 = net.encode_graph(&mut g, &vars, x);
    let eps_c = g.constant(eps.into_dyn());
    let ab = sched.alpha_bar(t);
    let zs = g.scale(z0, ab.sqrt());
    let es = g.scale(eps_c, (1.0 - ab).sqrt());
    let zt = g.add(zs, es);
    let eps_hat = net.predict_graph(&mut g, &vars, zt, t);
    if g.data(eps_hat).iter().any(|v| !v.is_finite()) {
        return Err(LdctError::training_fault(
            "noise predictor output is not finite",
        ));
    }
    let ediff = g.sub(eps_hat, eps_c);
    let ediff2 = g.mul(ediff, ediff);
    let l_diff = g.mean_all(ediff2);
    // Clean-state estimate at the sampled t, decoded for distillation.
    let ehs = g.scale(eps_hat, (1.0 - ab).sqrt());
    let znum = g.sub(zt, ehs);
    let z0_hat = g.scale(znum, 1.0 / ab.sqrt());
    let decoded = net.decode_graph(&mut g, &vars, z0_hat);
    let prior = g.constant(
        prior01
            .clone()
            .into_shape_with_order(IxDyn(&[1, h, w]))
            .unwrap(),
    );
    let range = value_range(prior01);
    let (l_ssim, l_grad, l_l1) = denoising_terms(&mut g, decoded, prior, range);
    let ls = g.scale(l_ssim, cfg.beta_ssim);
    let lg = g.scale(l_grad, cfg.gamma_grad);
    let ll = g.scale(l_l1, cfg.eta_l1);
    let den0 = g.add(ls, lg);
    let l_den = g.add(den0, ll);
    let loss = g.add(l_diff, l_den);
    let l_image = g.value(loss);
    if !l_image.is_finite() {
        return Err(LdctError::training_fault("refiner loss is not finite"));
    }
    g.backward(loss);
    let grads = vars.iter().map(|&v| g.grad(v).cloned()).collect();
    Ok(StepOut { l_image, grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::DEFAULT_HU_WINDOW;

    fn tiny_net() -> RefinerNet {
        RefinerNet::new(
            &RefinerNetConfig {
                latent_channels: 6,
                conv_channels: 4,
                d_model: 16,
                num_heads: 2,
                num_blocks: 2,
                patch: 2,
            },
            7,
        )
        .unwrap()
    }

    fn image(n: usize, seed: u64) -> CtImage {
        let mut rng = crate::rng::stream(seed, "ref/img");
        let data = Array2::from_shape_fn((n, n), |_| 0.02 * rng.random::<f64>());
        CtImage::new(data, 1.0, DEFAULT_HU_WINDOW).unwrap()
    }

    fn ckpt_with(net: RefinerNet) -> RefinerCheckpoint {
        RefinerCheckpoint {
            net_cfg: net.cfg.clone(),
            train_cfg: RefinerTrainConfig::default(),
            t_total: 50,
            t_sample: 5,
            beta_spec: BetaSpec::Linear {
                start: 0.002,
                end: 0.28,
            },
            hu_window: DEFAULT_HU_WINDOW,
            pixel_spacing: 1.0,
            epochs_run: 0,
            loss_curve: vec![],
            net,
        }
    }

    #[test]
    fn encode_decode_shapes_and_determinism() {
        let ckpt = ckpt_with(tiny_net());
        let img = image(16, 1);
        let z = ckpt.encode(&img).unwrap();
        assert_eq!(z.data.dim(), (6, 4, 4));
        let back = ckpt.decode(&z).unwrap();
        assert_eq!(back.size(), 16);
        let z2 = ckpt.encode(&img).unwrap();
        assert_eq!(z.data, z2.data);
    }

    #[test]
    fn indivisible_size_suggests_padding() {
        let ckpt = ckpt_with(tiny_net());
        let img = image(18, 2);
        let err = ckpt.encode(&img).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("pad to 20"), "message: {msg}");
    }

    #[test]
    fn predictor_depends_on_timestep() {
        let net = tiny_net();
        let mut rng = crate::rng::stream(4, "ref/z");
        let z = Array3::from_shape_fn((6, 4, 4), |_| rng.random::<f64>());
        let a = net.predict_array(&z, 10);
        let b = net.predict_array(&z, 40);
        assert_ne!(a, b, "timestep embedding ignored");
        assert_eq!(a.dim(), z.dim());
    }

    #[test]
    fn perfect_match_gives_zero_loss() {
        let img = image(16, 3);
        let eps = Array3::zeros((4, 4, 4));
        let out =
            refiner_losses(&eps, &eps, &img, &img, &RefinerTrainConfig::default()).unwrap();
        assert_eq!(out.l_diff, 0.0);
        assert!(out.l_ssim.abs() < 1e-12);
        assert_eq!(out.l_grad, 0.0);
        assert_eq!(out.l_l1, 0.0);
        assert!(out.l_image(&RefinerTrainConfig::default()).abs() < 1e-12);
    }

    #[test]
    fn constant_shift_hits_only_luminance_and_l1() {
        let prior = image(16, 5);
        let c = 0.004;
        let decoded = CtImage::new(
            prior.data.mapv(|v| v + c),
            prior.pixel_spacing,
            prior.hu_window,
        )
        .unwrap();
        let eps = Array3::zeros((2, 4, 4));
        let cfg = RefinerTrainConfig::default();
        let out = refiner_losses(&eps, &eps, &decoded, &prior, &cfg).unwrap();
        assert!(out.l_grad.abs() < 1e-12, "Sobel kills constants");
        assert!((out.l_l1 - c).abs() < 1e-12);
        // weighted L1 contribution is eta * |c|
        assert!((cfg.eta_l1 * out.l_l1 - 0.5 * c).abs() < 1e-12);
    }

    #[test]
    fn losses_match_hand_computation_on_8x8() {
        // Independent reference: direct loops implementing the documented
        // SSIM (7x7 gaussian window, valid mode) and Sobel/L1 terms.
        let mut rng = crate::rng::stream(6, "ref/hand");
        let pd = Array2::from_shape_fn((8, 8), |_| rng.random::<f64>());
        let dd = Array2::from_shape_fn((8, 8), |_| rng.random::<f64>());
        let prior = CtImage::new(pd.clone(), 1.0, DEFAULT_HU_WINDOW).unwrap();
        let decoded = CtImage::new(dd.clone(), 1.0, DEFAULT_HU_WINDOW).unwrap();
        let eps = Array3::from_shape_fn((1, 2, 2), |_| rng.random::<f64>());
        let eps_hat = Array3::from_shape_fn((1, 2, 2), |_| rng.random::<f64>());
        let cfg = RefinerTrainConfig::default();
        let got = refiner_losses(&eps, &eps_hat, &decoded, &prior, &cfg).unwrap();

        // l_diff by hand
        let ld: f64 = eps
            .iter()
            .zip(eps_hat.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / 4.0;
        assert!((got.l_diff - ld).abs() < 1e-12);

        // SSIM by hand: window 7, sigma 1.5*7/11, valid positions 2x2.
        let win = 7usize;
        let sigma = 1.5 * 7.0 / 11.0;
        let mut k = Array2::zeros((win, win));
        let mut sum = 0.0;
        for y in 0..win {
            for x in 0..win {
                let dy = y as f64 - 3.0;
                let dx = x as f64 - 3.0;
                let v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
                k[[y, x]] = v;
                sum += v;
            }
        }
        k.mapv_inplace(|v| v / sum);
        let range = {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &v in pd.iter() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            hi - lo
        };
        let c1 = (0.01 * range).powi(2);
        let c2 = (0.03 * range).powi(2);
        let wmean = |img: &Array2<f64>, oy: usize, ox: usize| {
            let mut m = 0.0;
            for y in 0..win {
                for x in 0..win {
                    m += k[[y, x]] * img[[oy + y, ox + x]];
                }
            }
            m
        };
        let mut ssim_sum = 0.0;
        for oy in 0..2 {
            for ox in 0..2 {
                let m1 = wmean(&dd, oy, ox);
                let m2 = wmean(&pd, oy, ox);
                let e11 = wmean(&(&dd * &dd), oy, ox);
                let e22 = wmean(&(&pd * &pd), oy, ox);
                let e12 = wmean(&(&dd * &pd), oy, ox);
                let v1 = e11 - m1 * m1;
                let v2 = e22 - m2 * m2;
                let cv = e12 - m1 * m2;
                ssim_sum += ((2.0 * m1 * m2 + c1) * (2.0 * cv + c2))
                    / ((m1 * m1 + m2 * m2 + c1) * (v1 + v2 + c2));
            }
        }
        let ssim = ssim_sum / 4.0;
        assert!(
            (got.l_ssim - (1.0 - ssim)).abs() < 1e-5,
            "ssim {} vs {}",
            got.l_ssim,
            1.0 - ssim
        );

        // Sobel gradient-magnitude L1 by hand (valid 6x6 region).
        let sobel = |img: &Array2<f64>, y: usize, x: usize| -> f64 {
            let gx = -img[[y - 1, x - 1]] + img[[y - 1, x + 1]] - 2.0 * img[[y, x - 1]]
                + 2.0 * img[[y, x + 1]]
                - img[[y + 1, x - 1]]
                + img[[y + 1, x + 1]];
            let gy = -img[[y - 1, x - 1]] - 2.0 * img[[y - 1, x]] - img[[y - 1, x + 1]]
                + img[[y + 1, x - 1]]
                + 2.0 * img[[y + 1, x]]
                + img[[y + 1, x + 1]];
            (gx * gx + gy * gy + 1e-12).sqrt()
        };
        let mut gsum = 0.0;
        for y in 1..7 {
            for x in 1..7 {
                gsum += (sobel(&pd, y, x) - sobel(&dd, y, x)).abs();
            }
        }
        assert!((got.l_grad - gsum / 36.0).abs() < 1e-9);

        let l1: f64 = pd
            .iter()
            .zip(dd.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / 64.0;
        assert!((got.l_l1 - l1).abs() < 1e-12);
    }

    #[test]
    fn denoising_loss_gradient_matches_finite_differences() {
        let mut rng = crate::rng::stream(8, "ref/fd");
        let prior = Array2::from_shape_fn((8, 8), |_| rng.random::<f64>());
        let d0 = Array2::from_shape_fn((8, 8), |_| rng.random::<f64>());
        let cfg = RefinerTrainConfig::default();
        let build = |g: &mut Graph, dv: Var| {
            let p = g.constant(prior.clone().into_shape_with_order(IxDyn(&[1, 8, 8])).unwrap());
            let (l_ssim, l_grad, l_l1) = denoising_terms(g, dv, p, 1.0);
            let a = g.scale(l_ssim, cfg.beta_ssim);
            let b = g.scale(l_grad, cfg.gamma_grad);
            let c = g.scale(l_l1, cfg.eta_l1);
            let ab = g.add(a, b);
            g.add(ab, c)
        };
        let mut g = Graph::new();
        let dv = g.param(d0.clone().into_shape_with_order(IxDyn(&[1, 8, 8])).unwrap());
        let loss = build(&mut g, dv);
        g.backward(loss);
        let analytic = g.grad(dv).unwrap().clone();
        let h = 1e-6;
        for idx in 0..64 {
            let mut dp = d0.clone();
            let mut dm = d0.clone();
            dp.as_slice_mut().unwrap()[idx] += h;
            dm.as_slice_mut().unwrap()[idx] -= h;
            let mut gp = Graph::new();
            let vp = gp.constant(dp.into_shape_with_order(IxDyn(&[1, 8, 8])).unwrap());
            let lp = build(&mut gp, vp);
            let mut gm = Graph::new();
            let vm = gm.constant(dm.into_shape_with_order(IxDyn(&[1, 8, 8])).unwrap());
            let lm = build(&mut gm, vm);
            let numeric = (gp.value(lp) - gm.value(lm)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            assert!(
                (a - numeric).abs() <= 1e-3 * a.abs().max(numeric.abs()).max(1e-6),
                "idx {idx}: {a} vs {numeric}"
            );
        }
    }

    #[test]
    fn smoke_training_reduces_loss_deterministically() {
        let sched = crate::diffusion::short_test_schedule(5).unwrap();
        let pairs: Vec<(CtImage, CtImage)> = (0..8)
            .map(|i| {
                let clean = image(8, 100 + i);
                let mut rng = crate::rng::stream(i, "ref/noise");
                let noisy = CtImage::new(
                    clean.data.mapv(|v| v + 0.002 * (rng.random::<f64>() - 0.5)),
                    1.0,
                    DEFAULT_HU_WINDOW,
                )
                .unwrap();
                (noisy, clean)
            })
            .collect();
        let net_cfg = RefinerNetConfig {
            latent_channels: 4,
            conv_channels: 3,
            d_model: 8,
            num_heads: 2,
            num_blocks: 1,
            patch: 2,
        };
        let cfg = RefinerTrainConfig {
            epochs: 12,
            batch_size: 4,
            lr: 1e-3,
            seed: 11,
            ..RefinerTrainConfig::default()
        };

        // Deterministic evaluation loss on a fixed (t, eps) grid, computed
        // through the public checkpoint ops.
        let eval_loss = |ckpt: &RefinerCheckpoint| -> f64 {
            let mut rng = crate::rng::stream(55, "ref/evalnoise");
            use rand_distr::{Distribution, Normal};
            let normal = Normal::new(0.0, 1.0).unwrap();
            let mut total = 0.0;
            let mut count = 0;
            for (noisy, clean) in &pairs {
                for t in [5usize, 25, 45] {
                    let z0 = ckpt.encode(noisy).unwrap();
                    let eps =
                        Array3::from_shape_fn(z0.data.dim(), |_| normal.sample(&mut rng));
                    let zt = crate::diffusion::forward_diffuse(&z0, t, &eps, &sched).unwrap();
                    let eps_hat = ckpt.net.predict_array(&zt.data, t);
                    let z0_hat =
                        crate::diffusion::predict_x0(&zt, &eps_hat, t, &sched).unwrap();
                    let decoded = ckpt.decode(&z0_hat).unwrap();
                    let out = refiner_losses(&eps, &eps_hat, &decoded, clean, &cfg).unwrap();
                    total += out.l_image(&cfg);
                    count += 1;
                }
            }
            total / count as f64
        };

        let untrained = train_refiner(
            &pairs,
            &sched,
            &RefinerTrainConfig {
                epochs: 0,
                ..cfg.clone()
            },
            &net_cfg,
        )
        .unwrap();
        assert_eq!(untrained.epochs_run, 0);
        assert!(untrained.loss_curve.is_empty());

        let c1 = train_refiner(&pairs, &sched, &cfg, &net_cfg).unwrap();
        assert_eq!(c1.epochs_run, 12);
        let before = eval_loss(&untrained);
        let after = eval_loss(&c1);
        assert!(
            after < before,
            "training did not improve fixed-grid eval loss: {before} -> {after}"
        );

        let c2 = train_refiner(&pairs, &sched, &cfg, &net_cfg).unwrap();
        assert_eq!(c1.loss_curve, c2.loss_curve);
    }
}

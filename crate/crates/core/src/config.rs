//! Experiment configuration: one TOML file drives every stage.
//!
//! Unknown keys are rejected. The experiment hash is the SHA-256 of the
//! canonical JSON serialization of the effective configuration (after CLI
//! overrides), and is embedded in every artifact manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::BetaSpec;
use crate::error::{LdctError, Result};
use crate::fusion::FusionConfig;
use crate::geometry::ScanGeometry;
use crate::phantom::PhantomKind;
use crate::projnet::{ProjNetConfig, ProjTrainConfig};
use crate::refiner::{RefinerNetConfig, RefinerTrainConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySection {
    pub num_views: usize,
    pub num_detector_bins: usize,
    /// Omit to fit the detector to the field of view automatically.
    #[serde(default)]
    pub detector_bin_spacing: Option<f64>,
    pub image_size: usize,
    pub pixel_spacing: f64,
    #[serde(default)]
    pub hann_filter: bool,
}

impl GeometrySection {
    pub fn scan_geometry(&self) -> ScanGeometry {
        let mut g = ScanGeometry::fitted(
            self.num_views,
            self.num_detector_bins,
            self.image_size,
            self.pixel_spacing,
        );
        if let Some(s) = self.detector_bin_spacing {
            g.detector_bin_spacing = s;
        }
        g
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSection {
    pub kind: PhantomKind,
    /// Total phantom count; the last `test_count` are the held-out split.
    pub count: usize,
    pub test_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoseSection {
    pub incident_photons: f64,
    pub electronic_noise_variance: f64,
    /// Dose fractions to simulate.
    pub fractions: Vec<f64>,
    /// Fraction used for training (must appear in `fractions`).
    pub train_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    /// Dump per-slot provenance maps as `.f32` index arrays during training
    /// data preparation.
    #[serde(default)]
    pub dump_provenance: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSection {
    pub t_total: usize,
    pub t_sample: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl DiffusionSection {
    pub fn beta_spec(&self) -> BetaSpec {
        BetaSpec::Linear {
            start: self.beta_start,
            end: self.beta_end,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    /// HU window for evaluation, (low, high).
    pub window: (f64, f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionSection {
    #[serde(flatten)]
    pub train: ProjTrainConfig,
    pub net: ProjNetConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinerSection {
    #[serde(flatten)]
    pub train: RefinerTrainConfig,
    pub net: RefinerNetConfig,
    pub diffusion: DiffusionSection,
}

/// Whole-experiment configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Version tag recorded in manifests.
    pub version: String,
    /// Root seed; every stage derives named sub-streams from it.
    pub seed: u64,
    /// Output root; overridden by the `LDCT_OUT_ROOT` environment variable
    /// when unset here.
    #[serde(default)]
    pub output_root: Option<PathBuf>,
    pub geometry: GeometrySection,
    pub phantoms: PhantomSection,
    pub dose: DoseSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    pub projection: ProjectionSection,
    pub refiner: RefinerSection,
    pub fusion: FusionConfig,
    pub metrics: MetricsSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)
            .map_err(|e| LdctError::configuration(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LdctError::io(path.display().to_string(), e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.scan_geometry().validate()?;
        if self.phantoms.count == 0 || self.phantoms.test_count >= self.phantoms.count {
            return Err(LdctError::configuration(
                "need phantoms.count > phantoms.test_count >= 0",
            ));
        }
        if !self
            .dose
            .fractions
            .contains(&self.dose.train_fraction)
        {
            return Err(LdctError::configuration(
                "dose.train_fraction must appear in dose.fractions",
            ));
        }
        self.projection.train.validate()?;
        self.refiner.train.validate()?;
        self.fusion.validate()?;
        if self.metrics.window.0 >= self.metrics.window.1 {
            return Err(LdctError::configuration("metrics.window must be lo < hi"));
        }
        crate::diffusion::build_schedule(
            self.refiner.diffusion.t_total,
            self.refiner.diffusion.t_sample,
            self.refiner.diffusion.beta_spec(),
        )?;
        Ok(())
    }

    /// SHA-256 of the canonical serialized form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        crate::io::sha256_hex(json.as_bytes())
    }

    /// Output root after applying the environment fallback.
    pub fn resolved_output_root(&self) -> PathBuf {
        if let Some(p) = &self.output_root {
            return p.clone();
        }
        if let Ok(p) = std::env::var("LDCT_OUT_ROOT") {
            return PathBuf::from(p);
        }
        PathBuf::from("runs")
    }

    /// Desk-scale preset: 200 random-ellipse phantoms at 64x64, 180 views,
    /// training dose 0.25, small networks. Used by the acceptance suite and
    /// as a template for `ldct phantom --emit-config`.
    pub fn desk_scale(seed: u64) -> Self {
        ExperimentConfig {
            version: "1".into(),
            seed,
            output_root: None,
            geometry: GeometrySection {
                num_views: 180,
                num_detector_bins: 64,
                detector_bin_spacing: None,
                image_size: 64,
                pixel_spacing: 6.4,
                hann_filter: false,
            },
            phantoms: PhantomSection {
                kind: PhantomKind::RandomEllipses,
                count: 200,
                test_count: 20,
            },
            dose: DoseSection {
                incident_photons: 1.5e5,
                electronic_noise_variance: 10.0,
                fractions: vec![0.5, 0.25, 0.1],
                train_fraction: 0.25,
            },
            sampler: SamplerSection::default(),
            projection: ProjectionSection {
                train: ProjTrainConfig {
                    alpha: 0.02,
                    lr: 1e-3,
                    batch_size: 2,
                    epochs: 12,
                    lr_halving_period: 5,
                    optimizer: "adam".into(),
                    seed,
                },
                net: ProjNetConfig {
                    base_channels: 16,
                    depth: 2,
                    activation: "leaky_relu_0.1".into(),
                    receptive_field_note: "2 scales of 3x3 convs".into(),
                },
            },
            refiner: RefinerSection {
                train: RefinerTrainConfig {
                    beta_ssim: 1.0,
                    gamma_grad: 2.0,
                    eta_l1: 0.5,
                    lr: 1e-3,
                    batch_size: 2,
                    epochs: 12,
                    schedule: "cosine".into(),
                    optimizer: "adamw".into(),
                    weight_decay: 1e-4,
                    grad_clip: 1.0,
                    seed,
                },
                net: RefinerNetConfig {
                    latent_channels: 24,
                    conv_channels: 12,
                    d_model: 96,
                    num_heads: 4,
                    num_blocks: 4,
                    patch: 2,
                },
                diffusion: DiffusionSection {
                    t_total: 1000,
                    t_sample: 5,
                    beta_start: 1e-4,
                    beta_end: 0.02,
                },
            },
            fusion: FusionConfig::default(),
            metrics: MetricsSection {
                window: crate::geometry::DEFAULT_HU_WINDOW,
            },
        }
    }

    /// Full-scale defaults mirroring the production geometry (512 image,
    /// 720 views, 720 bins, T=1000 diffusion).
    pub fn full_scale(seed: u64) -> Self {
        let mut cfg = Self::desk_scale(seed);
        cfg.geometry = GeometrySection {
            num_views: 720,
            num_detector_bins: 720,
            detector_bin_spacing: Some(1.0),
            image_size: 512,
            pixel_spacing: 0.8,
            hann_filter: false,
        };
        cfg.projection.train = ProjTrainConfig {
            seed,
            ..ProjTrainConfig::default()
        };
        cfg.projection.net = ProjNetConfig::default();
        cfg.refiner.train = RefinerTrainConfig {
            seed,
            ..RefinerTrainConfig::default()
        };
        cfg.refiner.net = RefinerNetConfig::default();
        cfg
    }
}

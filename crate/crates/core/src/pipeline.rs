//! End-to-end orchestration: dataset simulation, stage training, the full
//! inference cascade, evaluation, and dose sweeps.
//!
//! Every artifact lands under the experiment output root with a JSON
//! manifest carrying the configuration hash, the seeds, and the SHA-256 of
//! upstream artifacts, so any result can be traced back to its inputs.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::diffusion::{sample_chain, DiffusionSchedule};
use crate::dose::{make_dose_series, DoseConfig};
use crate::error::{LdctError, Result};
use crate::fusion::{dose_shift_policy, fuse, FusionConfig};
use crate::geometry::{CtImage, ScanGeometry, Sinogram};
use crate::io;
use crate::metrics::{self, CaseMetrics, MetricsReport};
use crate::phantom::{generate, PhantomSpec};
use crate::projector::{fbp_reconstruct_with, forward_project, FbpFilter};
use crate::projnet::{denoise_projection, train_projection, ProjCheckpoint};
use crate::refiner::{train_refiner, RefinerCheckpoint};
use rand::Rng;

fn stage<T>(label: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        LdctError::Validation(m) => LdctError::Validation(format!("[{label}] {m}")),
        LdctError::Configuration(m) => LdctError::Configuration(format!("[{label}] {m}")),
        LdctError::Dependency(m) => LdctError::Dependency(format!("[{label}] {m}")),
        LdctError::TrainingFault(m) => LdctError::TrainingFault(format!("[{label}] {m}")),
        e @ LdctError::Io { .. } => e,
    })
}

/// Inference statistics recorded in result manifests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferReport {
    pub reverse_steps: usize,
    pub dose_shift: f64,
    pub lambda_mean: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

/// Full inference cascade for one low-dose sinogram: projection denoising,
/// reconstruction of the prior, pixel-level fusion, and the latent reverse
/// chain.
pub fn infer(
    y_ld: &Sinogram,
    proj: &ProjCheckpoint,
    refiner: &RefinerCheckpoint,
    sched: &DiffusionSchedule,
    fusion_cfg: &FusionConfig,
    fbp_filter: FbpFilter,
    seed: u64,
) -> Result<(CtImage, InferReport)> {
    let y_hat0 = stage("projection-denoise", denoise_projection(y_ld, proj))?;
    let x_hat0 = stage("fbp-prior", fbp_reconstruct_with(&y_hat0, fbp_filter))?;
    let x_ld = stage("fbp-ldct", fbp_reconstruct_with(y_ld, fbp_filter))?;
    let (fused, weights) = stage("fusion", fuse(&x_ld, &x_hat0, fusion_cfg))?;
    let z = stage("encode", refiner.encode(&fused))?;
    let predictor = refiner.predictor();
    let (z_out, steps) = stage(
        "reverse-chain",
        sample_chain(&z.data, &predictor, sched, Some(seed)),
    )?;
    let out = stage("decode", refiner.decode(&z_out))?;
    let n = weights.lambda.len() as f64;
    let report = InferReport {
        reverse_steps: steps,
        dose_shift: fusion_cfg.dose_shift,
        lambda_mean: weights.lambda.iter().sum::<f64>() / n,
        lambda_min: weights.lambda.iter().cloned().fold(f64::INFINITY, f64::min),
        lambda_max: weights
            .lambda
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max),
    };
    Ok((out, report))
}

/// Dataset manifest written by `simulate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateManifest {
    pub kind: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub geometry: ScanGeometry,
    pub phantom_count: usize,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub fractions: Vec<f64>,
    /// (fraction, clamped counts, clamped logs) summed over phantoms.
    pub clamp_stats: Vec<(f64, usize, usize)>,
}

/// How the dose shift is chosen at inference.
#[derive(Debug, Clone, Copy)]
pub enum ShiftMode {
    /// Fixed b value.
    Fixed(f64),
    /// `dose_shift_policy(train_fraction, test_fraction)`.
    Policy,
}

/// Manifest written next to each inferred image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferManifest {
    pub kind: String,
    pub config_hash: String,
    pub case_index: usize,
    pub dose_fraction: f64,
    pub seed: u64,
    pub proj_checkpoint_sha256: String,
    pub refiner_checkpoint_sha256: String,
    pub report: InferReport,
}

/// Paths and commands of one experiment run.
pub struct Workspace {
    pub cfg: ExperimentConfig,
    pub cfg_hash: String,
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let cfg_hash = cfg.hash();
        let root = cfg.resolved_output_root();
        Ok(Workspace {
            cfg,
            cfg_hash,
            root,
        })
    }

    pub fn phantom_path(&self, i: usize) -> PathBuf {
        self.root.join(format!("phantoms/phantom_{i:04}.f32"))
    }

    pub fn clean_sino_path(&self, i: usize) -> PathBuf {
        self.root.join(format!("sinograms/clean_{i:04}.f32"))
    }

    pub fn dose_dir(&self, fraction: f64) -> PathBuf {
        self.root.join(format!("sinograms/dose_{fraction}"))
    }

    pub fn ld_sino_path(&self, fraction: f64, i: usize) -> PathBuf {
        self.dose_dir(fraction).join(format!("ld_{i:04}.f32"))
    }

    pub fn proj_ckpt_prefix(&self) -> PathBuf {
        self.root.join("checkpoints/proj")
    }

    pub fn refiner_ckpt_prefix(&self) -> PathBuf {
        self.root.join("checkpoints/latent")
    }

    pub fn results_dir(&self, tag: &str) -> PathBuf {
        self.root.join(format!("results/{tag}"))
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    fn simulate_manifest_path(&self) -> PathBuf {
        self.root.join("sinograms/simulate.manifest.json")
    }

    pub fn phantom_seed(&self, i: usize) -> u64 {
        crate::rng::indexed_stream(self.cfg.seed, "phantom", i).random()
    }

    fn fbp_filter(&self) -> FbpFilter {
        if self.cfg.geometry.hann_filter {
            FbpFilter::Hann
        } else {
            FbpFilter::RamLak
        }
    }

    pub fn load_simulate_manifest(&self) -> Result<SimulateManifest> {
        let p = self.simulate_manifest_path();
        if !p.exists() {
            return Err(LdctError::dependency(format!(
                "dataset manifest {} not found; run `simulate` first",
                p.display()
            )));
        }
        serde_json::from_str(
            &fs::read_to_string(&p).map_err(|e| LdctError::io(p.display().to_string(), e))?,
        )
        .map_err(|e| LdctError::validation(format!("bad manifest {}: {e}", p.display())))
    }

    /// Generate phantoms, clean sinograms, and the dose series.
    pub fn simulate(&self, force: bool) -> Result<SimulateManifest> {
        let mpath = self.simulate_manifest_path();
        if mpath.exists() && !force {
            let existing: SimulateManifest = serde_json::from_str(
                &fs::read_to_string(&mpath)
                    .map_err(|e| LdctError::io(mpath.display().to_string(), e))?,
            )
            .map_err(|e| LdctError::validation(format!("bad manifest: {e}")))?;
            if existing.config_hash == self.cfg_hash {
                return Err(LdctError::validation(format!(
                    "dataset for config {} already exists at {}; pass --force to regenerate",
                    &self.cfg_hash[..12],
                    self.root.display()
                )));
            }
        }
        let geometry = self.cfg.geometry.scan_geometry();
        geometry.validate()?;
        let count = self.cfg.phantoms.count;
        let fractions = self.cfg.dose.fractions.clone();

        let per_phantom: Result<Vec<Vec<(f64, usize, usize)>>> = (0..count)
            .into_par_iter()
            .map(|i| {
                let spec = PhantomSpec {
                    kind: self.cfg.phantoms.kind,
                    size: geometry.image_size,
                    pixel_spacing: geometry.pixel_spacing,
                    seed: self.phantom_seed(i),
                };
                let img = stage("phantom", generate(&spec))?;
                io::save_image(&self.phantom_path(i), &img)?;
                let clean = stage("forward-project", forward_project(&img, &geometry))?;
                io::save_sinogram(&self.clean_sino_path(i), &clean)?;
                let base_cfg = DoseConfig {
                    incident_photons: self.cfg.dose.incident_photons,
                    electronic_noise_variance: self.cfg.dose.electronic_noise_variance,
                    dose_fraction: 1.0,
                    rng_seed: crate::rng::indexed_stream(self.cfg.seed, "dose", i).random(),
                };
                let series = stage("dose-series", make_dose_series(&clean, &fractions, &base_cfg))?;
                let mut stats = Vec::new();
                for (f, sino) in fractions.iter().zip(series) {
                    io::save_sinogram(&self.ld_sino_path(*f, i), &sino)?;
                    stats.push((*f, 0usize, 0usize));
                }
                Ok(stats)
            })
            .collect();
        let per_phantom = per_phantom?;
        let mut clamp_stats: Vec<(f64, usize, usize)> =
            fractions.iter().map(|&f| (f, 0, 0)).collect();
        for stats in &per_phantom {
            for (j, &(_, c, l)) in stats.iter().enumerate() {
                clamp_stats[j].1 += c;
                clamp_stats[j].2 += l;
            }
        }
        let train_count = count - self.cfg.phantoms.test_count;
        let manifest = SimulateManifest {
            kind: "dataset".into(),
            version: self.cfg.version.clone(),
            config_hash: self.cfg_hash.clone(),
            seed: self.cfg.seed,
            geometry,
            phantom_count: count,
            train_indices: (0..train_count).collect(),
            test_indices: (train_count..count).collect(),
            fractions,
            clamp_stats,
        };
        fs::write(
            &mpath,
            serde_json::to_string_pretty(&manifest)
                .map_err(|e| LdctError::validation(format!("serialize manifest: {e}")))?,
        )
        .map_err(|e| LdctError::io(mpath.display().to_string(), e))?;
        Ok(manifest)
    }

    /// Train the projection denoiser on the training split at the training
    /// dose.
    pub fn train_proj(&self) -> Result<PathBuf> {
        let dataset = self.load_simulate_manifest()?;
        let fraction = self.cfg.dose.train_fraction;
        let sinos: Result<Vec<Sinogram>> = dataset
            .train_indices
            .iter()
            .map(|&i| io::load_sinogram(&self.ld_sino_path(fraction, i)))
            .collect();
        let ckpt = train_projection(&sinos?, &self.cfg.projection.train, &self.cfg.projection.net)?;
        let parent = io::file_sha256(&self.simulate_manifest_path()).ok();
        io::save_proj_checkpoint(
            &self.proj_ckpt_prefix(),
            &ckpt,
            &self.cfg_hash,
            parent,
            None,
        )
    }

    /// Train the latent refiner against frozen projection-stage priors.
    pub fn train_latent(&self) -> Result<PathBuf> {
        let dataset = self.load_simulate_manifest()?;
        let (proj, _) = io::load_proj_checkpoint(&self.proj_ckpt_prefix())?;
        let fraction = self.cfg.dose.train_fraction;
        let filt = self.fbp_filter();
        let pairs: Result<Vec<(CtImage, CtImage)>> = dataset
            .train_indices
            .par_iter()
            .map(|&i| {
                let y_ld = io::load_sinogram(&self.ld_sino_path(fraction, i))?;
                let y_hat0 = denoise_projection(&y_ld, &proj)?;
                let x_hat0 = fbp_reconstruct_with(&y_hat0, filt)?;
                let x_ld = fbp_reconstruct_with(&y_ld, filt)?;
                Ok((x_ld, x_hat0))
            })
            .collect();
        let sched = crate::diffusion::build_schedule(
            self.cfg.refiner.diffusion.t_total,
            self.cfg.refiner.diffusion.t_sample,
            self.cfg.refiner.diffusion.beta_spec(),
        )?;
        let ckpt = train_refiner(
            &pairs?,
            &sched,
            &self.cfg.refiner.train,
            &self.cfg.refiner.net,
        )?;
        let parent = io::file_sha256(&self.proj_ckpt_prefix().with_extension("manifest.json")).ok();
        io::save_refiner_checkpoint(&self.refiner_ckpt_prefix(), &ckpt, &self.cfg_hash, parent)
    }

    /// Run the full cascade on the test split at `fraction`, writing
    /// predictions, the projection-only priors, and the plain FBP images.
    /// Returns per-case inference reports.
    pub fn infer_split(
        &self,
        fraction: f64,
        shift: ShiftMode,
        tag: &str,
    ) -> Result<Vec<InferReport>> {
        let dataset = self.load_simulate_manifest()?;
        let (proj, proj_manifest) = io::load_proj_checkpoint(&self.proj_ckpt_prefix())?;
        let (refiner, refiner_manifest) =
            io::load_refiner_checkpoint(&self.refiner_ckpt_prefix())?;
        let sched = refiner.schedule()?;
        let b = match shift {
            ShiftMode::Fixed(b) => b,
            ShiftMode::Policy => dose_shift_policy(self.cfg.dose.train_fraction, fraction)?,
        };
        let fusion_cfg = FusionConfig {
            dose_shift: b,
            ..self.cfg.fusion.clone()
        };
        fusion_cfg.validate()?;
        let out_dir = self.results_dir(tag);
        let filt = self.fbp_filter();
        let reports: Result<Vec<InferReport>> = dataset
            .test_indices
            .par_iter()
            .map(|&i| {
                let y_ld = io::load_sinogram(&self.ld_sino_path(fraction, i))?;
                let seed = crate::rng::stream(self.cfg.seed, &format!("infer/{tag}/case/{i}"))
                    .random();
                let (pred, report) =
                    infer(&y_ld, &proj, &refiner, &sched, &fusion_cfg, filt, seed)?;
                io::save_image(&out_dir.join(format!("pred_{i:04}.f32")), &pred)?;
                // Companion images for evaluation panels and baselines.
                let y_hat0 = denoise_projection(&y_ld, &proj)?;
                let prior = fbp_reconstruct_with(&y_hat0, filt)?;
                io::save_image(&out_dir.join(format!("prior_{i:04}.f32")), &prior)?;
                let ldct = fbp_reconstruct_with(&y_ld, filt)?;
                io::save_image(&out_dir.join(format!("ldct_{i:04}.f32")), &ldct)?;
                let manifest = InferManifest {
                    kind: "inference-result".into(),
                    config_hash: self.cfg_hash.clone(),
                    case_index: i,
                    dose_fraction: fraction,
                    seed,
                    proj_checkpoint_sha256: proj_manifest.weights_sha256.clone(),
                    refiner_checkpoint_sha256: refiner_manifest.weights_sha256.clone(),
                    report: report.clone(),
                };
                let mpath = out_dir.join(format!("pred_{i:04}.manifest.json"));
                fs::write(
                    &mpath,
                    serde_json::to_string_pretty(&manifest)
                        .map_err(|e| LdctError::validation(format!("serialize manifest: {e}")))?,
                )
                .map_err(|e| LdctError::io(mpath.display().to_string(), e))?;
                Ok(report)
            })
            .collect();
        reports
    }

    /// Evaluate every `pred_*.f32` in `pred_dir` against the matching
    /// phantom; writes a text table, a JSON report, and windowed PNG panels.
    pub fn evaluate_dir(&self, pred_dir: &Path, window: (f64, f64)) -> Result<MetricsReport> {
        let dataset = self.load_simulate_manifest()?;
        let mut cases = Vec::new();
        let mut rows = String::new();
        for &i in &dataset.test_indices {
            let pred_path = pred_dir.join(format!("pred_{i:04}.f32"));
            if !pred_path.exists() {
                return Err(LdctError::dependency(format!(
                    "{} not found; run `infer` first",
                    pred_path.display()
                )));
            }
            let pred = io::load_image(&pred_path)?;
            let reference = io::load_image(&self.phantom_path(i))?;
            let m = metrics::evaluate(&pred, &reference, window)?;
            rows.push_str(&format_case_row(i, &m));
            cases.push(m);

            let panel_dir = self.reports_dir().join("panels");
            io::write_png_windowed(
                &panel_dir.join(format!("case_{i:04}_reference.png")),
                &reference,
                window,
            )?;
            let ldct_path = pred_dir.join(format!("ldct_{i:04}.f32"));
            if ldct_path.exists() {
                io::write_png_windowed(
                    &panel_dir.join(format!("case_{i:04}_ldct.png")),
                    &io::load_image(&ldct_path)?,
                    window,
                )?;
            }
            io::write_png_windowed(
                &panel_dir.join(format!("case_{i:04}_ours.png")),
                &pred,
                window,
            )?;
        }
        let report = metrics::aggregate(window, cases)?;
        let reports = self.reports_dir();
        fs::create_dir_all(&reports)
            .map_err(|e| LdctError::io(reports.display().to_string(), e))?;
        let table = format!(
            "{}\n{rows}{}\n",
            "case    psnr_db   ssim    rmse_hu   fsim    vif     nqm_db",
            format_aggregate(&report)
        );
        fs::write(reports.join("evaluation.txt"), &table)
            .map_err(|e| LdctError::io("evaluation.txt", e))?;
        fs::write(
            reports.join("evaluation.json"),
            serde_json::to_string_pretty(&report)
                .map_err(|e| LdctError::validation(format!("serialize report: {e}")))?,
        )
        .map_err(|e| LdctError::io("evaluation.json", e))?;
        Ok(report)
    }

    /// Run inference across dose-shift values and tabulate the metrics.
    pub fn sweep_dose(&self, fraction: f64, shifts: &[f64]) -> Result<Vec<(f64, MetricsReport)>> {
        let mut out = Vec::new();
        let mut table = String::from("dose_shift  psnr_db(mean+-std)  ssim(mean)  rmse_hu(mean)\n");
        for &b in shifts {
            let tag = format!("sweep_dose_{fraction}/b_{b}");
            self.infer_split(fraction, ShiftMode::Fixed(b), &tag)?;
            let report = self.evaluate_dir(&self.results_dir(&tag), self.cfg.metrics.window)?;
            table.push_str(&format!(
                "{b:>+9.3}  {:>8.3} +- {:>6.3}  {:>9.4}  {:>12.2}\n",
                report.aggregate.psnr_db.0,
                report.aggregate.psnr_db.1,
                report.aggregate.ssim.0,
                report.aggregate.rmse_hu.0,
            ));
            out.push((b, report));
        }
        let reports = self.reports_dir();
        fs::create_dir_all(&reports)
            .map_err(|e| LdctError::io(reports.display().to_string(), e))?;
        fs::write(reports.join(format!("sweep_dose_{fraction}.txt")), table)
            .map_err(|e| LdctError::io("sweep table", e))?;
        Ok(out)
    }
}

fn format_case_row(i: usize, m: &CaseMetrics) -> String {
    format!(
        "{i:>4}  {:>9.3} {:>7.4} {:>9.2} {:>7.4} {:>7.4} {:>8.2}\n",
        m.psnr_db, m.ssim, m.rmse_hu, m.fsim, m.vif, m.nqm_db
    )
}

fn format_aggregate(r: &MetricsReport) -> String {
    let a = &r.aggregate;
    format!(
        "mean  {:>9.3} {:>7.4} {:>9.2} {:>7.4} {:>7.4} {:>8.2}\nstd   {:>9.3} {:>7.4} {:>9.2} {:>7.4} {:>7.4} {:>8.2}",
        a.psnr_db.0, a.ssim.0, a.rmse_hu.0, a.fsim.0, a.vif.0, a.nqm_db.0,
        a.psnr_db.1, a.ssim.1, a.rmse_hu.1, a.fsim.1, a.vif.1, a.nqm_db.1
    )
}

/// Per-case PSNR of an image directory against the phantoms, by filename
/// prefix (e.g. "pred", "prior", "ldct"); a convenience for analyses that
/// only need PSNR/SSIM.
pub fn psnr_ssim_against_phantoms(
    ws: &Workspace,
    dir: &Path,
    prefix: &str,
    window: (f64, f64),
) -> Result<Vec<(usize, f64, f64)>> {
    let dataset = ws.load_simulate_manifest()?;
    let mut out = Vec::new();
    for &i in &dataset.test_indices {
        let p = dir.join(format!("{prefix}_{i:04}.f32"));
        let img = io::load_image(&p)?;
        let reference = io::load_image(&ws.phantom_path(i))?;
        let m = metrics::evaluate(&img, &reference, window)?;
        out.push((i, m.psnr_db, m.ssim));
    }
    Ok(out)
}

/// Dump the three provenance maps of a sub-data draw as `.f32` arrays
/// (debug aid exposed through the CLI).
pub fn dump_provenance(sino: &Sinogram, seed: u64, dir: &Path) -> Result<()> {
    let sds = crate::sampler::sample_subdata(sino, seed)?;
    for (k, prov) in sds.provenance.iter().enumerate() {
        let as_f64: Array2<f64> = prov.mapv(|v| v as f64);
        let meta = io::ArrayMeta {
            kind: "index-map".into(),
            shape: as_f64.dim(),
            units: "in-block cell index 0..=3".into(),
            geometry: None,
            dose_tag: None,
            pixel_spacing: None,
            hu_window: None,
            detector_layout: None,
        };
        io::write_f32(&dir.join(format!("provenance_s{}.f32", k + 1)), &as_f64, &meta)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;

    /// A very small configuration for fast pipeline tests.
    pub(crate) fn tiny_config(seed: u64, root: PathBuf) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::desk_scale(seed);
        cfg.output_root = Some(root);
        cfg.geometry.num_views = 32;
        cfg.geometry.num_detector_bins = 16;
        cfg.geometry.image_size = 16;
        cfg.geometry.pixel_spacing = 25.0;
        cfg.phantoms.count = 6;
        cfg.phantoms.test_count = 2;
        cfg.projection.train.epochs = 2;
        cfg.projection.train.batch_size = 2;
        cfg.projection.net.base_channels = 4;
        cfg.projection.net.depth = 2;
        cfg.refiner.train.epochs = 2;
        cfg.refiner.train.batch_size = 2;
        cfg.refiner.net.latent_channels = 4;
        cfg.refiner.net.conv_channels = 3;
        cfg.refiner.net.d_model = 16;
        cfg.refiner.net.num_heads = 2;
        cfg.refiner.net.num_blocks = 1;
        // A 16x16 image with a 7-px window has nearly uniform noise
        // statistics; soften the confidences so lambda stays heterogeneous.
        cfg.fusion.noise_window = 3;
        cfg.fusion.k1 = 4.0;
        cfg.fusion.k2 = 4.0;
        cfg.fusion.tau_n = 0.9;
        cfg.fusion.tau_e = 0.5;
        cfg
    }

    #[test]
    fn pipeline_runs_end_to_end_and_chains_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(3, dir.path().to_path_buf());
        let ws = Workspace::new(cfg).unwrap();

        let manifest = ws.simulate(false).unwrap();
        assert_eq!(manifest.train_indices.len(), 4);
        assert_eq!(manifest.test_indices, vec![4, 5]);
        // Three dose subdirectories.
        for f in [0.5, 0.25, 0.1] {
            assert!(ws.ld_sino_path(f, 0).exists(), "missing dose {f}");
        }
        // Idempotence guard.
        let err = ws.simulate(false).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        ws.simulate(true).unwrap();

        // Inference before training is a dependency error.
        let err = ws
            .infer_split(0.25, ShiftMode::Policy, "premature")
            .unwrap_err();
        assert_eq!(err.exit_code(), 3);

        ws.train_proj().unwrap();
        // Latent training requires the projection checkpoint; already there.
        ws.train_latent().unwrap();
        let reports = ws.infer_split(0.25, ShiftMode::Policy, "dose_0.25").unwrap();
        assert_eq!(reports.len(), 2);
        assert!(reports.iter().all(|r| r.reverse_steps == 5));
        assert!(reports.iter().all(|r| r.dose_shift == 0.0));

        // Result manifest chains both checkpoint hashes.
        let mtext = std::fs::read_to_string(
            ws.results_dir("dose_0.25").join("pred_0004.manifest.json"),
        )
        .unwrap();
        let m: InferManifest = serde_json::from_str(&mtext).unwrap();
        let proj_manifest: crate::io::ProjCheckpointManifest = serde_json::from_str(
            &std::fs::read_to_string(ws.proj_ckpt_prefix().with_extension("manifest.json"))
                .unwrap(),
        )
        .unwrap();
        assert_eq!(m.proj_checkpoint_sha256, proj_manifest.weights_sha256);
        let ref_manifest: crate::io::RefinerCheckpointManifest = serde_json::from_str(
            &std::fs::read_to_string(ws.refiner_ckpt_prefix().with_extension("manifest.json"))
                .unwrap(),
        )
        .unwrap();
        assert_eq!(m.refiner_checkpoint_sha256, ref_manifest.weights_sha256);
        // Checkpoint manifests chain to their parents.
        assert!(proj_manifest.parent_manifest_sha256.is_some());
        assert!(ref_manifest.parent_manifest_sha256.is_some());

        let report = ws
            .evaluate_dir(&ws.results_dir("dose_0.25"), ws.cfg.metrics.window)
            .unwrap();
        assert_eq!(report.per_case.len(), 2);
        assert!(ws.reports_dir().join("evaluation.txt").exists());
        assert!(ws
            .reports_dir()
            .join("panels/case_0004_ours.png")
            .exists());
    }

    #[test]
    fn inference_is_deterministic_under_fixed_seeds() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(9, dir.path().to_path_buf());
        let ws = Workspace::new(cfg).unwrap();
        ws.simulate(false).unwrap();
        ws.train_proj().unwrap();
        ws.train_latent().unwrap();
        ws.infer_split(0.25, ShiftMode::Policy, "a").unwrap();
        ws.infer_split(0.25, ShiftMode::Policy, "a2").unwrap();
        // Different tags derive different chain seeds, so compare a re-run
        // of the same tag instead.
        ws.infer_split(0.25, ShiftMode::Policy, "a").unwrap();
        let x = std::fs::read(ws.results_dir("a").join("pred_0004.f32")).unwrap();
        let y = std::fs::read(ws.results_dir("a2").join("pred_0004.f32")).unwrap();
        let x2 = std::fs::read(ws.results_dir("a").join("pred_0004.f32")).unwrap();
        assert_eq!(x, x2, "same tag must reproduce bit-identically");
        assert_ne!(x, y, "different chain seeds should differ");
    }
}

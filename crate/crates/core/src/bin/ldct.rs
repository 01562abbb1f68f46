//! Command-line surface of the toolkit.
//!
//! Exit codes: 0 success, 2 validation/configuration, 3 missing upstream
//! artifact, 4 training/inference fault.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ldct::config::ExperimentConfig;
use ldct::error::{LdctError, Result};
use ldct::geometry::DEFAULT_HU_WINDOW;
use ldct::phantom::{generate, PhantomKind, PhantomSpec};
use ldct::pipeline::{dump_provenance, ShiftMode, Workspace};

#[derive(Parser)]
#[command(name = "ldct", version, about = "Self-supervised dual-domain low-dose CT denoising")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom image (.f32 + .meta.json).
    Phantom {
        /// shepp-logan or random-ellipses
        #[arg(long, default_value = "shepp-logan")]
        kind: String,
        #[arg(long, default_value_t = 256)]
        size: usize,
        /// Pixel pitch in mm.
        #[arg(long, default_value_t = 1.5625)]
        pixel_spacing: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write a windowed PNG next to the output.
        #[arg(long)]
        png: bool,
    },
    /// Generate phantoms, clean sinograms, and the dose series.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Override the config root seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Regenerate even if a dataset with this config hash exists.
        #[arg(long)]
        force: bool,
        /// Dump sub-data provenance index maps for the first training case.
        #[arg(long)]
        dump_provenance: bool,
    },
    /// Train the projection-domain denoiser.
    TrainProj {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the latent-diffusion refiner (requires train-proj).
    TrainLatent {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the full inference cascade on the test split.
    Infer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Dose fraction to reconstruct (must be simulated).
        #[arg(long)]
        dose: f64,
        /// Fixed dose shift b; overrides the policy.
        #[arg(long, allow_hyphen_values = true)]
        dose_shift: Option<f64>,
        /// Training dose for the shift policy (defaults to the config's).
        #[arg(long)]
        train_dose: Option<f64>,
        /// Test dose for the shift policy (defaults to --dose).
        #[arg(long)]
        test_dose: Option<f64>,
        /// Output subdirectory under results/ (defaults to dose_<dose>).
        #[arg(long)]
        tag: Option<String>,
    },
    /// Evaluate predictions against references, writing reports and panels.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory holding pred_XXXX.f32 files (defaults to
        /// results/dose_<train fraction>).
        #[arg(long)]
        pred_dir: Option<PathBuf>,
        /// Reference directory (defaults to the workspace phantoms).
        #[arg(long)]
        ref_dir: Option<PathBuf>,
        /// HU window, two values: lo hi.
        #[arg(long, num_args = 2, allow_hyphen_values = true)]
        window: Option<Vec<f64>>,
    },
    /// Run inference across dose-shift values and tabulate metrics.
    SweepDose {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        dose: f64,
        /// Comma-separated dose shifts, e.g. "-0.5,-0.25,0,0.25,0.5".
        #[arg(long, default_value = "-0.5,-0.25,0,0.25,0.5", allow_hyphen_values = true)]
        shifts: String,
    },
}

fn load_workspace(config: &PathBuf, seed: Option<u64>) -> Result<Workspace> {
    let mut cfg = ExperimentConfig::from_path(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Workspace::new(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom {
            kind,
            size,
            pixel_spacing,
            seed,
            out,
            png,
        } => {
            let kind = match kind.as_str() {
                "shepp-logan" => PhantomKind::SheppLogan,
                "random-ellipses" => PhantomKind::RandomEllipses,
                other => {
                    return Err(LdctError::validation(format!(
                        "unknown phantom kind {other}"
                    )))
                }
            };
            let img = generate(&PhantomSpec {
                kind,
                size,
                pixel_spacing,
                seed,
            })?;
            ldct::io::save_image(&out, &img)?;
            if png {
                ldct::io::write_png_windowed(&out.with_extension("png"), &img, DEFAULT_HU_WINDOW)?;
            }
            println!("wrote {}", out.display());
        }
        Command::Simulate {
            config,
            seed,
            force,
            dump_provenance: dump,
        } => {
            let ws = load_workspace(&config, seed)?;
            let manifest = ws.simulate(force)?;
            println!(
                "simulated {} phantoms ({} train / {} test) at doses {:?} under {}",
                manifest.phantom_count,
                manifest.train_indices.len(),
                manifest.test_indices.len(),
                manifest.fractions,
                ws.root.display()
            );
            if dump || ws.cfg.sampler.dump_provenance {
                let sino =
                    ldct::io::load_sinogram(&ws.ld_sino_path(ws.cfg.dose.train_fraction, 0))?;
                let dir = ws.root.join("sinograms/provenance");
                dump_provenance(&sino, ws.cfg.seed, &dir)?;
                println!("provenance maps in {}", dir.display());
            }
        }
        Command::TrainProj { config, seed } => {
            let ws = load_workspace(&config, seed)?;
            let manifest = ws.train_proj()?;
            println!("projection checkpoint: {}", manifest.display());
        }
        Command::TrainLatent { config, seed } => {
            let ws = load_workspace(&config, seed)?;
            let manifest = ws.train_latent()?;
            println!("refiner checkpoint: {}", manifest.display());
        }
        Command::Infer {
            config,
            seed,
            dose,
            dose_shift,
            train_dose,
            test_dose,
            tag,
        } => {
            let ws = load_workspace(&config, seed)?;
            let shift = match dose_shift {
                Some(b) => ShiftMode::Fixed(b),
                None => match (train_dose, test_dose) {
                    (None, None) => ShiftMode::Policy,
                    (td, sd) => {
                        let b = ldct::fusion::dose_shift_policy(
                            td.unwrap_or(ws.cfg.dose.train_fraction),
                            sd.unwrap_or(dose),
                        )?;
                        ShiftMode::Fixed(b)
                    }
                },
            };
            let tag = tag.unwrap_or_else(|| format!("dose_{dose}"));
            let reports = ws.infer_split(dose, shift, &tag)?;
            let mean_lambda: f64 =
                reports.iter().map(|r| r.lambda_mean).sum::<f64>() / reports.len() as f64;
            println!(
                "inferred {} cases into {} (dose shift {:+.3}, mean lambda {:.3}, {} reverse steps)",
                reports.len(),
                ws.results_dir(&tag).display(),
                reports[0].dose_shift,
                mean_lambda,
                reports[0].reverse_steps
            );
        }
        Command::Evaluate {
            config,
            seed,
            pred_dir,
            ref_dir,
            window,
        } => {
            let ws = load_workspace(&config, seed)?;
            let window = match window {
                Some(w) => (w[0], w[1]),
                None => ws.cfg.metrics.window,
            };
            let pred_dir = pred_dir.unwrap_or_else(|| {
                ws.results_dir(&format!("dose_{}", ws.cfg.dose.train_fraction))
            });
            if let Some(rd) = ref_dir {
                if !rd.exists() {
                    return Err(LdctError::validation(format!(
                        "reference directory {} does not exist",
                        rd.display()
                    )));
                }
            }
            let report = ws.evaluate_dir(&pred_dir, window)?;
            println!(
                "evaluated {} cases: PSNR {:.3} +- {:.3} dB, SSIM {:.4}, RMSE {:.2} HU \
                 (reports under {})",
                report.per_case.len(),
                report.aggregate.psnr_db.0,
                report.aggregate.psnr_db.1,
                report.aggregate.ssim.0,
                report.aggregate.rmse_hu.0,
                ws.reports_dir().display()
            );
        }
        Command::SweepDose {
            config,
            seed,
            dose,
            shifts,
        } => {
            let ws = load_workspace(&config, seed)?;
            let parsed: Result<Vec<f64>> = shifts
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| LdctError::validation(format!("bad shift value {s}")))
                })
                .collect();
            let results = ws.sweep_dose(dose, &parsed?)?;
            for (b, report) in &results {
                println!(
                    "b = {b:+.3}: PSNR {:.3} dB, SSIM {:.4}",
                    report.aggregate.psnr_db.0, report.aggregate.ssim.0
                );
            }
            println!(
                "table written to {}",
                ws.reports_dir()
                    .join(format!("sweep_dose_{dose}.txt"))
                    .display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

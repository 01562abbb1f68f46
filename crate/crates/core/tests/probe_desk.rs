use ldct::config::ExperimentConfig;
use ldct::pipeline::{psnr_ssim_against_phantoms, ShiftMode, Workspace};

#[test]
#[ignore]
fn probe_desk_scale() {
    let t0 = std::time::Instant::now();
    let dir = std::path::PathBuf::from("/root/scratch/deskrun");
    let _ = std::fs::remove_dir_all(&dir);
    let mut cfg = ExperimentConfig::desk_scale(20250810);
    cfg.output_root = Some(dir.clone());
    let ws = Workspace::new(cfg).unwrap();
    ws.simulate(false).unwrap();
    println!("simulate done at {:?}", t0.elapsed());
    ws.train_proj().unwrap();
    println!("train-proj done at {:?}", t0.elapsed());
    ws.train_latent().unwrap();
    println!("train-latent done at {:?}", t0.elapsed());

    let w = ws.cfg.metrics.window;
    for (frac, label) in [(0.25, "dose_0.25")] {
        ws.infer_split(frac, ShiftMode::Policy, label).unwrap();
        let dir = ws.results_dir(label);
        let ldct = psnr_ssim_against_phantoms(&ws, &dir, "ldct", w).unwrap();
        let prior = psnr_ssim_against_phantoms(&ws, &dir, "prior", w).unwrap();
        let pred = psnr_ssim_against_phantoms(&ws, &dir, "pred", w).unwrap();
        let mean = |v: &Vec<(usize, f64, f64)>| {
            let n = v.len() as f64;
            (v.iter().map(|x| x.1).sum::<f64>() / n, v.iter().map(|x| x.2).sum::<f64>() / n)
        };
        let (lp, ls) = mean(&ldct);
        let (pp, ps) = mean(&prior);
        let (fp, fs) = mean(&pred);
        println!("{label}: ldct {lp:.2} dB/{ls:.4}  prior {pp:.2} dB/{ps:.4}  full {fp:.2} dB/{fs:.4}");
        let improved = pred.iter().zip(prior.iter()).filter(|(a, b)| a.2 > b.2).count();
        println!("  ssim strictly improved vs prior on {improved}/{} cases", pred.len());
    }
    println!("after 0.25 eval: {:?}", t0.elapsed());
    for frac in [0.10, 0.50] {
        for (mode, mlabel) in [(ShiftMode::Policy, "policy"), (ShiftMode::Fixed(0.0), "b0")] {
            let tag = format!("gen_{frac}_{mlabel}");
            ws.infer_split(frac, mode, &tag).unwrap();
            let pred = psnr_ssim_against_phantoms(&ws, &ws.results_dir(&tag), "pred", w).unwrap();
            let mp = pred.iter().map(|x| x.1).sum::<f64>() / pred.len() as f64;
            println!("dose {frac} {mlabel}: mean psnr {mp:.3} dB");
        }
    }
    println!("total {:?}", t0.elapsed());
}

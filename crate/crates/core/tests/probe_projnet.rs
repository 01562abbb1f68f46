use ldct::io;
use std::path::Path;

#[test]
#[ignore]
fn probe_proj_values() {
    let root = Path::new("/root/scratch/deskrun");
    let (proj, _) = io::load_proj_checkpoint(&root.join("checkpoints/proj")).unwrap();
    let i = 185;
    let y_ld = io::load_sinogram(&root.join(format!("sinograms/dose_0.25/ld_{i:04}.f32"))).unwrap();
    let y_clean = io::load_sinogram(&root.join(format!("sinograms/clean_{i:04}.f32"))).unwrap();
    let y_hat = ldct::projnet::denoise_projection(&y_ld, &proj).unwrap();

    let stats = |a: &ndarray::Array2<f64>, name: &str| {
        let n = a.len() as f64;
        let m = a.iter().sum::<f64>() / n;
        let s = (a.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
        println!("{name}: mean {m:.4} std {s:.4} min {:.4} max {:.4}",
            a.iter().cloned().fold(f64::INFINITY, f64::min),
            a.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    };
    stats(&y_ld.data, "y_ld   ");
    stats(&y_clean.data, "y_clean");
    stats(&y_hat.data, "f(y_ld)");

    // Row profile through the middle
    let r = 90;
    print!("clean row: ");
    for c in (0..64).step_by(8) { print!("{:.3} ", y_clean.data[[r, c]]); }
    println!();
    print!("f(y) row:  ");
    for c in (0..64).step_by(8) { print!("{:.3} ", y_hat.data[[r, c]]); }
    println!();
    print!("y_ld row:  ");
    for c in (0..64).step_by(8) { print!("{:.3} ", y_ld.data[[r, c]]); }
    println!();

    // And: what does the net do on a HALF-RES subsampled input (training-like)?
    let sds = ldct::sampler::sample_subdata(&y_ld, 1).unwrap();
    let s1 = &sds.slots[0];
    let clean_s1 = ldct::sampler::subsample_like(&y_clean.data, &sds, 1).unwrap();
    let norm = |a: &ndarray::Array2<f64>| a.mapv(|v| (v - proj.input_mean) / proj.input_std);
    let denorm = |a: &ndarray::Array2<f64>| a.mapv(|v| v * proj.input_std + proj.input_mean);
    let f_s1 = denorm(&proj.net.infer_array(&norm(s1)));
    let mse = |a: &ndarray::Array2<f64>, b: &ndarray::Array2<f64>| -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
    };
    println!("half-res: MSE s1 vs clean: {:.6} | MSE f(s1) vs clean: {:.6}", mse(s1, &clean_s1), mse(&f_s1, &clean_s1));
}

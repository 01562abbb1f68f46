use ldct::geometry::ScanGeometry;
use ldct::projector::project_array;
use ndarray::Array2;

#[test]
#[ignore]
fn probe() {
    let size = 256usize;
    let g = ScanGeometry::fitted(8, 129, size, 400.0 / size as f64);
    let mu = 0.02;
    let radius_mm = 60.0;
    let dp = g.pixel_spacing;
    let half = 0.5 * (size as f64 - 1.0);
    let img = Array2::from_shape_fn((size, size), |(r, c)| {
        let mut cover = 0.0;
        for sr in 0..8 {
            for sc in 0..8 {
                let y = (half - r as f64 - (sr as f64 + 0.5) / 8.0 + 0.5) * dp;
                let x = (c as f64 - half + (sc as f64 + 0.5) / 8.0 - 0.5) * dp;
                if (x * x + y * y).sqrt() <= radius_mm {
                    cover += 1.0;
                }
            }
        }
        mu * cover / 64.0
    });
    let sino = project_array(&img, &g);
    for v in 0..8 {
        println!("view {v}: {:.6} (err {:+.2e})", sino[[v, 64]], sino[[v, 64]] - 2.4);
    }
    // direct fine integration along lines through center
    let n = size as f64;
    let inv_dp = 1.0 / dp;
    let bil = |row: f64, col: f64| -> f64 {
        let r0 = row.floor(); let c0 = col.floor();
        let fr = row - r0; let fc = col - c0;
        let (r0, c0) = (r0 as isize, c0 as isize);
        let mut acc = 0.0;
        for (dr, wr) in [(0, 1.0 - fr), (1, fr)] {
            for (dc, wc) in [(0, 1.0 - fc), (1, fc)] {
                let rr = r0 + dr; let cc = c0 + dc;
                if rr >= 0 && (rr as usize) < size && cc >= 0 && (cc as usize) < size {
                    acc += wr * wc * img[[rr as usize, cc as usize]];
                }
            }
        }
        acc
    };
    for ang in [0.0f64, std::f64::consts::FRAC_PI_4] {
        let (dx, dy) = (ang.cos(), ang.sin());
        let h = dp / 64.0;
        let m = (200.0 / h) as usize * 2;
        let mut acc = 0.0;
        for i in 0..m {
            let t = -200.0 + (i as f64 + 0.5) * h;
            let x = t * dx; let y = t * dy;
            let col = x * inv_dp + 0.5 * (n - 1.0);
            let row = 0.5 * (n - 1.0) - y * inv_dp;
            acc += bil(row, col);
        }
        println!("fine integral at {:.2} rad: {:.6} (err {:+.2e})", ang, acc * h, acc * h - 2.4);
    }
}

#[test]
#[ignore]
fn probe_fbp_roundtrip() {
    use ldct::phantom::{generate, PhantomKind, PhantomSpec};
    use ldct::projector::{fbp_reconstruct, forward_project, reconstruction_circle_mask};
    use ldct::geometry::mu_to_hu;
    let t0 = std::time::Instant::now();
    for views in [90usize, 180, 360, 720] {
        let size = 256usize;
        let spec = PhantomSpec { kind: PhantomKind::SheppLogan, size, pixel_spacing: 400.0 / size as f64, seed: 0 };
        let img = generate(&spec).unwrap();
        let g = ScanGeometry::fitted(views, 720, size, spec.pixel_spacing);
        let sino = forward_project(&img, &g).unwrap();
        let rec = fbp_reconstruct(&sino).unwrap();
        let mask = reconstruction_circle_mask(size);
        let mut se = 0.0; let mut n = 0usize;
        for ((idx, &m), (&a, &b)) in mask.indexed_iter().zip(rec.data.iter().zip(img.data.iter())) {
            let _ = idx;
            if m { se += (mu_to_hu(a) - mu_to_hu(b)).powi(2); n += 1; }
        }
        let rmse = (se / n as f64).sqrt();
        let psnr = 20.0 * (4096.0 / rmse).log10();
        println!("views {views}: rmse {rmse:.2} HU, psnr(window span) {psnr:.2} dB, elapsed {:.1?}", t0.elapsed());
    }
}

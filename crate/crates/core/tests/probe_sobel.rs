use ndarray::Array2;
#[test]
#[ignore]
fn probe() {
    let img = Array2::from_elem((4, 4), 0.02);
    let m = ldct::fusion::sobel_magnitude_replicate(&img);
    println!("{m:?}");
    let gm = ldct::fusion::gradient_magnitude(&ldct::geometry::CtImage::new(img, 1.0, (-1024.0, 3072.0)).unwrap());
    println!("{gm:?}");
}

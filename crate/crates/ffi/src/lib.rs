//! C ABI for the toolkit.
//!
//! Conventions:
//! - Objects are opaque pointers created by `ldct_*_new`/loader functions
//!   and released with the matching `ldct_*_free`. Passing NULL to a free
//!   function is a no-op.
//! - Functions that can fail return an `LdctStatus` code (0 = ok; 2, 3, 4
//!   mirror the CLI's validation/dependency/fault classes) or a NULL
//!   pointer; the thread-local message behind [`ldct_last_error_message`]
//!   describes the most recent failure on the calling thread.
//! - Image and sinogram buffers are row-major f64, caller-allocated on
//!   copy-out.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use ldct::diffusion::DiffusionSchedule;
use ldct::error::LdctError;
use ldct::fusion::FusionConfig;
use ldct::geometry::{CtImage, ScanGeometry, Sinogram, DEFAULT_HU_WINDOW};
use ldct::projnet::ProjCheckpoint;
use ldct::refiner::RefinerCheckpoint;

/// Status codes mirroring the CLI exit codes.
pub const LDCT_OK: c_int = 0;
pub const LDCT_ERR_VALIDATION: c_int = 2;
pub const LDCT_ERR_DEPENDENCY: c_int = 3;
pub const LDCT_ERR_FAULT: c_int = 4;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(e: &LdctError) -> c_int {
    let code = e.exit_code();
    let msg = CString::new(format!("{e}")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(msg));
    code
}

fn clear_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
}

/// Message of the most recent error on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ldct_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow()
            .as_ref()
            .map(|s| s.as_ptr())
            .unwrap_or(ptr::null())
    })
}

/// Semantic version of the library.
#[no_mangle]
pub extern "C" fn ldct_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// Opaque fan-beam geometry.
pub struct LdctGeometry(ScanGeometry);
/// Opaque square attenuation image.
pub struct LdctImage(CtImage);
/// Opaque log-domain sinogram.
pub struct LdctSinogram(Sinogram);
/// Opaque projection-stage checkpoint.
pub struct LdctProjCheckpoint(ProjCheckpoint);
/// Opaque refiner checkpoint with its schedule.
pub struct LdctRefinerCheckpoint(RefinerCheckpoint, DiffusionSchedule);

unsafe fn path_from(ptr: *const c_char) -> Option<PathBuf> {
    if ptr.is_null() {
        return None;
    }
    Some(PathBuf::from(
        unsafe { CStr::from_ptr(ptr) }.to_string_lossy().into_owned(),
    ))
}

/// Geometry with the default scanner distances and a detector fitted to
/// the field of view.
#[no_mangle]
pub extern "C" fn ldct_geometry_new_fitted(
    num_views: usize,
    num_detector_bins: usize,
    image_size: usize,
    pixel_spacing: f64,
) -> *mut LdctGeometry {
    clear_error();
    let g = ScanGeometry::fitted(num_views, num_detector_bins, image_size, pixel_spacing);
    match g.validate() {
        Ok(()) => Box::into_raw(Box::new(LdctGeometry(g))),
        Err(e) => {
            set_error(&e);
            ptr::null_mut()
        }
    }
}

#[no_mangle]
pub extern "C" fn ldct_geometry_free(g: *mut LdctGeometry) {
    if !g.is_null() {
        drop(unsafe { Box::from_raw(g) });
    }
}

/// Phantom kinds accepted by [`ldct_phantom_generate`].
pub const LDCT_PHANTOM_SHEPP_LOGAN: c_int = 0;
pub const LDCT_PHANTOM_RANDOM_ELLIPSES: c_int = 1;

#[no_mangle]
pub extern "C" fn ldct_phantom_generate(
    kind: c_int,
    size: usize,
    pixel_spacing: f64,
    seed: u64,
) -> *mut LdctImage {
    clear_error();
    let kind = match kind {
        LDCT_PHANTOM_SHEPP_LOGAN => ldct::phantom::PhantomKind::SheppLogan,
        LDCT_PHANTOM_RANDOM_ELLIPSES => ldct::phantom::PhantomKind::RandomEllipses,
        _ => {
            set_error(&LdctError::validation("unknown phantom kind"));
            return ptr::null_mut();
        }
    };
    match ldct::phantom::generate(&ldct::phantom::PhantomSpec {
        kind,
        size,
        pixel_spacing,
        seed,
    }) {
        Ok(img) => Box::into_raw(Box::new(LdctImage(img))),
        Err(e) => {
            set_error(&e);
            ptr::null_mut()
        }
    }
}

/// Image from a row-major buffer of `size * size` attenuation values.
///
/// # Safety
/// `data` must point to at least `size * size` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn ldct_image_new(
    data: *const f64,
    size: usize,
    pixel_spacing: f64,
) -> *mut LdctImage {
    clear_error();
    if data.is_null() {
        set_error(&LdctError::validation("data pointer is NULL"));
        return ptr::null_mut();
    }
    let slice = unsafe { std::slice::from_raw_parts(data, size * size) };
    let arr = ndarray_from(slice, size, size);
    match CtImage::new(arr, pixel_spacing, DEFAULT_HU_WINDOW) {
        Ok(img) => Box::into_raw(Box::new(LdctImage(img))),
        Err(e) => {
            set_error(&e);
            ptr::null_mut()
        }
    }
}

fn ndarray_from(slice: &[f64], rows: usize, cols: usize) -> ndarray::Array2<f64> {
    ndarray::Array2::from_shape_vec((rows, cols), slice.to_vec()).expect("shape checked")
}

#[no_mangle]
pub extern "C" fn ldct_image_free(img: *mut LdctImage) {
    if !img.is_null() {
        drop(unsafe { Box::from_raw(img) });
    }
}

/// Side length in pixels, or 0 for NULL.
#[no_mangle]
pub extern "C" fn ldct_image_size(img: *const LdctImage) -> usize {
    if img.is_null() {
        return 0;
    }
    unsafe { &*img }.0.size()
}

/// Copy the image into `out` (row-major, `size * size` doubles).
///
/// # Safety
/// `out` must point to at least `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ldct_image_copy_data(
    img: *const LdctImage,
    out: *mut f64,
    len: usize,
) -> c_int {
    clear_error();
    if img.is_null() || out.is_null() {
        return set_error(&LdctError::validation("NULL argument"));
    }
    let data = &unsafe { &*img }.0.data;
    if len < data.len() {
        return set_error(&LdctError::validation("output buffer too small"));
    }
    let out = unsafe { std::slice::from_raw_parts_mut(out, data.len()) };
    for (o, &v) in out.iter_mut().zip(data.iter()) {
        *o = v;
    }
    LDCT_OK
}

#[no_mangle]
pub extern "C" fn ldct_sinogram_free(s: *mut LdctSinogram) {
    if !s.is_null() {
        drop(unsafe { Box::from_raw(s) });
    }
}

#[no_mangle]
pub extern "C" fn ldct_sinogram_num_views(s: *const LdctSinogram) -> usize {
    if s.is_null() {
        return 0;
    }
    unsafe { &*s }.0.num_views()
}

#[no_mangle]
pub extern "C" fn ldct_sinogram_num_bins(s: *const LdctSinogram) -> usize {
    if s.is_null() {
        return 0;
    }
    unsafe { &*s }.0.num_bins()
}

/// Copy the sinogram into `out` (row-major, `views * bins` doubles).
///
/// # Safety
/// `out` must point to at least `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ldct_sinogram_copy_data(
    s: *const LdctSinogram,
    out: *mut f64,
    len: usize,
) -> c_int {
    clear_error();
    if s.is_null() || out.is_null() {
        return set_error(&LdctError::validation("NULL argument"));
    }
    let data = &unsafe { &*s }.0.data;
    if len < data.len() {
        return set_error(&LdctError::validation("output buffer too small"));
    }
    let out = unsafe { std::slice::from_raw_parts_mut(out, data.len()) };
    for (o, &v) in out.iter_mut().zip(data.iter()) {
        *o = v;
    }
    LDCT_OK
}

/// Fan-beam forward projection.
#[no_mangle]
pub extern "C" fn ldct_forward_project(
    img: *const LdctImage,
    geom: *const LdctGeometry,
) -> *mut LdctSinogram {
    clear_error();
    if img.is_null() || geom.is_null() {
        set_error(&LdctError::validation("NULL argument"));
        return ptr::null_mut();
    }
    let (img, geom) = unsafe { (&*img, &*geom) };
    match ldct::projector::forward_project(&img.0, &geom.0) {
        Ok(s) => Box::into_raw(Box::new(LdctSinogram(s))),
        Err(e) => {
            set_error(&e);
            ptr::null_mut()
        }
    }
}

/// Filtered backprojection; `hann != 0` applies Hann apodization.
#[no_mangle]
pub extern "C" fn ldct_fbp_reconstruct(s: *const LdctSinogram, hann: c_int) -> *mut LdctImage {
    clear_error();
    if s.is_null() {
        set_error(&LdctError::validation("NULL argument"));
        return ptr::null_mut();
    }
    let filter = if hann != 0 {
        ldct::projector::FbpFilter::Hann
    } else {
        ldct::projector::FbpFilter::RamLak
    };
    match ldct::projector::fbp_reconstruct_with(&unsafe { &*s }.0, filter) {
        Ok(img) => Box::into_raw(Box::new(LdctImage(img))),
        Err(e) => {
            set_error(&e);
            ptr::null_mut()
        }
    }
}

/// Poisson + Gaussian low-dose simulation of a clean sinogram.
#[no_mangle]
pub extern "C" fn ldct_simulate_low_dose(
    clean: *const LdctSinogram,
    incident_photons: f64,
    electronic_noise_variance: f64,
    dose_fraction: f64,
    seed: u64,
) -> *mut LdctSinogram {
    clear_error();
    if clean.is_null() {
        set_error(&LdctError::validation("NULL argument"));
        return ptr::null_mut();
    }
    let cfg = ldct::dose::DoseConfig {
        incident_photons,
        electronic_noise_variance,
        dose_fraction,
        rng_seed: seed,
    };
    match ldct::dose::simulate_low_dose(&unsafe { &*clean }.0, &cfg) {
        Ok((s, _)) => Box::into_raw(Box::new(LdctSinogram(s))),
        Err(e) => {
            set_error(&e);
            ptr::null_mut()
        }
    }
}

/// Tunable dose shift for a train/test dose pair.
///
/// # Safety
/// `out` must be a valid pointer to one double.
#[no_mangle]
pub unsafe extern "C" fn ldct_dose_shift_policy(
    train_dose: f64,
    test_dose: f64,
    out: *mut f64,
) -> c_int {
    clear_error();
    if out.is_null() {
        return set_error(&LdctError::validation("NULL output pointer"));
    }
    match ldct::fusion::dose_shift_policy(train_dose, test_dose) {
        Ok(b) => {
            unsafe { *out = b };
            LDCT_OK
        }
        Err(e) => set_error(&e),
    }
}

/// Load a projection checkpoint from its path prefix (the file pair
/// `<prefix>.weights.bin` / `<prefix>.manifest.json`).
///
/// # Safety
/// `prefix` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ldct_proj_checkpoint_load(
    prefix: *const c_char,
) -> *mut LdctProjCheckpoint {
    clear_error();
    let Some(prefix) = (unsafe { path_from(prefix) }) else {
        set_error(&LdctError::validation("NULL path"));
        return ptr::null_mut();
    };
    match ldct::io::load_proj_checkpoint(Path::new(&prefix)) {
        Ok((ckpt, _)) => Box::into_raw(Box::new(LdctProjCheckpoint(ckpt))),
        Err(e) => {
            set_error(&e);
            ptr::null_mut()
        }
    }
}

#[no_mangle]
pub extern "C" fn ldct_proj_checkpoint_free(c: *mut LdctProjCheckpoint) {
    if !c.is_null() {
        drop(unsafe { Box::from_raw(c) });
    }
}

/// Apply the projection denoiser to a sinogram.
#[no_mangle]
pub extern "C" fn ldct_denoise_projection(
    sino: *const LdctSinogram,
    ckpt: *const LdctProjCheckpoint,
) -> *mut LdctSinogram {
    clear_error();
    if sino.is_null() || ckpt.is_null() {
        set_error(&LdctError::validation("NULL argument"));
        return ptr::null_mut();
    }
    match ldct::projnet::denoise_projection(&unsafe { &*sino }.0, &unsafe { &*ckpt }.0) {
        Ok(s) => Box::into_raw(Box::new(LdctSinogram(s))),
        Err(e) => {
            set_error(&e);
            ptr::null_mut()
        }
    }
}

/// Load a refiner checkpoint (and rebuild its diffusion schedule) from its
/// path prefix.
///
/// # Safety
/// `prefix` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ldct_refiner_checkpoint_load(
    prefix: *const c_char,
) -> *mut LdctRefinerCheckpoint {
    clear_error();
    let Some(prefix) = (unsafe { path_from(prefix) }) else {
        set_error(&LdctError::validation("NULL path"));
        return ptr::null_mut();
    };
    match ldct::io::load_refiner_checkpoint(Path::new(&prefix)) {
        Ok((ckpt, _)) => match ckpt.schedule() {
            Ok(sched) => Box::into_raw(Box::new(LdctRefinerCheckpoint(ckpt, sched))),
            Err(e) => {
                set_error(&e);
                ptr::null_mut()
            }
        },
        Err(e) => {
            set_error(&e);
            ptr::null_mut()
        }
    }
}

#[no_mangle]
pub extern "C" fn ldct_refiner_checkpoint_free(c: *mut LdctRefinerCheckpoint) {
    if !c.is_null() {
        drop(unsafe { Box::from_raw(c) });
    }
}

/// Full inference cascade on one low-dose sinogram: projection denoising,
/// FBP, pixel-level fusion with `dose_shift`, and the latent reverse chain.
#[no_mangle]
pub extern "C" fn ldct_infer(
    y_ld: *const LdctSinogram,
    proj: *const LdctProjCheckpoint,
    refiner: *const LdctRefinerCheckpoint,
    dose_shift: f64,
    seed: u64,
) -> *mut LdctImage {
    clear_error();
    if y_ld.is_null() || proj.is_null() || refiner.is_null() {
        set_error(&LdctError::validation("NULL argument"));
        return ptr::null_mut();
    }
    let refiner = unsafe { &*refiner };
    let fusion_cfg = FusionConfig {
        dose_shift,
        ..FusionConfig::default()
    };
    match ldct::pipeline::infer(
        &unsafe { &*y_ld }.0,
        &unsafe { &*proj }.0,
        &refiner.0,
        &refiner.1,
        &fusion_cfg,
        ldct::projector::FbpFilter::RamLak,
        seed,
    ) {
        Ok((img, _)) => Box::into_raw(Box::new(LdctImage(img))),
        Err(e) => {
            set_error(&e);
            ptr::null_mut()
        }
    }
}

/// Image-quality metrics of `pred` against `reference` under an HU window.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct LdctMetrics {
    pub psnr_db: f64,
    /// 1 when PSNR is finite (0 for identical images, where the cap applies).
    pub psnr_finite: c_int,
    pub ssim: f64,
    pub rmse_hu: f64,
    pub fsim: f64,
    pub vif: f64,
    pub nqm_db: f64,
    pub nqm_finite: c_int,
}

/// # Safety
/// `out` must be a valid pointer to an `LdctMetrics` struct.
#[no_mangle]
pub unsafe extern "C" fn ldct_evaluate(
    pred: *const LdctImage,
    reference: *const LdctImage,
    window_lo_hu: f64,
    window_hi_hu: f64,
    out: *mut LdctMetrics,
) -> c_int {
    clear_error();
    if pred.is_null() || reference.is_null() || out.is_null() {
        return set_error(&LdctError::validation("NULL argument"));
    }
    match ldct::metrics::evaluate(
        &unsafe { &*pred }.0,
        &unsafe { &*reference }.0,
        (window_lo_hu, window_hi_hu),
    ) {
        Ok(m) => {
            unsafe {
                *out = LdctMetrics {
                    psnr_db: m.psnr_db,
                    psnr_finite: m.psnr_finite as c_int,
                    ssim: m.ssim,
                    rmse_hu: m.rmse_hu,
                    fsim: m.fsim,
                    vif: m.vif,
                    nqm_db: m.nqm_db,
                    nqm_finite: m.nqm_finite as c_int,
                };
            }
            LDCT_OK
        }
        Err(e) => set_error(&e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantom_project_fbp_evaluate_roundtrip() {
        let geom = ldct_geometry_new_fitted(90, 128, 64, 6.4);
        assert!(!geom.is_null());
        let img = ldct_phantom_generate(LDCT_PHANTOM_SHEPP_LOGAN, 64, 6.4, 0);
        assert!(!img.is_null());
        assert_eq!(ldct_image_size(img), 64);
        let sino = ldct_forward_project(img, geom);
        assert!(!sino.is_null());
        assert_eq!(ldct_sinogram_num_views(sino), 90);
        let noisy = ldct_simulate_low_dose(sino, 1.5e5, 10.0, 0.25, 7);
        assert!(!noisy.is_null());
        let rec = ldct_fbp_reconstruct(noisy, 0);
        assert!(!rec.is_null());
        let mut m = LdctMetrics {
            psnr_db: 0.0,
            psnr_finite: 0,
            ssim: 0.0,
            rmse_hu: 0.0,
            fsim: 0.0,
            vif: 0.0,
            nqm_db: 0.0,
            nqm_finite: 0,
        };
        let rc = unsafe { ldct_evaluate(rec, img, -1024.0, 3072.0, &mut m) };
        assert_eq!(rc, LDCT_OK);
        assert!(m.psnr_db > 10.0 && m.psnr_finite == 1);
        assert!(m.ssim > 0.0 && m.ssim < 1.0);

        let mut buf = vec![0.0f64; 64 * 64];
        let rc = unsafe { ldct_image_copy_data(rec, buf.as_mut_ptr(), buf.len()) };
        assert_eq!(rc, LDCT_OK);
        assert!(buf.iter().any(|&v| v != 0.0));

        ldct_image_free(rec);
        ldct_sinogram_free(noisy);
        ldct_sinogram_free(sino);
        ldct_image_free(img);
        ldct_geometry_free(geom);
    }

    #[test]
    fn errors_set_message_and_codes() {
        let img = ldct_phantom_generate(99, 64, 1.0, 0);
        assert!(img.is_null());
        let msg = ldct_last_error_message();
        assert!(!msg.is_null());
        let text = unsafe { CStr::from_ptr(msg) }.to_string_lossy();
        assert!(text.contains("phantom"));

        let missing = unsafe {
            ldct_proj_checkpoint_load(c"/nonexistent/prefix".as_ptr())
        };
        assert!(missing.is_null());

        let mut b = 0.0;
        assert_eq!(unsafe { ldct_dose_shift_policy(0.25, 0.5, &mut b) }, LDCT_OK);
        assert!((b - 0.25).abs() < 1e-12);
        assert_eq!(
            unsafe { ldct_dose_shift_policy(0.0, 0.5, &mut b) },
            LDCT_ERR_VALIDATION
        );
    }

    #[test]
    fn version_is_exposed() {
        let v = ldct_version();
        assert!(!v.is_null());
        let text = unsafe { CStr::from_ptr(v) }.to_string_lossy();
        assert!(text.contains('.'));
    }
}

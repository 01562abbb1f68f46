//! Array, image, and checkpoint persistence.
//!
//! Arrays persist as row-major little-endian f32 binaries (`.f32`) with a
//! JSON sidecar (`.meta.json`) carrying shape, units, geometry, and dose
//! provenance. Checkpoints persist as a raw little-endian f64 weight blob
//! plus a JSON manifest holding the architecture, training summary, and the
//! blob's SHA-256.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::BetaSpec;
use crate::error::{LdctError, Result};
use crate::geometry::{CtImage, ScanGeometry, Sinogram};
use crate::projnet::{ProjCheckpoint, ProjNet, ProjNetConfig, ProjTrainConfig};
use crate::refiner::{RefinerCheckpoint, RefinerNet, RefinerNetConfig, RefinerTrainConfig};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| LdctError::io(path.display().to_string(), e))?;
    Ok(sha256_hex(&bytes))
}

/// Sidecar metadata for one persisted array.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArrayMeta {
    /// "sinogram", "image", "weight-map", or "index-map".
    pub kind: String,
    /// Row-major shape (rows, cols).
    pub shape: (usize, usize),
    /// Physical interpretation of the values.
    pub units: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<ScanGeometry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dose_tag: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_spacing: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hu_window: Option<(f64, f64)>,
    /// Detector model; always "equiangular" for this toolkit's sinograms.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detector_layout: Option<String>,
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Write `data` as `<path>.f32` (the path should already carry the `.f32`
/// extension) plus `<path>.meta.json`.
pub fn write_f32(path: &Path, data: &Array2<f64>, meta: &ArrayMeta) -> Result<()> {
    if meta.shape != data.dim() {
        return Err(LdctError::validation("metadata shape mismatch"));
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| LdctError::io(parent.display().to_string(), e))?;
    }
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for &v in data.iter() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, &bytes).map_err(|e| LdctError::io(path.display().to_string(), e))?;
    let mp = meta_path(path);
    let json = serde_json::to_string_pretty(meta)
        .map_err(|e| LdctError::validation(format!("serialize metadata: {e}")))?;
    fs::write(&mp, json).map_err(|e| LdctError::io(mp.display().to_string(), e))?;
    Ok(())
}

pub fn read_f32(path: &Path) -> Result<(Array2<f64>, ArrayMeta)> {
    let mp = meta_path(path);
    let meta: ArrayMeta = serde_json::from_str(
        &fs::read_to_string(&mp).map_err(|e| LdctError::io(mp.display().to_string(), e))?,
    )
    .map_err(|e| LdctError::validation(format!("bad metadata {}: {e}", mp.display())))?;
    let bytes = fs::read(path).map_err(|e| LdctError::io(path.display().to_string(), e))?;
    let (rows, cols) = meta.shape;
    if bytes.len() != rows * cols * 4 {
        return Err(LdctError::validation(format!(
            "{}: expected {} f32 values, file holds {} bytes",
            path.display(),
            rows * cols,
            bytes.len()
        )));
    }
    let mut data = Array2::zeros((rows, cols));
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        data[[i / cols, i % cols]] = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
    }
    Ok((data, meta))
}

pub fn save_sinogram(path: &Path, sino: &Sinogram) -> Result<()> {
    let meta = ArrayMeta {
        kind: "sinogram".into(),
        shape: sino.data.dim(),
        units: "log-attenuation line integral".into(),
        geometry: Some(sino.geometry.clone()),
        dose_tag: sino.dose_tag,
        pixel_spacing: None,
        hu_window: None,
        detector_layout: Some("equiangular".into()),
    };
    write_f32(path, &sino.data, &meta)
}

pub fn load_sinogram(path: &Path) -> Result<Sinogram> {
    let (data, meta) = read_f32(path)?;
    let geometry = meta.geometry.ok_or_else(|| {
        LdctError::validation(format!("{}: sinogram metadata lacks geometry", path.display()))
    })?;
    Sinogram::new(data, geometry, meta.dose_tag)
}

pub fn save_image(path: &Path, img: &CtImage) -> Result<()> {
    let meta = ArrayMeta {
        kind: "image".into(),
        shape: img.data.dim(),
        units: "attenuation mm^-1".into(),
        geometry: None,
        dose_tag: None,
        pixel_spacing: Some(img.pixel_spacing),
        hu_window: Some(img.hu_window),
        detector_layout: None,
    };
    write_f32(path, &img.data, &meta)
}

pub fn load_image(path: &Path) -> Result<CtImage> {
    let (data, meta) = read_f32(path)?;
    let spacing = meta.pixel_spacing.ok_or_else(|| {
        LdctError::validation(format!("{}: image metadata lacks pixel_spacing", path.display()))
    })?;
    CtImage::new(
        data,
        spacing,
        meta.hu_window.unwrap_or(crate::geometry::DEFAULT_HU_WINDOW),
    )
}

/// Windowed 8-bit grayscale PNG for visual inspection.
pub fn write_png_windowed(path: &Path, img: &CtImage, window: (f64, f64)) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| LdctError::io(parent.display().to_string(), e))?;
    }
    let x01 = crate::metrics::windowed01(img, window);
    let n = img.size() as u32;
    let mut buf = image::GrayImage::new(n, n);
    for ((r, c), &v) in x01.indexed_iter() {
        buf.put_pixel(c as u32, r as u32, image::Luma([(v * 255.0).round() as u8]));
    }
    buf.save(path)
        .map_err(|e| LdctError::validation(format!("write {}: {e}", path.display())))?;
    Ok(())
}

/// Manifest stored next to a projection checkpoint blob.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjCheckpointManifest {
    pub kind: String,
    pub net_cfg: ProjNetConfig,
    pub train_cfg: ProjTrainConfig,
    pub input_mean: f64,
    pub input_std: f64,
    pub epochs_run: usize,
    pub loss_curve: Vec<f64>,
    pub weights_file: String,
    pub weights_sha256: String,
    /// Hash of the experiment configuration that produced this checkpoint.
    pub config_hash: String,
    /// Hash of the upstream dataset manifest.
    pub parent_manifest_sha256: Option<String>,
    /// Held-out metric snapshot, when the trainer computed one.
    pub metric_note: Option<String>,
}

/// Save `<prefix>.weights.bin` and `<prefix>.manifest.json`.
pub fn save_proj_checkpoint(
    prefix: &Path,
    ckpt: &ProjCheckpoint,
    config_hash: &str,
    parent_manifest_sha256: Option<String>,
    metric_note: Option<String>,
) -> Result<PathBuf> {
    if let Some(parent) = prefix.parent() {
        fs::create_dir_all(parent).map_err(|e| LdctError::io(parent.display().to_string(), e))?;
    }
    let weights = prefix.with_extension("weights.bin");
    let blob = ckpt.net.params.to_blob();
    fs::write(&weights, &blob).map_err(|e| LdctError::io(weights.display().to_string(), e))?;
    let manifest = ProjCheckpointManifest {
        kind: "projection-checkpoint".into(),
        net_cfg: ckpt.net_cfg.clone(),
        train_cfg: ckpt.train_cfg.clone(),
        input_mean: ckpt.input_mean,
        input_std: ckpt.input_std,
        epochs_run: ckpt.epochs_run,
        loss_curve: ckpt.loss_curve.clone(),
        weights_file: weights
            .file_name()
            .unwrap()
            .to_string_lossy()
            .into_owned(),
        weights_sha256: sha256_hex(&blob),
        config_hash: config_hash.to_string(),
        parent_manifest_sha256,
        metric_note,
    };
    let mpath = prefix.with_extension("manifest.json");
    fs::write(
        &mpath,
        serde_json::to_string_pretty(&manifest)
            .map_err(|e| LdctError::validation(format!("serialize manifest: {e}")))?,
    )
    .map_err(|e| LdctError::io(mpath.display().to_string(), e))?;
    Ok(mpath)
}

pub fn load_proj_checkpoint(prefix: &Path) -> Result<(ProjCheckpoint, ProjCheckpointManifest)> {
    let mpath = prefix.with_extension("manifest.json");
    if !mpath.exists() {
        return Err(LdctError::dependency(format!(
            "projection checkpoint {} not found; run `train-proj` first",
            mpath.display()
        )));
    }
    let manifest: ProjCheckpointManifest = serde_json::from_str(
        &fs::read_to_string(&mpath).map_err(|e| LdctError::io(mpath.display().to_string(), e))?,
    )
    .map_err(|e| LdctError::validation(format!("bad manifest {}: {e}", mpath.display())))?;
    let wpath = prefix.with_extension("weights.bin");
    let blob = fs::read(&wpath).map_err(|e| LdctError::io(wpath.display().to_string(), e))?;
    if sha256_hex(&blob) != manifest.weights_sha256 {
        return Err(LdctError::validation(format!(
            "{}: weight blob does not match its manifest hash",
            wpath.display()
        )));
    }
    let mut net = ProjNet::new(&manifest.net_cfg, 0)?;
    net.params.load_blob(&blob)?;
    Ok((
        ProjCheckpoint {
            net_cfg: manifest.net_cfg.clone(),
            train_cfg: manifest.train_cfg.clone(),
            input_mean: manifest.input_mean,
            input_std: manifest.input_std,
            epochs_run: manifest.epochs_run,
            loss_curve: manifest.loss_curve.clone(),
            net,
        },
        manifest,
    ))
}

/// Manifest stored next to a refiner checkpoint blob.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefinerCheckpointManifest {
    pub kind: String,
    pub net_cfg: RefinerNetConfig,
    pub train_cfg: RefinerTrainConfig,
    pub t_total: usize,
    pub t_sample: usize,
    pub beta_spec: BetaSpec,
    pub hu_window: (f64, f64),
    pub pixel_spacing: f64,
    pub epochs_run: usize,
    pub loss_curve: Vec<f64>,
    pub weights_file: String,
    pub weights_sha256: String,
    pub config_hash: String,
    /// Hash of the projection checkpoint that produced the priors.
    pub parent_manifest_sha256: Option<String>,
}

pub fn save_refiner_checkpoint(
    prefix: &Path,
    ckpt: &RefinerCheckpoint,
    config_hash: &str,
    parent_manifest_sha256: Option<String>,
) -> Result<PathBuf> {
    if let Some(parent) = prefix.parent() {
        fs::create_dir_all(parent).map_err(|e| LdctError::io(parent.display().to_string(), e))?;
    }
    let weights = prefix.with_extension("weights.bin");
    let blob = ckpt.net.params.to_blob();
    fs::write(&weights, &blob).map_err(|e| LdctError::io(weights.display().to_string(), e))?;
    let manifest = RefinerCheckpointManifest {
        kind: "refiner-checkpoint".into(),
        net_cfg: ckpt.net_cfg.clone(),
        train_cfg: ckpt.train_cfg.clone(),
        t_total: ckpt.t_total,
        t_sample: ckpt.t_sample,
        beta_spec: ckpt.beta_spec,
        hu_window: ckpt.hu_window,
        pixel_spacing: ckpt.pixel_spacing,
        epochs_run: ckpt.epochs_run,
        loss_curve: ckpt.loss_curve.clone(),
        weights_file: weights
            .file_name()
            .unwrap()
            .to_string_lossy()
            .into_owned(),
        weights_sha256: sha256_hex(&blob),
        config_hash: config_hash.to_string(),
        parent_manifest_sha256,
    };
    let mpath = prefix.with_extension("manifest.json");
    fs::write(
        &mpath,
        serde_json::to_string_pretty(&manifest)
            .map_err(|e| LdctError::validation(format!("serialize manifest: {e}")))?,
    )
    .map_err(|e| LdctError::io(mpath.display().to_string(), e))?;
    Ok(mpath)
}

pub fn load_refiner_checkpoint(
    prefix: &Path,
) -> Result<(RefinerCheckpoint, RefinerCheckpointManifest)> {
    let mpath = prefix.with_extension("manifest.json");
    if !mpath.exists() {
        return Err(LdctError::dependency(format!(
            "refiner checkpoint {} not found; run `train-latent` first",
            mpath.display()
        )));
    }
    let manifest: RefinerCheckpointManifest = serde_json::from_str(
        &fs::read_to_string(&mpath).map_err(|e| LdctError::io(mpath.display().to_string(), e))?,
    )
    .map_err(|e| LdctError::validation(format!("bad manifest {}: {e}", mpath.display())))?;
    let wpath = prefix.with_extension("weights.bin");
    let blob = fs::read(&wpath).map_err(|e| LdctError::io(wpath.display().to_string(), e))?;
    if sha256_hex(&blob) != manifest.weights_sha256 {
        return Err(LdctError::validation(format!(
            "{}: weight blob does not match its manifest hash",
            wpath.display()
        )));
    }
    let mut net = RefinerNet::new(&manifest.net_cfg, 0)?;
    net.params.load_blob(&blob)?;
    Ok((
        RefinerCheckpoint {
            net_cfg: manifest.net_cfg.clone(),
            train_cfg: manifest.train_cfg.clone(),
            t_total: manifest.t_total,
            t_sample: manifest.t_sample,
            beta_spec: manifest.beta_spec,
            hu_window: manifest.hu_window,
            pixel_spacing: manifest.pixel_spacing,
            epochs_run: manifest.epochs_run,
            loss_curve: manifest.loss_curve.clone(),
            net,
        },
        manifest,
    ))
}

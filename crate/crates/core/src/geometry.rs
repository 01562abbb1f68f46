//! Scan geometry and the two in-memory array types that flow through the
//! pipeline: log-domain sinograms and attenuation images.
//!
//! The detector is modelled as an equiangular arc centred on the source
//! (recorded as `detector_layout = "equiangular"` in sidecar metadata);
//! `detector_bin_spacing` is the arc length of one bin at the detector
//! radius `source_to_center + detector_to_center`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{LdctError, Result};

/// Linear attenuation of water in mm^-1; anchors the HU mapping
/// `HU = 1000 * (mu - MU_WATER) / MU_WATER`.
pub const MU_WATER: f64 = 0.0192;

/// Attenuation (mm^-1) to Hounsfield units.
pub fn mu_to_hu(mu: f64) -> f64 {
    1000.0 * (mu - MU_WATER) / MU_WATER
}

/// Hounsfield units to attenuation (mm^-1). Exact inverse of [`mu_to_hu`].
pub fn hu_to_mu(hu: f64) -> f64 {
    MU_WATER * (1.0 + hu / 1000.0)
}

/// Fan-beam acquisition parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanGeometry {
    /// Source to rotation-centre distance (mm).
    pub source_to_center: f64,
    /// Detector arc to rotation-centre distance (mm), on the far side.
    pub detector_to_center: f64,
    /// Number of projection views over `angular_range`.
    pub num_views: usize,
    /// Total angular coverage in radians, in (0, 2*pi].
    pub angular_range: f64,
    /// Number of detector bins per view.
    pub num_detector_bins: usize,
    /// Arc length of one detector bin (mm) at the detector radius.
    pub detector_bin_spacing: f64,
    /// Reconstruction grid side length (pixels, square image).
    pub image_size: usize,
    /// Image pixel pitch (mm).
    pub pixel_spacing: f64,
}

impl Default for ScanGeometry {
    fn default() -> Self {
        ScanGeometry {
            source_to_center: 1361.2,
            detector_to_center: 615.18,
            num_views: 720,
            angular_range: std::f64::consts::TAU,
            num_detector_bins: 720,
            detector_bin_spacing: 1.0,
            image_size: 512,
            pixel_spacing: 0.8,
        }
    }
}

impl ScanGeometry {
    /// Geometry with the default distances and a detector bin spacing chosen
    /// so the fan covers the image inscribed circle with a 10% margin.
    pub fn fitted(
        num_views: usize,
        num_detector_bins: usize,
        image_size: usize,
        pixel_spacing: f64,
    ) -> Self {
        let mut g = ScanGeometry {
            num_views,
            num_detector_bins,
            image_size,
            pixel_spacing,
            ..ScanGeometry::default()
        };
        let fov = g.fov_radius();
        let half_angle = 1.1 * (fov / g.source_to_center).min(1.0).asin();
        g.detector_bin_spacing =
            2.0 * half_angle * g.source_to_detector() / num_detector_bins as f64;
        g
    }

    /// Source-to-detector distance (mm); the radius of the detector arc.
    pub fn source_to_detector(&self) -> f64 {
        self.source_to_center + self.detector_to_center
    }

    /// Angular pitch of one detector bin as seen from the source (radians).
    pub fn bin_angle(&self) -> f64 {
        self.detector_bin_spacing / self.source_to_detector()
    }

    /// Fan half-angle covered by the detector (radians).
    pub fn fan_half_angle(&self) -> f64 {
        0.5 * self.num_detector_bins as f64 * self.bin_angle()
    }

    /// Radius of the circle inscribed in the image square (mm).
    pub fn fov_radius(&self) -> f64 {
        0.5 * self.image_size as f64 * self.pixel_spacing
    }

    /// View angle of view `v` (radians).
    pub fn view_angle(&self, v: usize) -> f64 {
        self.angular_range * v as f64 / self.num_views as f64
    }

    /// Detector angle gamma of bin `k`, measured from the central ray.
    pub fn detector_angle(&self, k: usize) -> f64 {
        (k as f64 - 0.5 * (self.num_detector_bins as f64 - 1.0)) * self.bin_angle()
    }

    pub fn validate(&self) -> Result<()> {
        if self.source_to_center <= 0.0 || self.detector_to_center <= 0.0 {
            return Err(LdctError::configuration(
                "source_to_center and detector_to_center must be positive",
            ));
        }
        if self.num_views < 2 {
            return Err(LdctError::configuration("num_views must be at least 2"));
        }
        if !(self.angular_range > 0.0 && self.angular_range <= std::f64::consts::TAU + 1e-12) {
            return Err(LdctError::configuration(
                "angular_range must lie in (0, 2*pi]",
            ));
        }
        if self.num_detector_bins == 0 || self.detector_bin_spacing <= 0.0 {
            return Err(LdctError::configuration(
                "detector must have at least one bin of positive spacing",
            ));
        }
        if self.image_size == 0 || self.pixel_spacing <= 0.0 {
            return Err(LdctError::configuration(
                "image_size and pixel_spacing must be positive",
            ));
        }
        let fov = self.fov_radius();
        if fov >= self.source_to_center {
            return Err(LdctError::configuration(format!(
                "field of view radius {fov:.1} mm reaches the source orbit \
                 ({:.1} mm)",
                self.source_to_center
            )));
        }
        let needed = (fov / self.source_to_center).asin();
        if needed > self.fan_half_angle() + 1e-12 {
            return Err(LdctError::configuration(format!(
                "image inscribed circle needs a fan half-angle of {needed:.4} rad \
                 but the detector only covers {:.4} rad",
                self.fan_half_angle()
            )));
        }
        Ok(())
    }
}

/// Log-domain projection data (line integrals) on a [`ScanGeometry`].
#[derive(Debug, Clone)]
pub struct Sinogram {
    /// `num_views x num_detector_bins` array of line integrals.
    pub data: Array2<f64>,
    pub geometry: ScanGeometry,
    /// Dose fraction in (0, 1] when this sinogram came out of the dose
    /// simulator; `None` for clean (full-dose, noiseless) data.
    pub dose_tag: Option<f64>,
}

impl Sinogram {
    /// Build a sinogram, enforcing shape/finiteness/non-negativity.
    pub fn new(data: Array2<f64>, geometry: ScanGeometry, dose_tag: Option<f64>) -> Result<Self> {
        geometry.validate()?;
        if data.nrows() != geometry.num_views || data.ncols() != geometry.num_detector_bins {
            return Err(LdctError::validation(format!(
                "sinogram shape {}x{} does not match geometry {}x{}",
                data.nrows(),
                data.ncols(),
                geometry.num_views,
                geometry.num_detector_bins
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LdctError::validation("sinogram contains non-finite values"));
        }
        if data.iter().any(|&v| v < 0.0) {
            return Err(LdctError::validation(
                "sinogram contains negative line integrals",
            ));
        }
        if let Some(f) = dose_tag {
            if !(f > 0.0 && f <= 1.0) {
                return Err(LdctError::validation("dose_tag must lie in (0, 1]"));
            }
        }
        Ok(Sinogram {
            data,
            geometry,
            dose_tag,
        })
    }

    pub fn num_views(&self) -> usize {
        self.data.nrows()
    }

    pub fn num_bins(&self) -> usize {
        self.data.ncols()
    }
}

/// Reconstructed image in linear attenuation units (mm^-1) with the HU
/// display window used for metrics.
#[derive(Debug, Clone)]
pub struct CtImage {
    /// `size x size` attenuation values (mm^-1).
    pub data: Array2<f64>,
    /// Pixel pitch (mm).
    pub pixel_spacing: f64,
    /// (low, high) HU bounds used for display and metrics.
    pub hu_window: (f64, f64),
}

/// Default metrics/display window in HU.
pub const DEFAULT_HU_WINDOW: (f64, f64) = (-1024.0, 3072.0);

impl CtImage {
    pub fn new(data: Array2<f64>, pixel_spacing: f64, hu_window: (f64, f64)) -> Result<Self> {
        if data.nrows() != data.ncols() {
            return Err(LdctError::validation(format!(
                "CT image must be square, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LdctError::validation("CT image contains non-finite values"));
        }
        if pixel_spacing <= 0.0 {
            return Err(LdctError::validation("pixel_spacing must be positive"));
        }
        if hu_window.0 >= hu_window.1 {
            return Err(LdctError::validation("hu_window must satisfy lo < hi"));
        }
        Ok(CtImage {
            data,
            pixel_spacing,
            hu_window,
        })
    }

    pub fn size(&self) -> usize {
        self.data.nrows()
    }

    /// Image in Hounsfield units.
    pub fn to_hu(&self) -> Array2<f64> {
        self.data.mapv(mu_to_hu)
    }
}

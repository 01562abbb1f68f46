#ifndef LDCT_H
#define LDCT_H

/* Generated by cbindgen from ldct-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes mirroring the CLI exit codes.
#define LDCT_OK 0

#define LDCT_ERR_VALIDATION 2

#define LDCT_ERR_DEPENDENCY 3

#define LDCT_ERR_FAULT 4

// Phantom kinds accepted by [`ldct_phantom_generate`].
#define LDCT_PHANTOM_SHEPP_LOGAN 0

#define LDCT_PHANTOM_RANDOM_ELLIPSES 1

// Opaque fan-beam geometry.
typedef struct LdctGeometry LdctGeometry;

// Opaque square attenuation image.
typedef struct LdctImage LdctImage;

// Opaque projection-stage checkpoint.
typedef struct LdctProjCheckpoint LdctProjCheckpoint;

// Opaque refiner checkpoint with its schedule.
typedef struct LdctRefinerCheckpoint LdctRefinerCheckpoint;

// Opaque log-domain sinogram.
typedef struct LdctSinogram LdctSinogram;

// Image-quality metrics of `pred` against `reference` under an HU window.
typedef struct LdctMetrics {
  double psnr_db;
  // 1 when PSNR is finite (0 for identical images, where the cap applies).
  int psnr_finite;
  double ssim;
  double rmse_hu;
  double fsim;
  double vif;
  double nqm_db;
  int nqm_finite;
} LdctMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the most recent error on this thread, or NULL. The pointer
// stays valid until the next failing call on the same thread.
const char *ldct_last_error_message(void);

// Semantic version of the library.
const char *ldct_version(void);

// Geometry with the default scanner distances and a detector fitted to
// the field of view.
struct LdctGeometry *ldct_geometry_new_fitted(size_t num_views,
                                              size_t num_detector_bins,
                                              size_t image_size,
                                              double pixel_spacing);

void ldct_geometry_free(struct LdctGeometry *g);

struct LdctImage *ldct_phantom_generate(int kind, size_t size, double pixel_spacing, uint64_t seed);

// Image from a row-major buffer of `size * size` attenuation values.
//
// # Safety
// `data` must point to at least `size * size` readable doubles.
struct LdctImage *ldct_image_new(const double *data, size_t size, double pixel_spacing);

void ldct_image_free(struct LdctImage *img);

// Side length in pixels, or 0 for NULL.
size_t ldct_image_size(const struct LdctImage *img);

// Copy the image into `out` (row-major, `size * size` doubles).
//
// # Safety
// `out` must point to at least `len` writable doubles.
int ldct_image_copy_data(const struct LdctImage *img, double *out, size_t len);

void ldct_sinogram_free(struct LdctSinogram *s);

size_t ldct_sinogram_num_views(const struct LdctSinogram *s);

size_t ldct_sinogram_num_bins(const struct LdctSinogram *s);

// Copy the sinogram into `out` (row-major, `views * bins` doubles).
//
// # Safety
// `out` must point to at least `len` writable doubles.
int ldct_sinogram_copy_data(const struct LdctSinogram *s, double *out, size_t len);

// Fan-beam forward projection.
struct LdctSinogram *ldct_forward_project(const struct LdctImage *img,
                                          const struct LdctGeometry *geom);

// Filtered backprojection; `hann != 0` applies Hann apodization.
struct LdctImage *ldct_fbp_reconstruct(const struct LdctSinogram *s, int hann);

// Poisson + Gaussian low-dose simulation of a clean sinogram.
struct LdctSinogram *ldct_simulate_low_dose(const struct LdctSinogram *clean,
                                            double incident_photons,
                                            double electronic_noise_variance,
                                            double dose_fraction,
                                            uint64_t seed);

// Tunable dose shift for a train/test dose pair.
//
// # Safety
// `out` must be a valid pointer to one double.
int ldct_dose_shift_policy(double train_dose, double test_dose, double *out);

// Load a projection checkpoint from its path prefix (the file pair
// `<prefix>.weights.bin` / `<prefix>.manifest.json`).
//
// # Safety
// `prefix` must be a valid NUL-terminated string.
struct LdctProjCheckpoint *ldct_proj_checkpoint_load(const char *prefix);

void ldct_proj_checkpoint_free(struct LdctProjCheckpoint *c);

// Apply the projection denoiser to a sinogram.
struct LdctSinogram *ldct_denoise_projection(const struct LdctSinogram *sino,
                                             const struct LdctProjCheckpoint *ckpt);

// Load a refiner checkpoint (and rebuild its diffusion schedule) from its
// path prefix.
//
// # Safety
// `prefix` must be a valid NUL-terminated string.
struct LdctRefinerCheckpoint *ldct_refiner_checkpoint_load(const char *prefix);

void ldct_refiner_checkpoint_free(struct LdctRefinerCheckpoint *c);

// Full inference cascade on one low-dose sinogram: projection denoising,
// FBP, pixel-level fusion with `dose_shift`, and the latent reverse chain.
struct LdctImage *ldct_infer(const struct LdctSinogram *y_ld,
                             const struct LdctProjCheckpoint *proj,
                             const struct LdctRefinerCheckpoint *refiner,
                             double dose_shift,
                             uint64_t seed);

// # Safety
// `out` must be a valid pointer to an `LdctMetrics` struct.
int ldct_evaluate(const struct LdctImage *pred,
                  const struct LdctImage *reference,
                  double window_lo_hu,
                  double window_hi_hu,
                  struct LdctMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LDCT_H */

#ifndef HARMONY_H
#define HARMONY_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum HrStatus {
  HR_STATUS_OK = 0,
  HR_STATUS_NULL_POINTER = 1,
  HR_STATUS_INVALID_ARGUMENT = 2,
  HR_STATUS_IO = 3,
  HR_STATUS_FORMAT = 4,
  HR_STATUS_SHAPE_MISMATCH = 5,
  HR_STATUS_STAGE_MISMATCH = 6,
  HR_STATUS_NON_FINITE = 7,
  HR_STATUS_PANIC = 8,
} HrStatus;

// Opaque environment map.
typedef struct HrEnvMap HrEnvMap;

// Opaque harmonization model (a loaded checkpoint).
typedef struct HrModel HrModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the calling thread's last failure, or null. Valid until the
// next failing call on the same thread.
const char *hr_last_error(void);

// Reads an `ENVM` file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum HrStatus hr_envmap_load(const char *path, struct HrEnvMap **out);

// # Safety
// `env` must come from this library and not be used afterwards.
void hr_envmap_free(struct HrEnvMap *env);

// # Safety
// `env` must be a live handle; `height` and `width` writable.
enum HrStatus hr_envmap_size(const struct HrEnvMap *env, uint32_t *height, uint32_t *width);

// Diffuse irradiance for the unit normal `(nx, ny, nz)`; writes 3 floats.
//
// # Safety
// `env` must be a live handle; `rgb` must hold 3 floats.
enum HrStatus hr_envmap_irradiance(const struct HrEnvMap *env,
                                   double nx,
                                   double ny,
                                   double nz,
                                   float *rgb);

// Rotates about the vertical axis; returns a new handle.
//
// # Safety
// `env` must be a live handle; `out` writable.
enum HrStatus hr_envmap_rotate(const struct HrEnvMap *env, double yaw, struct HrEnvMap **out);

// Perspective background crop. Writes `width * height * 3` floats: linear
// radiance, or tonemapped LDR when `ldr` is non-zero.
//
// # Safety
// `env` must be a live handle; `rgb` must hold `width * height * 3` floats.
enum HrStatus hr_envmap_project(const struct HrEnvMap *env,
                                double fov_deg,
                                double yaw,
                                double pitch,
                                uint32_t width,
                                uint32_t height,
                                int32_t ldr,
                                float *rgb);

// Loads a checkpoint usable for harmonization.
//
// # Safety
// `path` must be a NUL-terminated string; `out` writable.
enum HrStatus hr_model_load(const char *path, struct HrModel **out);

// # Safety
// `model` must come from this library and not be used afterwards.
void hr_model_free(struct HrModel *model);

// Side length `S` the model was trained at.
//
// # Safety
// `model` must be a live handle; `size` writable.
enum HrStatus hr_model_image_size(const struct HrModel *model, uint32_t *size);

// Composites `fg` (RGB) with `mask` (one channel) over `bg` (RGB), all
// `width x height`, and harmonizes it with deterministic sampling. Writes
// `width * height * 3` floats to `out`.
//
// # Safety
// All buffers must hold the stated number of floats; `model` must be live.
enum HrStatus hr_harmonize(const struct HrModel *model,
                           const float *fg,
                           const float *mask,
                           const float *bg,
                           uint32_t width,
                           uint32_t height,
                           uint32_t steps,
                           uint64_t seed,
                           float *out);

// PSNR in dB of two equally sized images (peak 1, capped at 99).
//
// # Safety
// `a` and `b` must hold `width * height * channels` floats; `out` writable.
enum HrStatus hr_psnr(const float *a,
                      const float *b,
                      uint32_t width,
                      uint32_t height,
                      uint32_t channels,
                      double *out);

// Mean SSIM (11x11 Gaussian window) of two equally sized images.
//
// # Safety
// `a` and `b` must hold `width * height * channels` floats; `out` writable.
enum HrStatus hr_ssim(const float *a,
                      const float *b,
                      uint32_t width,
                      uint32_t height,
                      uint32_t channels,
                      double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HARMONY_H */

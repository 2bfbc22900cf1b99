#ifndef STITCH3D_H
#define STITCH3D_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum St3Status {
  ST3_STATUS_OK = 0,
  ST3_STATUS_INVALID_ARGUMENT = 1,
  ST3_STATUS_SHAPE = 2,
  ST3_STATUS_SINGULAR = 3,
  ST3_STATUS_NON_FINITE = 4,
  ST3_STATUS_IO = 5,
  ST3_STATUS_FORMAT = 6,
  ST3_STATUS_VERSION = 7,
  ST3_STATUS_CONFIG = 8,
  ST3_STATUS_MISSING_PREREQUISITE = 9,
  ST3_STATUS_TRAINING_FAILED = 10,
  ST3_STATUS_NULL_POINTER = 11,
  ST3_STATUS_PANIC = 12,
} St3Status;

// Opaque run configuration.
typedef struct St3Config St3Config;

// Opaque stitched 3D model loaded from a work directory.
typedef struct St3Stitched St3Stitched;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *st3_version(void);

// Length in bytes (without the terminator) of the calling thread's last
// error message, or 0 when the last call succeeded.
size_t st3_last_error_length(void);

// Copies the last error message into `buf` (NUL-terminated, truncated to
// `len − 1` bytes). Returns the full message length.
//
// # Safety
// `buf` must be writable for `len` bytes or be null with `len == 0`.
size_t st3_last_error_message(char *buf, size_t len);

// Releases a string returned by this library.
//
// # Safety
// `s` must come from this library and not be freed twice.
void st3_string_free(char *s);

// New configuration holding every default.
struct St3Config *st3_config_new(void);

// Parses a JSON configuration into `*out`.
//
// # Safety
// `json` must be NUL-terminated; `out` must be writable.
enum St3Status st3_config_from_json(const char *json, struct St3Config **out);

// Applies one `dotted.key=value` override.
//
// # Safety
// `cfg` must be a live handle; `assignment` NUL-terminated.
enum St3Status st3_config_set(struct St3Config *cfg, const char *assignment);

// Pretty JSON of the configuration; free with [`st3_string_free`].
// Returns null for a null handle.
//
// # Safety
// `cfg` must be a live handle or null.
char *st3_config_to_json(const struct St3Config *cfg);

// # Safety
// `cfg` must come from this library and not be freed twice.
void st3_config_free(struct St3Config *cfg);

// Runs one pipeline stage by its command-line name (`gen-data`,
// `train-vae`, ...). On success `*summary` (if not null) receives the
// stage's summary lines joined by newlines; free it with
// [`st3_string_free`].
//
// # Safety
// `cfg` must be a live handle, `stage` NUL-terminated, `summary` writable
// or null.
enum St3Status st3_run_stage(const struct St3Config *cfg,
                             const char *stage,
                             bool resume,
                             char **summary);

// Closed-form ridge fit of `A ≈ B·S` on row-major buffers
// `b: n×de`, `a: n×df`. Writes `S` (`de×df`) to `s_out` and the
// per-element mean squared residual to `mse_out`.
//
// # Safety
// Buffers must hold the stated number of values; `mse_out` writable.
enum St3Status st3_fit_stitch(const double *b,
                              size_t n,
                              size_t de,
                              const double *a,
                              size_t df,
                              double ridge,
                              double *s_out,
                              double *mse_out);

// Loads the fine-tuned stitched model from the configured work directory.
//
// # Safety
// `cfg` must be a live handle; `out` writable.
enum St3Status st3_stitched_load(const struct St3Config *cfg, struct St3Stitched **out);

// Latent channels and frame height and width the model expects.
//
// # Safety
// `model` must be a live handle; outputs writable.
enum St3Status st3_stitched_dims(const struct St3Stitched *model,
                                 size_t *channels,
                                 size_t *height,
                                 size_t *width);

// Pointmap of `views` frames from latents `z: [views, c, H/4, W/4]`
// (row-major). Writes `views·H·W·3` coordinates and `views·H·W`
// confidences; either output may be null to skip it.
//
// # Safety
// `z` must hold `z_len` values; non-null outputs must hold the stated
// number of values.
enum St3Status st3_stitched_predict_latent(const struct St3Stitched *model,
                                           const double *z,
                                           size_t z_len,
                                           size_t views,
                                           double *coords_out,
                                           double *confidence_out);

// # Safety
// `model` must come from this library and not be freed twice.
void st3_stitched_free(struct St3Stitched *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STITCH3D_H */

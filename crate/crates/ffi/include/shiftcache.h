#ifndef SHIFTCACHE_H
#define SHIFTCACHE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

/*
 Temporal attention mask variants.
 */
typedef enum ScMaskVariant {
  SC_MASK_VARIANT_FULL = 0,
  SC_MASK_VARIANT_HALF = 1,
  SC_MASK_VARIANT_QUARTER = 2,
  SC_MASK_VARIANT_CAUSAL = 3,
} ScMaskVariant;

/*
 Result codes.
 */
typedef enum ScStatus {
  SC_STATUS_OK = 0,
  SC_STATUS_NULL_POINTER = 1,
  SC_STATUS_INVALID_UTF8 = 2,
  SC_STATUS_INVALID_ARGUMENT = 3,
  SC_STATUS_CONFIG = 4,
  SC_STATUS_SHAPE = 5,
  SC_STATUS_FORMAT = 6,
  SC_STATUS_IO = 7,
  SC_STATUS_NUMERIC = 8,
  SC_STATUS_BUFFER_TOO_SMALL = 9,
  SC_STATUS_PANIC = 10,
} ScStatus;

/*
 A resolved configuration: denoiser, conditions and engine settings.
 */
typedef struct ScEngine ScEngine;

/*
 Final latents and counters of one sampling run.
 */
typedef struct ScRun ScRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or NULL. Valid until
 the next failing call on the same thread.
 */
const char *sc_last_error(void);

/*
 Releases a string returned by this library. NULL is ignored.

 # Safety
 `s` must come from this library and not have been freed.
 */
void sc_string_free(char *s);

/*
 Builds an engine from a JSON config (same keys as the CLI config file;
 `"{}"` gives all defaults).

 # Safety
 `json` must be a NUL-terminated string; `out` must be writable.
 */
enum ScStatus sc_engine_new(const char *json, struct ScEngine **out);

/*
 # Safety
 `engine` must come from [`sc_engine_new`] and not have been freed.
 */
void sc_engine_free(struct ScEngine *engine);

/*
 Fully resolved configuration as JSON.

 # Safety
 `engine` must be a live handle; `out` must be writable.
 */
enum ScStatus sc_engine_config_json(const struct ScEngine *engine, char **out);

/*
 Per-step chunk plans as a JSON array.

 # Safety
 `engine` must be a live handle; `out` must be writable.
 */
enum ScStatus sc_engine_plan_json(const struct ScEngine *engine, char **out);

/*
 Runs sampling to completion.

 # Safety
 `engine` must be a live handle; `out` must be writable.
 */
enum ScStatus sc_engine_run(const struct ScEngine *engine, struct ScRun **out);

/*
 # Safety
 `run` must come from [`sc_engine_run`] and not have been freed.
 */
void sc_run_free(struct ScRun *run);

/*
 Writes the latent dims `[N, C, H, W]` into `dims`.

 # Safety
 `run` must be a live handle; `dims` must point to 4 writable values.
 */
enum ScStatus sc_run_dims(const struct ScRun *run, size_t *dims);

/*
 Copies the final latents (row-major `[N, C, H, W]`) into `buf`.

 # Safety
 `run` must be a live handle; `buf` must hold `len` writable floats.
 */
enum ScStatus sc_run_copy_latents(const struct ScRun *run, float *buf, size_t len);

/*
 Run counters as JSON.

 # Safety
 `run` must be a live handle; `out` must be writable.
 */
enum ScStatus sc_run_stats_json(const struct ScRun *run, char **out);

/*
 Writes the final latents as an LVT1 file.

 # Safety
 `run` must be a live handle; `path` must be a NUL-terminated string.
 */
enum ScStatus sc_run_save_latents(const struct ScRun *run, const char *path);

/*
 Builds an `len × len` temporal mask. `good[i] != 0` marks frame `i` as
 fresh; `allowed` receives 1 where query row `q` may attend key `k`
 (index `q * len + k`), 0 elsewhere.

 # Safety
 `good` must hold `len` bytes; `allowed` must hold `len * len` bytes.
 */
enum ScStatus sc_mask_build(enum ScMaskVariant variant,
                            const uint8_t *good,
                            size_t len,
                            uint8_t *allowed);

/*
 Picks the reference frame from keypoint JSON and writes its
 `frame_index` to `out`.

 # Safety
 `json` must be a NUL-terminated string; `out` must be writable.
 */
enum ScStatus sc_select_frame(const char *json, double conf_threshold, size_t *out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* SHIFTCACHE_H */

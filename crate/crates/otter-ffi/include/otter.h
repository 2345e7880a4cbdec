#ifndef OTTER_FFI_H
#define OTTER_FFI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes mirroring the CLI exit codes.
 */
typedef enum OtterStatus {
  OtterStatus_Ok = 0,
  /**
   * Bad arguments or configuration.
   */
  OtterStatus_Usage = 1,
  /**
   * Dataset, checkpoint, or filesystem problem.
   */
  OtterStatus_Data = 2,
  /**
   * Non-finite numbers or a diverged computation.
   */
  OtterStatus_Numeric = 3,
  /**
   * A NULL pointer where one is not allowed.
   */
  OtterStatus_NullArg = 4,
  /**
   * An internal panic was caught at the boundary.
   */
  OtterStatus_Panic = 5,
} OtterStatus;

/**
 * Opaque trained-model handle.
 */
typedef struct OtterModel OtterModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. Never NULL; empty
 * when no error has occurred. Valid until the next FFI call on the thread.
 */
const char *otter_last_error(void);

/**
 * Library version string (static storage, do not free).
 */
const char *otter_version(void);

/**
 * Release a string returned by this library.
 *
 * # Safety
 * `s` must have been returned by an `otter_*` function and not yet freed.
 */
void otter_string_free(char *s);

/**
 * Generate a synthetic moving-blob dataset under `out_dir`.
 * `config_path` may be NULL for defaults; see the CLI `synth` command for
 * the accepted keys.
 *
 * # Safety
 * Pointer arguments must be NULL or valid NUL-terminated strings.
 */
enum OtterStatus otter_synth(const char *config_path, const char *out_dir, uint64_t seed);

/**
 * Train a detector; equivalent to the CLI `train` command. Optional
 * arguments may be NULL.
 *
 * # Safety
 * Pointer arguments must be NULL or valid NUL-terminated strings.
 */
enum OtterStatus otter_train(const char *data_dir,
                             const char *out_dir,
                             const char *variant,
                             const char *model_config,
                             const char *train_config,
                             const char *init_checkpoint,
                             uint64_t seed);

/**
 * Load a checkpoint into an opaque model handle.
 *
 * # Safety
 * `checkpoint_path` must be a valid string; `out` must point to writable
 * storage for one pointer.
 */
enum OtterStatus otter_model_load(const char *checkpoint_path, struct OtterModel **out);

/**
 * Destroy a model handle (NULL is a no-op).
 *
 * # Safety
 * `model` must be NULL or a handle from [`otter_model_load`], freed once.
 */
void otter_model_free(struct OtterModel *model);

/**
 * Variant name of a loaded model ("baseline", "temporal", "temporal_cbam").
 *
 * # Safety
 * `model` must be a live handle; `out` receives an owned string.
 */
enum OtterStatus otter_model_variant(const struct OtterModel *model, char **out);

/**
 * Evaluate a loaded model on a dataset split and return the metric table
 * as CSV (columns: Class, Instances, P, R, mAP50, mAP50-95).
 * `split` is "val" or "test"; `split_seed` must match the training run
 * when no explicit split file was used.
 *
 * # Safety
 * Pointer arguments must be valid; `csv_out` receives an owned string.
 */
enum OtterStatus otter_eval_csv(const struct OtterModel *model,
                                const char *data_dir,
                                const char *split,
                                uint64_t split_seed,
                                char **csv_out);

/**
 * Frame-by-frame analysis over an inclusive frame range of one video.
 * Returns the records as pretty-printed JSON; `csv_out`, when non-NULL,
 * receives the confidence-per-frame series.
 *
 * # Safety
 * Pointer arguments must be valid; out-strings are owned by the caller.
 */
enum OtterStatus otter_analyze_json(const struct OtterModel *model,
                                    const char *data_dir,
                                    const char *video_id,
                                    uint32_t frame_lo,
                                    uint32_t frame_hi,
                                    char **json_out,
                                    char **csv_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OTTER_FFI_H */

/* C interface for the stochastic filter grouping library. */

#ifndef SFG_FFI_H
#define SFG_FFI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible function.
 */
typedef enum SfgStatus {
  /**
   * The call succeeded.
   */
  SfgStatus_Ok = 0,
  /**
   * A pointer, size or enum argument was invalid.
   */
  SfgStatus_InvalidArgument = 1,
  /**
   * The operation itself failed (I/O, parse, numerical error, ...).
   */
  SfgStatus_RuntimeError = 2,
} SfgStatus;

/**
 * Opaque experiment configuration handle.
 */
typedef struct SfgConfig SfgConfig;

/**
 * Opaque synthetic dataset handle.
 */
typedef struct SfgDataset SfgDataset;

/**
 * Opaque handle for a completed training run (model + metrics).
 */
typedef struct SfgRun SfgRun;

/**
 * Held-out evaluation metrics. Optional fields are only meaningful when
 * the matching `has_*` flag is nonzero.
 */
typedef struct SfgEvalReport {
  double reg_mae;
  double reg_psnr;
  double cls_accuracy;
  uint8_t has_cls_accuracy;
  double seg_dice;
  uint8_t has_seg_dice;
  double reg2_mae;
  uint8_t has_reg2_mae;
} SfgEvalReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error message of the current thread; empty string if none.
 * The pointer stays valid until the next failing call on this thread.
 */
const char *sfg_last_error(void);

/**
 * Generate a synthetic dataset. `kind`: 0 = faces-like, 1 = scans-like.
 *
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum SfgStatus sfg_dataset_generate(uint32_t kind,
                                    uintptr_t n,
                                    uintptr_t image_size,
                                    uint64_t seed,
                                    struct SfgDataset **out);

/**
 * Load a dataset file written by `sfg_dataset_save` (or the CLI).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` a valid handle slot.
 */
enum SfgStatus sfg_dataset_load(const char *path, struct SfgDataset **out);

/**
 * Save a dataset to `path`.
 *
 * # Safety
 * `ds` must be a live dataset handle; `path` a NUL-terminated string.
 */
enum SfgStatus sfg_dataset_save(const struct SfgDataset *ds, const char *path);

/**
 * Number of items in the dataset; 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live dataset handle.
 */
uintptr_t sfg_dataset_len(const struct SfgDataset *ds);

/**
 * Release a dataset handle (null is ignored).
 *
 * # Safety
 * `ds` must be null or an owned handle not freed before.
 */
void sfg_dataset_free(struct SfgDataset *ds);

/**
 * Parse a TOML configuration from a string.
 *
 * # Safety
 * `toml` must be a NUL-terminated string; `out` a valid handle slot.
 */
enum SfgStatus sfg_config_parse(const char *toml, struct SfgConfig **out);

/**
 * Load a TOML configuration file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` a valid handle slot.
 */
enum SfgStatus sfg_config_load(const char *path, struct SfgConfig **out);

/**
 * Override the training seed of a parsed configuration.
 *
 * # Safety
 * `cfg` must be a live configuration handle.
 */
enum SfgStatus sfg_config_set_seed(struct SfgConfig *cfg, uint64_t seed);

/**
 * Release a configuration handle (null is ignored).
 *
 * # Safety
 * `cfg` must be null or an owned handle not freed before.
 */
void sfg_config_free(struct SfgConfig *cfg);

/**
 * Train a model as described by the configuration and return the run.
 *
 * # Safety
 * `cfg` must be a live configuration handle; `out` a valid handle slot.
 */
enum SfgStatus sfg_train(const struct SfgConfig *cfg, struct SfgRun **out);

/**
 * Copy the run's held-out evaluation metrics into `report`.
 *
 * # Safety
 * `run` must be a live run handle; `report` a valid report slot.
 */
enum SfgStatus sfg_run_eval(const struct SfgRun *run, struct SfgEvalReport *report);

/**
 * Final sampling temperature reached by the run; NaN for a null handle.
 *
 * # Safety
 * `run` must be null or a live run handle.
 */
double sfg_run_final_tau(const struct SfgRun *run);

/**
 * Number of grouped convolution layers in the trained model.
 *
 * # Safety
 * `run` must be null or a live run handle.
 */
uintptr_t sfg_run_num_layers(const struct SfgRun *run);

/**
 * Number of kernels in the given layer (0 if out of range).
 *
 * # Safety
 * `run` must be null or a live run handle.
 */
uintptr_t sfg_run_layer_kernels(const struct SfgRun *run, uintptr_t layer);

/**
 * Copy the layer's grouping probabilities into `out` (row-major [K, 3]:
 * task-1, shared, task-2 per kernel). `len` must be exactly 3*K.
 *
 * # Safety
 * `run` must be a live run handle; `out` must point to `len` doubles.
 */
enum SfgStatus sfg_run_grouping_probs(const struct SfgRun *run,
                                      uintptr_t layer,
                                      double *out,
                                      uintptr_t len);

/**
 * Save the trained model's parameters as a checkpoint file.
 *
 * # Safety
 * `run` must be a live run handle; `path` a NUL-terminated string.
 */
enum SfgStatus sfg_run_save_checkpoint(const struct SfgRun *run, const char *path);

/**
 * Restore model parameters from a checkpoint file written for the same
 * architecture and baseline.
 *
 * # Safety
 * `run` must be a live run handle; `path` a NUL-terminated string.
 */
enum SfgStatus sfg_run_restore_checkpoint(struct SfgRun *run, const char *path);

/**
 * Monte-Carlo prediction on a batch of images.
 *
 * `images` is row-major [batch, 1, size, size]. `out_reg` receives the
 * task-1 regression output (`reg_len` = batch for the faces architecture,
 * batch*size*size for the scans architecture). `out_cls` (optional: may
 * be null with `cls_len` 0) receives task-2 class indices of the same
 * per-item layout. The batch must have at least 2 items.
 *
 * # Safety
 * `run` must be a live run handle; buffers must match the stated lengths.
 */
enum SfgStatus sfg_run_predict(const struct SfgRun *run,
                               const double *images,
                               uintptr_t batch,
                               uintptr_t image_size,
                               uintptr_t passes,
                               uint64_t seed,
                               double *out_reg,
                               uintptr_t reg_len,
                               int32_t *out_cls,
                               uintptr_t cls_len);

/**
 * Release a run handle (null is ignored).
 *
 * # Safety
 * `run` must be null or an owned handle not freed before.
 */
void sfg_run_free(struct SfgRun *run);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* SFG_FFI_H */

#ifndef FMITAL_H
#define FMITAL_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum {
  FMITAL_STATUS_OK = 0,
  /**
   * A required pointer was null or an index was out of range.
   */
  FMITAL_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Array extents disagree with the configuration.
   */
  FMITAL_STATUS_SHAPE = 2,
  /**
   * File missing, unreadable or malformed.
   */
  FMITAL_STATUS_DATA = 3,
  /**
   * Configuration rejected.
   */
  FMITAL_STATUS_CONFIG = 4,
  /**
   * Non-finite values or diverged training.
   */
  FMITAL_STATUS_NUMERICAL = 5,
  /**
   * Internal panic caught at the boundary.
   */
  FMITAL_STATUS_PANIC = 6,
} FmitalStatus;

/**
 * Opaque dataset handle.
 */
typedef struct FmitalDataset FmitalDataset;

/**
 * Opaque pipeline handle.
 */
typedef struct FmitalPipeline FmitalPipeline;

/**
 * Opaque list of segments.
 */
typedef struct FmitalSegments FmitalSegments;

/**
 * One decoded segment, in timesteps.
 */
typedef struct {
  double start;
  double end;
  double score;
  uint32_t class_id;
} FmitalSegment;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into the library from the same thread.
 */
const char *fmital_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fmital_version(void);

/**
 * Creates a pipeline from a TOML document; null selects the defaults.
 *
 * # Safety
 * `config_toml` is null or a NUL-terminated string; `out` is writable.
 */
FmitalStatus fmital_pipeline_new(const char *config_toml, FmitalPipeline **out);

/**
 * # Safety
 * `pipeline` is null or a handle from this library not yet freed.
 */
void fmital_pipeline_free(FmitalPipeline *pipeline);

/**
 * Replaces the pipeline's parameters with those in a checkpoint file.
 *
 * # Safety
 * Valid handle and NUL-terminated path.
 */
FmitalStatus fmital_pipeline_load_checkpoint(FmitalPipeline *pipeline, const char *path);

/**
 * # Safety
 * Valid handle and NUL-terminated path.
 */
FmitalStatus fmital_pipeline_save_checkpoint(const FmitalPipeline *pipeline, const char *path);

/**
 * Synthesizes the dataset described by the pipeline's configuration.
 *
 * # Safety
 * Valid handle; `out` is writable.
 */
FmitalStatus fmital_dataset_generate(const FmitalPipeline *pipeline, FmitalDataset **out);

/**
 * # Safety
 * NUL-terminated directory path; `out` is writable.
 */
FmitalStatus fmital_dataset_load(const char *dir, FmitalDataset **out);

/**
 * # Safety
 * Valid handle and NUL-terminated directory path.
 */
FmitalStatus fmital_dataset_save(const FmitalDataset *dataset, const char *dir);

/**
 * Number of episodes in the manifest; 0 for a null handle.
 *
 * # Safety
 * `dataset` is null or a live handle.
 */
size_t fmital_dataset_episode_count(const FmitalDataset *dataset);

/**
 * # Safety
 * `dataset` is null or a handle from this library not yet freed.
 */
void fmital_dataset_free(FmitalDataset *dataset);

/**
 * Trains the boundary heads on manifest episodes `first..first+count`.
 * `final_loss` may be null.
 *
 * # Safety
 * Valid handles; `final_loss` is null or writable.
 */
FmitalStatus fmital_pipeline_train(FmitalPipeline *pipeline,
                                   const FmitalDataset *dataset,
                                   size_t first,
                                   size_t count,
                                   double *final_loss);

/**
 * mAP at the primary threshold and averaged over all thresholds, on
 * manifest episodes `first..first+count`. Either output may be null.
 *
 * # Safety
 * Valid handles; outputs null or writable.
 */
FmitalStatus fmital_pipeline_evaluate(const FmitalPipeline *pipeline,
                                      const FmitalDataset *dataset,
                                      size_t first,
                                      size_t count,
                                      double *map_primary,
                                      double *map_mean);

/**
 * Localizes segments in one manifest episode.
 *
 * # Safety
 * Valid handles; `out` is writable.
 */
FmitalStatus fmital_pipeline_predict_episode(const FmitalPipeline *pipeline,
                                             const FmitalDataset *dataset,
                                             size_t episode,
                                             FmitalSegments **out);

/**
 * Localizes segments in raw features. `query` holds `[t_query, n, d]` and
 * `support` holds `[t_support, n, d]` row-major floats, with `n` and `d`
 * taken from the pipeline configuration. `class_id` labels the output.
 *
 * # Safety
 * The arrays hold at least the stated number of floats; `out` is writable.
 */
FmitalStatus fmital_pipeline_predict_features(const FmitalPipeline *pipeline,
                                              const float *query,
                                              size_t t_query,
                                              const float *support,
                                              size_t t_support,
                                              uint32_t class_id,
                                              FmitalSegments **out);

/**
 * Number of segments; 0 for a null handle.
 *
 * # Safety
 * `segments` is null or a live handle.
 */
size_t fmital_segments_len(const FmitalSegments *segments);

/**
 * Copies segment `index` (rank order, best first) into `out`.
 *
 * # Safety
 * Valid handle; `out` is writable.
 */
FmitalStatus fmital_segments_get(const FmitalSegments *segments, size_t index, FmitalSegment *out);

/**
 * # Safety
 * `segments` is null or a handle from this library not yet freed.
 */
void fmital_segments_free(FmitalSegments *segments);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FMITAL_H */

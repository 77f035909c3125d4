#ifndef SAS_FFI_H
#define SAS_FFI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes. Values 1 to 4 match the exit codes of the `sas` CLI.
 */
typedef enum SasStatus {
  SAS_STATUS_OK = 0,
  /**
   * I/O or results-format failure.
   */
  SAS_STATUS_OTHER = 1,
  SAS_STATUS_CONFIG = 2,
  /**
   * Bad input data or an unreadable checkpoint.
   */
  SAS_STATUS_DATA = 3,
  /**
   * Shape mismatch, contract violation or non-finite values.
   */
  SAS_STATUS_NUMERIC = 4,
  /**
   * Null pointer or invalid UTF-8 argument.
   */
  SAS_STATUS_INVALID_ARGUMENT = 5,
  /**
   * A Rust panic was caught at the boundary.
   */
  SAS_STATUS_PANIC = 6,
} SasStatus;

/**
 * A frozen backbone.
 */
typedef struct SasBackbone SasBackbone;

/**
 * A frozen backbone together with a fine-tuned variant.
 */
typedef struct SasModel SasModel;

typedef struct SasModelInfo {
  size_t channels;
  size_t image_side;
  size_t num_classes;
  /**
   * Trainable adapter scalars, excluding the classification head.
   */
  uint64_t adapter_params;
  uint64_t head_params;
} SasModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (truncated and
 * NUL-terminated) and returns the full message length in bytes, excluding
 * the terminator. Returns 0 when the last call succeeded.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t sas_last_error_message(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sas_version(void);

/**
 * Adapter parameter count `2(d'd + Mrd + Lr'r)` for the given shape.
 *
 * # Safety
 * `out` must point to a writable `uint64_t`.
 */
enum SasStatus sas_param_count(size_t d,
                               size_t layers,
                               size_t d_prime,
                               size_t r,
                               size_t r_prime,
                               size_t m,
                               uint64_t *out);

/**
 * Trade-off score of a top-1 accuracy (percent) and a parameter count.
 */
double sas_ppt_score(double top1, uint64_t params);

/**
 * Loads a backbone checkpoint written by `sas pretrain`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer slot.
 */
enum SasStatus sas_backbone_load(const char *path, struct SasBackbone **out);

/**
 * Releases a backbone. Null is ignored.
 *
 * # Safety
 * `backbone` must come from [`sas_backbone_load`] and not be freed twice.
 */
void sas_backbone_free(struct SasBackbone *backbone);

/**
 * Writes the backbone's hex SHA-256 checksum (64 characters plus NUL)
 * into `buf`, which must hold at least 65 bytes.
 *
 * # Safety
 * `backbone` must be a live handle and `buf` point to `len` writable bytes.
 */
enum SasStatus sas_backbone_checksum(const struct SasBackbone *backbone, char *buf, size_t len);

/**
 * Loads a fine-tuned model checkpoint written by `sas finetune --model-out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer slot.
 */
enum SasStatus sas_model_load(const char *path, struct SasModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`sas_model_load`] and not be freed twice.
 */
void sas_model_free(struct SasModel *model);

/**
 * Input geometry and parameter counts of a model.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum SasStatus sas_model_info(const struct SasModel *model, struct SasModelInfo *out);

/**
 * Predicted class for each of `count` images; ties go to the lowest class.
 *
 * # Safety
 * `images` must hold `count × channels × side × side` floats and
 * `out_labels` room for `count` values.
 */
enum SasStatus sas_model_predict(const struct SasModel *model,
                                 const float *images,
                                 size_t count,
                                 size_t *out_labels);

/**
 * Top-1 accuracy in percent of the model on `count` labelled images.
 *
 * # Safety
 * `images` must hold `count` images, `labels` `count` values, and
 * `out_top1` be writable.
 */
enum SasStatus sas_model_evaluate(const struct SasModel *model,
                                  const float *images,
                                  const size_t *labels,
                                  size_t count,
                                  double *out_top1);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SAS_FFI_H */

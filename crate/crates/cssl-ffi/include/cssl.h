#ifndef CSSL_H
#define CSSL_H

/* Generated by cbindgen from cssl-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible function.
typedef enum CsslStatus {
  CSSL_STATUS_OK = 0,
  CSSL_STATUS_NULL_POINTER = 1,
  CSSL_STATUS_INVALID_ARGUMENT = 2,
  CSSL_STATUS_IO = 3,
  CSSL_STATUS_MISSING_ARTIFACT = 4,
  CSSL_STATUS_PARSE_ERROR = 5,
  CSSL_STATUS_CHECKPOINT_MISMATCH = 6,
  CSSL_STATUS_DIVERGED = 7,
  CSSL_STATUS_INVALID_UTF8 = 8,
  CSSL_STATUS_PANIC = 9,
} CsslStatus;

// Opaque run configuration handle.
typedef struct CsslConfig CsslConfig;

// Opaque trained-model handle.
typedef struct CsslModel CsslModel;

// Evaluation metrics. `has_auc` is 0 when the test set had one class.
typedef struct CsslMetrics {
  double acc;
  double auc;
  int32_t has_auc;
  double f1;
} CsslMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *cssl_version(void);

// Copy the last error message on this thread into `buffer`. Returns the
// full message length in bytes (excluding the NUL), regardless of how much
// was copied. Passing a null or zero-length buffer just queries the length.
//
// # Safety
// `buffer` must point to at least `buffer_len` writable bytes when
// non-null.
size_t cssl_last_error_message(char *buffer, size_t buffer_len);

// Create a configuration from a preset name (`tiny` or `paper`).
//
// # Safety
// `name` must be a valid NUL-terminated string; `out` must be a valid
// pointer to receive the handle.
enum CsslStatus cssl_config_preset(const char *name, struct CsslConfig **out);

// Load a configuration from a key-value file.
//
// # Safety
// `path` must be a valid NUL-terminated string; `out` must be valid.
enum CsslStatus cssl_config_load(const char *path, struct CsslConfig **out);

// Apply one `key = value` override to a configuration.
//
// # Safety
// All pointers must be valid; strings NUL-terminated.
enum CsslStatus cssl_config_set(struct CsslConfig *config, const char *key, const char *value);

// Write a configuration to a key-value file.
//
// # Safety
// Pointers must be valid; `path` NUL-terminated.
enum CsslStatus cssl_config_save(const struct CsslConfig *config, const char *path);

// Release a configuration handle. Passing null is a no-op.
//
// # Safety
// `config` must have come from this library and not been freed before.
void cssl_config_free(struct CsslConfig *config);

// Generate the synthetic datasets under `out_dir`.
//
// # Safety
// Pointers must be valid; `out_dir` NUL-terminated.
enum CsslStatus cssl_generate_data(const struct CsslConfig *config,
                                   const char *out_dir,
                                   int32_t force);

// Stage-1 pretraining; writes `m1.ckpt` and the loss curve into `run_dir`.
//
// # Safety
// Pointers must be valid; strings NUL-terminated.
enum CsslStatus cssl_pretrain(const struct CsslConfig *config,
                              const char *data_dir,
                              const char *run_dir);

// Buffer construction; writes `buffer.jsonl`. `out_k` / `out_t` receive the
// derived cluster count and buffer size when non-null.
//
// # Safety
// Pointers must be valid; strings NUL-terminated.
enum CsslStatus cssl_build_buffer(const struct CsslConfig *config,
                                  const char *data_dir,
                                  const char *run_dir,
                                  size_t *out_k,
                                  size_t *out_t);

// Derived buffer parameters without running anything:
// `K = floor(n1 * alpha)`, `T = floor(n1 * beta)`.
//
// # Safety
// `out_k` and `out_t` must be valid pointers.
enum CsslStatus cssl_derive_buffer_params(size_t n1,
                                          double alpha,
                                          double beta,
                                          size_t *out_k,
                                          size_t *out_t);

// Stage-3 continual pretraining; writes `m2.ckpt`.
//
// # Safety
// Pointers must be valid; strings NUL-terminated.
enum CsslStatus cssl_continual(const struct CsslConfig *config,
                               const char *data_dir,
                               const char *run_dir);

// Fine-tune from `source` ("m2", "m1", or "none"); writes
// `classifier.ckpt`.
//
// # Safety
// Pointers must be valid; strings NUL-terminated.
enum CsslStatus cssl_finetune(const struct CsslConfig *config,
                              const char *data_dir,
                              const char *run_dir,
                              const char *source);

// Evaluate the fine-tuned classifier; fills `out_metrics` and writes
// `metrics.json`.
//
// # Safety
// Pointers must be valid; strings NUL-terminated.
enum CsslStatus cssl_evaluate(const struct CsslConfig *config,
                              const char *data_dir,
                              const char *run_dir,
                              struct CsslMetrics *out_metrics);

// Load a checkpoint into an opaque model handle.
//
// # Safety
// Pointers must be valid; `path` NUL-terminated.
enum CsslStatus cssl_model_load(const char *path, struct CsslModel **out);

// Embedding width of a loaded model.
//
// # Safety
// Pointers must be valid.
enum CsslStatus cssl_model_embed_dim(const struct CsslModel *model, size_t *out);

// Mean-pooled embeddings for `count` images of shape
// `channels x height x width` (values in [0, 1], row-major). `out` must
// hold `count * embed_dim` doubles.
//
// # Safety
// `pixels` must hold `count * channels * height * width` doubles; `out`
// must hold `count * embed_dim` doubles.
enum CsslStatus cssl_model_embed(const struct CsslModel *model,
                                 const double *pixels,
                                 size_t count,
                                 size_t channels,
                                 size_t height,
                                 size_t width,
                                 double *out);

// Release a model handle. Passing null is a no-op.
//
// # Safety
// `model` must have come from this library and not been freed before.
void cssl_model_free(struct CsslModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CSSL_H */

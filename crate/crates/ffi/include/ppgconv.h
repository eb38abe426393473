#ifndef PPGCONV_H
#define PPGCONV_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Status code returned by every fallible function.
 */
typedef enum PpgStatus {
  PPG_STATUS_OK = 0,
  /*
   A required pointer argument was null.
   */
  PPG_STATUS_NULL_ARGUMENT = 1,
  /*
   A string argument was not valid UTF-8.
   */
  PPG_STATUS_INVALID_UTF8 = 2,
  /*
   Inputs inconsistent with the model configuration, such as a missing
   reference.
   */
  PPG_STATUS_USAGE = 3,
  PPG_STATUS_DIMENSION = 4,
  PPG_STATUS_CONTRACT = 5,
  /*
   Non-finite values during evaluation.
   */
  PPG_STATUS_NUMERIC = 6,
  /*
   Malformed file contents.
   */
  PPG_STATUS_FORMAT = 7,
  PPG_STATUS_SCHEMA = 8,
  /*
   Checkpoint does not match its configuration.
   */
  PPG_STATUS_LOAD = 9,
  PPG_STATUS_IO = 10,
  /*
   A caller-provided buffer is too small.
   */
  PPG_STATUS_BUFFER_TOO_SMALL = 11,
  /*
   An internal panic was caught at the boundary.
   */
  PPG_STATUS_INTERNAL = 12,
} PpgStatus;

/*
 A loaded conversion model.
 */
typedef struct PpgModel PpgModel;

/*
 Dense tensor of 64-bit reals.
 */
typedef struct PpgTensor PpgTensor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *ppg_version(void);

/*
 Message of the last failed call on this thread, or null if the last call
 succeeded. Valid until the next call into the library on this thread.
 */
const char *ppg_last_error_message(void);

/*
 Creates a tensor by copying `len` values from `data` with the given
 `rank`-dimensional `shape`.

 # Safety
 `shape` must point to `rank` values and `data` to `len` values.
 */
enum PpgStatus ppg_tensor_new(const size_t *shape,
                              size_t rank,
                              const double *data,
                              size_t len,
                              struct PpgTensor **out);

/*
 Reads a tensor from a TNSR file.

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum PpgStatus ppg_tensor_load(const char *path, struct PpgTensor **out);

/*
 Writes a tensor to a TNSR file.

 # Safety
 `tensor` must be a live handle and `path` a NUL-terminated string.
 */
enum PpgStatus ppg_tensor_save(const struct PpgTensor *tensor, const char *path);

/*
 Number of dimensions, or 0 for a null handle.

 # Safety
 `tensor` must be null or a live handle.
 */
size_t ppg_tensor_rank(const struct PpgTensor *tensor);

/*
 Number of elements, or 0 for a null handle.

 # Safety
 `tensor` must be null or a live handle.
 */
size_t ppg_tensor_len(const struct PpgTensor *tensor);

/*
 Copies the shape into `shape` (capacity `cap`).

 # Safety
 `tensor` must be a live handle and `shape` writable for `cap` values.
 */
enum PpgStatus ppg_tensor_shape(const struct PpgTensor *tensor, size_t *shape, size_t cap);

/*
 Row-major element data, valid while the handle lives; null for a null
 handle.

 # Safety
 `tensor` must be null or a live handle.
 */
const double *ppg_tensor_data(const struct PpgTensor *tensor);

/*
 Releases a tensor. Null is ignored.

 # Safety
 `tensor` must be null or a handle not yet freed.
 */
void ppg_tensor_free(struct PpgTensor *tensor);

/*
 Loads a checkpoint directory, verifying weights against its stored
 configuration.

 # Safety
 `dir` must be a NUL-terminated string; `out` must be writable.
 */
enum PpgStatus ppg_model_load(const char *dir, struct PpgModel **out);

/*
 Trainable scalar count, or 0 for a null handle.

 # Safety
 `model` must be null or a live handle.
 */
size_t ppg_model_param_count(const struct PpgModel *model);

/*
 Whether the model needs a reference mel (`ref_mel`) and a phoneme
 sequence (`phonemes`) in `ppg_model_convert`.

 # Safety
 `model` must be a live handle; the out pointers may be null.
 */
enum PpgStatus ppg_model_requirements(const struct PpgModel *model,
                                      bool *needs_ref_mel,
                                      bool *needs_phonemes);

/*
 Free-running conversion of a `[T × ppg_dim]` posteriorgram.

 `ref_mel` and `phonemes` are required exactly when the model enables the
 matching reference encoder; pass null otherwise. `max_steps == 0` picks
 twice the expected decoder length. `mel_out` receives the
 `[frames × mel_dim]` output; `alignment_out`, if not null, the
 `[steps × T]` attention weights.

 # Safety
 Handles must be live; `phonemes` must point to `n_phonemes` values when
 not null; `mel_out` must be writable.
 */
enum PpgStatus ppg_model_convert(const struct PpgModel *model,
                                 const struct PpgTensor *ppg,
                                 const struct PpgTensor *ref_mel,
                                 const size_t *phonemes,
                                 size_t n_phonemes,
                                 size_t max_steps,
                                 struct PpgTensor **mel_out,
                                 struct PpgTensor **alignment_out);

/*
 Releases a model. Null is ignored.

 # Safety
 `model` must be null or a handle not yet freed.
 */
void ppg_model_free(struct PpgModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PPGCONV_H */

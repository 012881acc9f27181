#ifndef SPECFM_H
#define SPECFM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

/*
 Result code of every fallible call.
 */
typedef enum SpecfmStatus {
  SPECFM_STATUS_OK = 0,
  SPECFM_STATUS_NULL_POINTER = 1,
  SPECFM_STATUS_INVALID_ARGUMENT = 2,
  SPECFM_STATUS_IO = 3,
  SPECFM_STATUS_FORMAT = 4,
  SPECFM_STATUS_SHAPE = 5,
  SPECFM_STATUS_CONFIG = 6,
  SPECFM_STATUS_COMPUTE = 7,
  SPECFM_STATUS_BUFFER_TOO_SMALL = 8,
  SPECFM_STATUS_PANIC = 9,
} SpecfmStatus;

/*
 Routing choice for [`specfm_moe_infer`].
 */
typedef enum SpecfmRouteMode {
  /*
   Use the mode stored in the bundle.
   */
  SPECFM_ROUTE_MODE_BUNDLE_DEFAULT = 0,
  SPECFM_ROUTE_MODE_TOP1 = 1,
  SPECFM_ROUTE_MODE_DENSE = 2,
} SpecfmRouteMode;

/*
 Normalized spectrograms held in memory.
 */
typedef struct SpecfmDataset SpecfmDataset;

/*
 A single encoder producing pooled embeddings.
 */
typedef struct SpecfmEncoder SpecfmEncoder;

/*
 Router plus three protocol experts.
 */
typedef struct SpecfmMoe SpecfmMoe;

/*
 Generation metadata of one dataset record. Enumerations are indices in
 the library's canonical order (protocol: WIFI, LTE, NR; modulation: BPSK,
 QPSK, 16QAM, 64QAM, 256QAM; mobility: static, pedestrian, vehicular).
 */
typedef struct SpecfmLabel {
  uint32_t protocol;
  uint32_t modulation;
  uint32_t mobility;
  double snr_db;
  double doppler_hz;
  uint64_t seed;
} SpecfmLabel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *specfm_version(void);

/*
 Copy the calling thread's last error message into `buf` (truncated and
 always NUL-terminated when `len > 0`). Returns the message length in
 bytes, excluding the terminator, so a caller can size the buffer.

 # Safety
 `buf` must be null or valid for `len` writable bytes.
 */
uintptr_t specfm_last_error(char *buf, uintptr_t len);

/*
 Load a dataset directory written by `specfm generate` and normalize it
 with its own statistics.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SpecfmStatus specfm_dataset_load(const char *path, struct SpecfmDataset **out);

/*
 Synthesize the default sweep in memory with `n_realizations` per grid
 cell and normalize it with its own statistics.

 # Safety
 `out` must be a valid pointer.
 */
enum SpecfmStatus specfm_dataset_synthesize(uint64_t master_seed,
                                            uint32_t n_realizations,
                                            struct SpecfmDataset **out);

/*
 # Safety
 `ds` must be a live dataset handle and `len` a valid pointer.
 */
enum SpecfmStatus specfm_dataset_len(const struct SpecfmDataset *ds, uintptr_t *len);

/*
 Grid size of record `index`.

 # Safety
 `ds` must be a live dataset handle; `frames` and `bins` valid pointers.
 */
enum SpecfmStatus specfm_dataset_shape(const struct SpecfmDataset *ds,
                                       uintptr_t index,
                                       uintptr_t *frames,
                                       uintptr_t *bins);

/*
 # Safety
 `ds` must be a live dataset handle and `label` a valid pointer.
 */
enum SpecfmStatus specfm_dataset_label(const struct SpecfmDataset *ds,
                                       uintptr_t index,
                                       struct SpecfmLabel *label);

/*
 Copy the normalized values of record `index` (row-major, frames x bins)
 into `out`, which must hold at least `frames * bins` floats.

 # Safety
 `ds` must be a live dataset handle; `out` valid for `len` floats.
 */
enum SpecfmStatus specfm_dataset_copy(const struct SpecfmDataset *ds,
                                      uintptr_t index,
                                      float *out,
                                      uintptr_t len);

/*
 # Safety
 `ds` must be null or a handle not yet freed.
 */
void specfm_dataset_free(struct SpecfmDataset *ds);

/*
 Load an encoder checkpoint (pretrained or fine-tuned).

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SpecfmStatus specfm_encoder_load(const char *path, struct SpecfmEncoder **out);

/*
 Embedding width of the encoder.

 # Safety
 `enc` must be a live encoder handle and `dim` a valid pointer.
 */
enum SpecfmStatus specfm_encoder_dim(const struct SpecfmEncoder *enc, uintptr_t *dim);

/*
 Mean-pooled embedding of one normalized `frames x bins` grid.

 # Safety
 `enc` must be a live encoder handle, `data` valid for `frames * bins`
 floats and `out` valid for `out_len` floats.
 */
enum SpecfmStatus specfm_encoder_embed(const struct SpecfmEncoder *enc,
                                       const float *data,
                                       uintptr_t frames,
                                       uintptr_t bins,
                                       float *out,
                                       uintptr_t out_len);

/*
 # Safety
 `enc` must be null or a handle not yet freed.
 */
void specfm_encoder_free(struct SpecfmEncoder *enc);

/*
 Load a bundle directory written by `specfm train-router`.

 # Safety
 `dir` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SpecfmStatus specfm_moe_load(const char *dir, struct SpecfmMoe **out);

/*
 Route one normalized grid and aggregate the expert embeddings.
 `mode` is a `SpecfmRouteMode` value.

 `weights` (may be null) receives the three gate weights, `chosen` (may
 be null) the selected expert index, `evals` (may be null) the number of
 expert forward passes spent. `out` receives the embedding.

 # Safety
 `moe` must be a live bundle handle, `data` valid for `frames * bins`
 floats, `weights` null or valid for 3 doubles, `out` valid for `out_len`
 floats.
 */
enum SpecfmStatus specfm_moe_infer(const struct SpecfmMoe *moe,
                                   const float *data,
                                   uintptr_t frames,
                                   uintptr_t bins,
                                   uint32_t mode,
                                   double *weights,
                                   uint32_t *chosen,
                                   uintptr_t *evals,
                                   float *out,
                                   uintptr_t out_len);

/*
 # Safety
 `moe` must be null or a handle not yet freed.
 */
void specfm_moe_free(struct SpecfmMoe *moe);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPECFM_H */

#ifndef NEXTSHOT_H
#define NEXTSHOT_H

#pragma once

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Per-segment timestep plan used while sampling.
typedef enum NsConditioning {
  NS_CONDITIONING_CACI = 0,
  NS_CONDITIONING_SYNC_COND = 1,
  NS_CONDITIONING_CACI_REL_DIFFUSION = 2,
} NsConditioning;

// Model size preset.
typedef enum NsPreset {
  NS_PRESET_TINY = 0,
  NS_PRESET_DESK = 1,
} NsPreset;

// Which image of a shot pair to read.
typedef enum NsShot {
  NS_SHOT_COND = 0,
  NS_SHOT_TGT = 1,
} NsShot;

// Result code of every call.
typedef enum NsStatus {
  NS_STATUS_OK = 0,
  NS_STATUS_NULL_POINTER = 1,
  NS_STATUS_INVALID_ARGUMENT = 2,
  NS_STATUS_SHAPE = 3,
  NS_STATUS_IO = 4,
  NS_STATUS_FORMAT = 5,
  NS_STATUS_NUMERIC = 6,
  NS_STATUS_BUFFER_TOO_SMALL = 7,
  NS_STATUS_PANIC = 8,
} NsStatus;

// Opaque model weights.
typedef struct NsModel NsModel;

// Opaque procedural shot pair.
typedef struct NsPair NsPair;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *ns_version(void);

// Copies the calling thread's last error message into `buf` (truncated,
// always NUL-terminated when `len > 0`). Returns the full message length
// plus one, or 0 when the last call succeeded.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t ns_last_error_message(char *buf, size_t len);

// Freshly initialized model (frozen random backbone, zero LoRA and
// modulation weights).
//
// # Safety
// `out` must be a valid pointer to writable storage for one handle.
enum NsStatus ns_model_new(enum NsPreset preset, uint64_t seed, struct NsModel **out);

// Loads a checkpoint written by `ns_model_save` or the command-line tool.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum NsStatus ns_model_load(const char *path, struct NsModel **out);

// # Safety
// `model` must be a live handle and `path` a NUL-terminated string.
enum NsStatus ns_model_save(const struct NsModel *model, const char *path);

// Side length in pixels of the images the model works on.
//
// # Safety
// `model` must be a live handle; `out` must be writable.
enum NsStatus ns_model_image_size(const struct NsModel *model, size_t *out);

// # Safety
// `model` must be null or a handle not yet freed.
void ns_model_free(struct NsModel *model);

// Renders one procedural pair. `pattern` indexes shot-reverse-shot, cut-in,
// cut-out, cutaway, multi-angle in that order.
//
// # Safety
// `out` must be writable.
enum NsStatus ns_pair_new(uint64_t seed,
                          uint32_t pattern_code,
                          size_t image_size,
                          struct NsPair **out);

// Copies an `h × w × 3` image of the pair, row-major, into `buf`.
//
// # Safety
// `pair` must be a live handle; `buf` must hold `len` floats.
enum NsStatus ns_pair_image(const struct NsPair *pair, enum NsShot shot, float *buf, size_t len);

// # Safety
// `pair` must be null or a handle not yet freed.
void ns_pair_free(struct NsPair *pair);

// Generates the next shot for the pair's condition image and prompt with
// `steps` Euler steps, writing `h × w × 3` floats into `buf`.
//
// # Safety
// Handles must be live; `buf` must hold `len` floats.
enum NsStatus ns_sample_next_shot(const struct NsModel *model,
                                  const struct NsPair *pair,
                                  size_t steps,
                                  enum NsConditioning conditioning,
                                  uint64_t seed,
                                  float *buf,
                                  size_t len);

// Writes the 5×5 segment reachability matrix (row = query segment, in the
// order rel, ind_cond, ind_tgt, vis_cond, vis_tgt) as 0/1 bytes.
//
// # Safety
// `out` must hold 25 bytes.
enum NsStatus ns_ham_block_matrix(uint8_t *out);

// Token-level attention mask for the given segment lengths
// (`rel, ind_cond, ind_tgt, vis_cond, vis_tgt`; `rel` ignored when
// `with_rel` is false). Stores the token count in `out_total` and, when
// `buf` is non-null, writes `total²` row-major 0/1 bytes.
//
// # Safety
// `lengths` must point to 5 values; `buf` must be null or hold `len` bytes.
enum NsStatus ns_ham_mask(const size_t *lengths,
                          bool with_rel,
                          uint8_t *buf,
                          size_t len,
                          size_t *out_total);

// Fréchet distance between two embedding sets given as row-major
// `n × dim` arrays.
//
// # Safety
// `a` and `b` must hold `na·dim` and `nb·dim` doubles; `out` must be writable.
enum NsStatus ns_fid(const double *a,
                     size_t na,
                     const double *b,
                     size_t nb,
                     size_t dim,
                     double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NEXTSHOT_H */

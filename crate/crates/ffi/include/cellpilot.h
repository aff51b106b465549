#ifndef CELLPILOT_H
#define CELLPILOT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum CpStatus {
  CP_STATUS_OK = 0,
  CP_STATUS_NULL_POINTER = 1,
  CP_STATUS_INVALID_ARGUMENT = 2,
  CP_STATUS_NOT_FOUND = 3,
  CP_STATUS_OUT_OF_RANGE = 4,
  CP_STATUS_FORMAT = 5,
  CP_STATUS_CONFIG_MISMATCH = 6,
  CP_STATUS_IO = 7,
  CP_STATUS_MODEL = 8,
  CP_STATUS_BUFFER_TOO_SMALL = 9,
  CP_STATUS_PANIC = 10,
} CpStatus;

/**
 * Opaque model handle.
 */
typedef struct CpModel CpModel;

/**
 * Opaque annotation session handle; keeps its model alive.
 */
typedef struct CpSession CpSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Creates a toy backbone with the default configuration.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum CpStatus cp_model_new_toy(uint64_t seed, bool with_lora, struct CpModel **out);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CpStatus cp_model_load(const char *path, struct CpModel **out);

/**
 * Releases a model. Sessions created from it stay valid.
 *
 * # Safety
 * `model` must come from `cp_model_new_toy`/`cp_model_load` or be NULL, and
 * must not be used afterwards.
 */
void cp_model_free(struct CpModel *model);

/**
 * Side length of the square model input.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum CpStatus cp_model_input_size(const struct CpModel *model, size_t *out);

/**
 * Starts a session on an interleaved 8-bit RGB image and computes its
 * embedding.
 *
 * # Safety
 * `rgb` must point to `height * width * 3` readable bytes; `model` must be a
 * live handle and `out` a valid pointer.
 */
enum CpStatus cp_session_new(const struct CpModel *model,
                             const uint8_t *rgb,
                             size_t height,
                             size_t width,
                             struct CpSession **out);

/**
 * Starts a session on an image file (PNG, TIFF or JPEG).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `model` a live handle; `out` valid.
 */
enum CpStatus cp_session_open(const struct CpModel *model,
                              const char *path,
                              struct CpSession **out);

/**
 * # Safety
 * `session` must come from `cp_session_new`/`cp_session_open` or be NULL.
 */
void cp_session_free(struct CpSession *session);

/**
 * Image height and width.
 *
 * # Safety
 * All pointers must be valid.
 */
enum CpStatus cp_session_dims(const struct CpSession *session, size_t *height, size_t *width);

/**
 * New mask from one point; writes its id to `mask_id`.
 *
 * # Safety
 * `session` must be a live handle and `mask_id` a valid pointer.
 */
enum CpStatus cp_session_add_point(struct CpSession *session,
                                   size_t row,
                                   size_t col,
                                   bool positive,
                                   uint64_t *mask_id);

/**
 * New mask from an inclusive box; writes its id to `mask_id`.
 *
 * # Safety
 * `session` must be a live handle and `mask_id` a valid pointer.
 */
enum CpStatus cp_session_add_box(struct CpSession *session,
                                 size_t row_min,
                                 size_t col_min,
                                 size_t row_max,
                                 size_t col_max,
                                 uint64_t *mask_id);

/**
 * Adds a point to a mask's history and re-decodes it.
 *
 * # Safety
 * `session` must be a live handle.
 */
enum CpStatus cp_session_refine_point(struct CpSession *session,
                                      uint64_t mask_id,
                                      size_t row,
                                      size_t col,
                                      bool positive);

/**
 * Adds a box to a mask's history and re-decodes it.
 *
 * # Safety
 * `session` must be a live handle.
 */
enum CpStatus cp_session_refine_box(struct CpSession *session,
                                    uint64_t mask_id,
                                    size_t row_min,
                                    size_t col_min,
                                    size_t row_max,
                                    size_t col_max);

/**
 * Reverts the last refinement of a mask.
 *
 * # Safety
 * `session` must be a live handle.
 */
enum CpStatus cp_session_undo(struct CpSession *session, uint64_t mask_id);

/**
 * # Safety
 * `session` must be a live handle.
 */
enum CpStatus cp_session_remove(struct CpSession *session, uint64_t mask_id);

/**
 * Automatic masks from the built-in intensity-threshold detector.
 * Replaces earlier automatic masks; writes the number created to `count`.
 *
 * # Safety
 * `session` must be a live handle and `count` a valid pointer.
 */
enum CpStatus cp_session_auto_segment(struct CpSession *session,
                                      float threshold,
                                      bool dark_foreground,
                                      size_t *count);

/**
 * Writes up to `capacity` mask ids to `ids` and the total count to `len`.
 * Returns `BufferTooSmall` (with `len` set) if `capacity` is insufficient.
 *
 * # Safety
 * `ids` must point to `capacity` writable slots (may be NULL when
 * `capacity` is 0); `len` must be valid.
 */
enum CpStatus cp_session_mask_ids(const struct CpSession *session,
                                  uint64_t *ids,
                                  size_t capacity,
                                  size_t *len);

/**
 * Copies a mask into `buffer` (`height * width` bytes, 0 or 1).
 *
 * # Safety
 * `buffer` must point to `len` writable bytes.
 */
enum CpStatus cp_session_get_mask(const struct CpSession *session,
                                  uint64_t mask_id,
                                  uint8_t *buffer,
                                  size_t len);

/**
 * Number of prompts in a mask's history.
 *
 * # Safety
 * `session` must be a live handle and `out` a valid pointer.
 */
enum CpStatus cp_session_history_len(const struct CpSession *session,
                                     uint64_t mask_id,
                                     size_t *out);

/**
 * Annotation export (schema 1) as a NUL-terminated JSON string; release
 * with `cp_string_free`.
 *
 * # Safety
 * `session` must be a live handle and `out` a valid pointer.
 */
enum CpStatus cp_session_export_json(const struct CpSession *session, char **out);

/**
 * # Safety
 * `s` must come from this library or be NULL.
 */
void cp_string_free(char *s);

/**
 * IoU of two `height × width` byte masks (nonzero = foreground).
 *
 * # Safety
 * `a` and `b` must each point to `height * width` readable bytes.
 */
enum CpStatus cp_mask_iou(const uint8_t *a,
                          const uint8_t *b,
                          size_t height,
                          size_t width,
                          double *out);

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call into the library on the same thread.
 */
const char *cp_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cp_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CELLPILOT_H */

#ifndef FEWSHOT_SEG_H
#define FEWSHOT_SEG_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FsStatus {
  FS_STATUS_OK = 0,
  FS_STATUS_NULL_POINTER = 1,
  FS_STATUS_INVALID_ARGUMENT = 2,
  FS_STATUS_IO = 3,
  FS_STATUS_PARSE = 4,
  FS_STATUS_SHAPE = 5,
  FS_STATUS_CONFIG = 6,
  FS_STATUS_CONTRACT = 7,
  FS_STATUS_PANIC = 8,
} FsStatus;

/**
 * Element type codes, identical to the tensor file format.
 */
typedef enum FsDtype {
  FS_DTYPE_F32 = 0,
  FS_DTYPE_F64 = 1,
  FS_DTYPE_U8 = 2,
} FsDtype;

/**
 * A loaded checkpoint with one selected model.
 */
typedef struct FsModel FsModel;

/**
 * A tensor read from a file.
 */
typedef struct FsTensor FsTensor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *fs_last_error_message(void);

/**
 * Loads the checkpoint directory `dir`; the first stored model is selected.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FsStatus fs_model_load(const char *dir, struct FsModel **out);

/**
 * # Safety
 * `model` must come from [`fs_model_load`] and not be used afterwards.
 */
void fs_model_free(struct FsModel *model);

/**
 * Number of stored models, 0 for null.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t fs_model_count(const struct FsModel *model);

/**
 * Selects the stored model called `name`, e.g. `fold0` or `fold1_group0`.
 *
 * # Safety
 * `model` must be a live handle and `name` a NUL-terminated string.
 */
enum FsStatus fs_model_select(struct FsModel *model, const char *name);

/**
 * Writes the predicted binary query mask into `out_mask`. All buffers hold
 * `height * width` row-major values; nonzero support-mask entries are
 * foreground.
 *
 * # Safety
 * Every pointer must reference `height * width` readable (or, for
 * `out_mask`, writable) elements.
 */
enum FsStatus fs_segment(const struct FsModel *model,
                         const float *support,
                         const uint8_t *support_mask,
                         const float *query,
                         size_t height,
                         size_t width,
                         uint8_t *out_mask);

/**
 * Dice score in `[0, 100]` of two binary masks of `len` elements.
 *
 * # Safety
 * `pred` and `truth` must reference `len` bytes, `out` one `double`.
 */
enum FsStatus fs_dice(const uint8_t *pred, const uint8_t *truth, size_t len, double *out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FsStatus fs_tensor_read(const char *path, struct FsTensor **out);

/**
 * # Safety
 * `t` must come from [`fs_tensor_read`] and not be used afterwards.
 */
void fs_tensor_free(struct FsTensor *t);

/**
 * # Safety
 * `t` must be a live handle and `out` a valid pointer.
 */
enum FsStatus fs_tensor_dtype(const struct FsTensor *t, enum FsDtype *out);

/**
 * Rank of the tensor, 0 for null.
 *
 * # Safety
 * `t` must be null or a live handle.
 */
size_t fs_tensor_rank(const struct FsTensor *t);

/**
 * Copies the dimensions into `dims`, which must hold `rank` entries.
 *
 * # Safety
 * `t` must be a live handle and `dims` writable for `capacity` entries.
 */
enum FsStatus fs_tensor_dims(const struct FsTensor *t, size_t *dims, size_t capacity);

/**
 * Copies an `f32` tensor's `len` elements into `out`.
 *
 * # Safety
 * `t` must be a live handle and `out` writable for `len` floats.
 */
enum FsStatus fs_tensor_copy_f32(const struct FsTensor *t, float *out, size_t len);

/**
 * Copies a `u8` tensor's `len` elements into `out`.
 *
 * # Safety
 * `t` must be a live handle and `out` writable for `len` bytes.
 */
enum FsStatus fs_tensor_copy_u8(const struct FsTensor *t, uint8_t *out, size_t len);

/**
 * Writes a row-major `f32` tensor of the given dimensions.
 *
 * # Safety
 * `dims` must hold `rank` entries and `data` their product of floats.
 */
enum FsStatus fs_tensor_write_f32(const char *path,
                                  const size_t *dims,
                                  size_t rank,
                                  const float *data);

/**
 * Writes a row-major `u8` tensor of the given dimensions.
 *
 * # Safety
 * `dims` must hold `rank` entries and `data` their product of bytes.
 */
enum FsStatus fs_tensor_write_u8(const char *path,
                                 const size_t *dims,
                                 size_t rank,
                                 const uint8_t *data);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEWSHOT_SEG_H */

#ifndef CONVNORM_H
#define CONVNORM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status of a call. Zero is success; anything else is a failure whose
 * detail is available from `cn_last_error` on the calling thread.
 */
enum CnStatus
#ifdef __cplusplus
  : int32_t
#endif // __cplusplus
 {
  CnStatus_Ok = 0,
  /**
   * A required pointer argument was null.
   */
  CnStatus_NullArgument = 1,
  /**
   * Arguments violate an operation's contract (bad shape, rank,
   * extents, or parameter domain).
   */
  CnStatus_InvalidArgument = 2,
  /**
   * A combined kernel spectrum vanishes and eps is zero.
   */
  CnStatus_SingularSpectrum = 3,
  /**
   * The operating system rejected a file operation.
   */
  CnStatus_IoError = 4,
  /**
   * A file does not decode as the CNT1 tensor format.
   */
  CnStatus_FormatError = 5,
  /**
   * A tensor value is NaN or infinite.
   */
  CnStatus_NonFinite = 6,
  /**
   * An internal invariant failed; the library state is still sound.
   */
  CnStatus_Panic = 7,
};
#ifndef __cplusplus
typedef int32_t CnStatus;
#endif // __cplusplus

/**
 * Opaque dense row-major f64 tensor handle.
 */
typedef struct CnTensor CnTensor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Most recent failure description on this thread, or null if no call
 * has failed yet.
 *
 * # Safety
 * The returned pointer is owned by the library and valid until the
 * next failing call on the same thread. Do not free it.
 */
const char *cn_last_error(void);

/**
 * Frees a string returned by this library through an out-parameter.
 * Null is ignored.
 *
 * # Safety
 * `s` must be a pointer previously produced by this library's string
 * out-parameters and not freed since.
 */
void cn_string_free(char *s);

/**
 * Creates a tensor from a shape and row-major data. `data_len` must
 * equal the product of the extents.
 *
 * # Safety
 * `shape` must point to `rank` readable `uintptr_t`s, `data` to
 * `data_len` readable doubles, and `out` must be writable. On success
 * `*out` owns the new handle.
 */
CnStatus cn_tensor_new(const uintptr_t *shape,
                       uintptr_t rank,
                       const double *data,
                       uintptr_t data_len,
                       struct CnTensor **out);

/**
 * Destroys a tensor handle. Null is ignored.
 *
 * # Safety
 * `t` must be a handle from this library that has not been freed.
 */
void cn_tensor_free(struct CnTensor *t);

/**
 * Writes the number of axes to `*out`.
 *
 * # Safety
 * `t` must be a live handle; `out` must be writable.
 */
CnStatus cn_tensor_rank(const struct CnTensor *t, uintptr_t *out);

/**
 * Writes the extent of `axis` to `*out`.
 *
 * # Safety
 * `t` must be a live handle; `out` must be writable.
 */
CnStatus cn_tensor_extent(const struct CnTensor *t, uintptr_t axis, uintptr_t *out);

/**
 * Writes the total element count to `*out`.
 *
 * # Safety
 * `t` must be a live handle; `out` must be writable.
 */
CnStatus cn_tensor_len(const struct CnTensor *t, uintptr_t *out);

/**
 * Writes a borrowed pointer to the row-major data to `*out`.
 *
 * # Safety
 * `t` must be a live handle; `out` must be writable. The data pointer
 * is valid until the handle is freed and must not be written through.
 */
CnStatus cn_tensor_data(const struct CnTensor *t, const double **out);

/**
 * Reads a CNT1 file into a new tensor handle.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; `out` must be
 * writable. On success `*out` owns the new handle.
 */
CnStatus cn_tensor_read(const char *path, struct CnTensor **out);

/**
 * Writes a tensor to a CNT1 file.
 *
 * # Safety
 * `t` must be a live handle; `path` must be a NUL-terminated UTF-8
 * string.
 */
CnStatus cn_tensor_write(const char *path, const struct CnTensor *t);

/**
 * Reparametrizes a rank-4 kernel stack (C_O, C_I, k1, k2) to a tight
 * frame on an `h` by `w` grid; the result has spatial extents (h, w).
 *
 * # Safety
 * `kernels` must be a live handle; `out` must be writable. On success
 * `*out` owns the new handle.
 */
CnStatus cn_reparam_kernels(const struct CnTensor *kernels,
                            uintptr_t h,
                            uintptr_t w,
                            double eps,
                            struct CnTensor **out);

/**
 * Applies the channel-normalized convolution to a rank-4 activation
 * batch (B, C_I, H, W): convolve with the kernels, then filter each
 * output channel by its preconditioner spectrum.
 *
 * # Safety
 * `z` and `kernels` must be live handles; `out` must be writable. On
 * success `*out` owns the new handle.
 */
CnStatus cn_normalize_activations(const struct CnTensor *z,
                                  const struct CnTensor *kernels,
                                  double eps,
                                  struct CnTensor **out);

/**
 * Serializes the spectral report of a kernel stack on an `h` by `w`
 * grid as pretty-printed JSON. Free the string with `cn_string_free`.
 *
 * # Safety
 * `kernels` must be a live handle; `out` must be writable. On success
 * `*out` owns the new string.
 */
CnStatus cn_spectral_report_json(const struct CnTensor *kernels,
                                 uintptr_t h,
                                 uintptr_t w,
                                 char **out);

/**
 * Writes κ(Q_k) for output channel `k` to `*out`; the value is +INFINITY
 * when the channel's smallest singular value is at the spectral floor.
 *
 * # Safety
 * `kernels` must be a live handle; `out` must be writable.
 */
CnStatus cn_channel_condition_number(const struct CnTensor *kernels,
                                     uintptr_t k,
                                     uintptr_t h,
                                     uintptr_t w,
                                     double *out);

/**
 * Writes max over frequencies of |Σ_j |ĝ_kj|² − 1| across channels to
 * `*out`: zero exactly when every channel operator is a tight frame.
 *
 * # Safety
 * `kernels` must be a live handle; `out` must be writable.
 */
CnStatus cn_tight_frame_residual(const struct CnTensor *kernels,
                                 uintptr_t h,
                                 uintptr_t w,
                                 double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONVNORM_H */

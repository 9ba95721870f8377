#ifndef MXLAB_H
#define MXLAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

#define MXLAB_FORMAT_E4M3 0

#define MXLAB_FORMAT_E5M2 1

#define MXLAB_FORMAT_E2M3 2

#define MXLAB_FORMAT_E3M2 3

#define MXLAB_FORMAT_BF16 4

#define MXLAB_ROUND_NEAREST_EVEN 0

#define MXLAB_ROUND_TOWARD_ZERO 1

/**
 * Opaque MX quantization spec.
 */
typedef struct MxlabSpec MxlabSpec;

typedef int32_t MxlabStatus;

/**
 * Fitted `L(N, D) = E + A / N^alpha + B / D^beta`.
 */
typedef struct MxlabScalingFit {
  double a_coef;
  double b_coef;
  double e;
  double alpha;
  double beta;
  /**
   * `beta / (alpha + beta)`
   */
  double allocation_exponent;
  double objective;
} MxlabScalingFit;

#define MXLAB_OK 0

#define MXLAB_ERR_NULL_POINTER 1

#define MXLAB_ERR_INVALID_INPUT 2

#define MXLAB_ERR_NON_FINITE 3

#define MXLAB_ERR_SHAPE 4

#define MXLAB_ERR_UNDEFINED_RATIO 5

#define MXLAB_ERR_ILL_POSED_FIT 6

#define MXLAB_ERR_BUFFER_TOO_SMALL 7

#define MXLAB_ERR_PANIC 8

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into the library from the same thread.
 */
const char *mxlab_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mxlab_version(void);

/**
 * Create a spec for element format `format` (an `MXLAB_FORMAT_*` id) with
 * block size `block_size` and nearest-even rounding.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
MxlabStatus mxlab_spec_new(uint32_t format, size_t block_size, struct MxlabSpec **out);

/**
 * Create a spec from a format name such as `e4m3` or `mxfp8-e4m3`.
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` writable.
 */
MxlabStatus mxlab_spec_from_name(const char *name, size_t block_size, struct MxlabSpec **out);

/**
 * Release a spec. Null is ignored.
 *
 * # Safety
 * `spec` must come from `mxlab_spec_new` and not be used afterwards.
 */
void mxlab_spec_free(struct MxlabSpec *spec);

/**
 * Set the rounding mode (`MXLAB_ROUND_*`).
 *
 * # Safety
 * `spec` must be a live handle.
 */
MxlabStatus mxlab_spec_set_rounding(struct MxlabSpec *spec, uint32_t rounding);

/**
 * Set the shared-exponent offset (0 or 1). With `conditional` nonzero the
 * offset only applies to blocks that would otherwise overflow.
 *
 * # Safety
 * `spec` must be a live handle.
 */
MxlabStatus mxlab_spec_set_exponent_offset(struct MxlabSpec *spec,
                                           int32_t offset,
                                           bool conditional);

/**
 * Encode one value; the code is written to `out_bits`.
 *
 * # Safety
 * `out_bits` must be writable.
 */
MxlabStatus mxlab_encode_scalar(double value,
                                uint32_t format,
                                uint32_t rounding,
                                bool saturate,
                                uint16_t *out_bits);

/**
 * Decode one code; NaN codes decode to NaN.
 *
 * # Safety
 * `out_value` must be writable.
 */
MxlabStatus mxlab_decode_scalar(uint16_t bits, uint32_t format, double *out_value);

/**
 * Quantize up to `block_size` values into one block. Writes the shared
 * exponent and `len` codes.
 *
 * # Safety
 * `values` and `out_codes` must hold `len` elements; `out_shared_exp`
 * must be writable.
 */
MxlabStatus mxlab_quantize_block(const struct MxlabSpec *spec,
                                 const double *values,
                                 size_t len,
                                 int32_t *out_shared_exp,
                                 uint16_t *out_codes);

/**
 * Decode a block of `len` codes with the given shared exponent.
 *
 * # Safety
 * `codes` and `out_values` must hold `len` elements.
 */
MxlabStatus mxlab_dequantize_block(const struct MxlabSpec *spec,
                                   int32_t shared_exp,
                                   const uint16_t *codes,
                                   size_t len,
                                   double *out_values);

/**
 * Quantize and dequantize a row-major `rows x cols` f32 matrix in place,
 * blocking along `axis` (0 or 1). Writes the last-bin fraction if
 * `out_last_bin` is non-null.
 *
 * # Safety
 * `data` must hold `rows * cols` elements.
 */
MxlabStatus mxlab_fake_quantize_f32(const struct MxlabSpec *spec,
                                    float *data,
                                    size_t rows,
                                    size_t cols,
                                    size_t axis,
                                    double *out_last_bin);

/**
 * Fraction of elements of a `rows x cols` matrix landing on the largest
 * code of the element format.
 *
 * # Safety
 * `data` must hold `rows * cols` elements; `out` must be writable.
 */
MxlabStatus mxlab_last_bin_fraction(const struct MxlabSpec *spec,
                                    const double *data,
                                    size_t rows,
                                    size_t cols,
                                    size_t axis,
                                    double *out);

/**
 * Indices `t` with `losses[t] > factor * losses[t-1]`. Up to `capacity`
 * indices are written to `out_steps`; `out_count` always receives the
 * total, and `MXLAB_ERR_BUFFER_TOO_SMALL` is returned if it exceeds
 * `capacity`.
 *
 * # Safety
 * `losses` must hold `len` values, `out_steps` `capacity` slots.
 */
MxlabStatus mxlab_detect_spikes(const double *losses,
                                size_t len,
                                double factor,
                                size_t *out_steps,
                                size_t capacity,
                                size_t *out_count);

/**
 * `|1 - eta * lambda_max| + eta * zeta_lower * lambda_max`.
 */
double mxlab_stability_margin(double eta, double lambda_max, double zeta_lower);

/**
 * Fit the scaling law to `len` points given as parallel arrays.
 *
 * # Safety
 * `n`, `d` and `loss` must hold `len` values; `out` must be writable.
 */
MxlabStatus mxlab_fit_scaling_law(const double *n,
                                  const double *d,
                                  const double *loss,
                                  size_t len,
                                  double huber_delta,
                                  struct MxlabScalingFit *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MXLAB_H */

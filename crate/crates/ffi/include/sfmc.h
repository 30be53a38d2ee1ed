#ifndef SFMC_H
#define SFMC_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>
#include <stddef.h>

#define SFMC_OK 0

/*
 A required pointer argument was null.
 */
#define SFMC_ERR_NULL 1

#define SFMC_ERR_INPUT 2

#define SFMC_ERR_NUMERICAL 3

#define SFMC_ERR_NONCONVERGENCE 4

/*
 The library panicked; the handle arguments are left untouched.
 */
#define SFMC_ERR_PANIC 5

#define SFMC_LOSS_QUADRATIC 0

/*
 Uses the `huber_delta` argument.
 */
#define SFMC_LOSS_HUBER 1

#define SFMC_LOSS_GAUSSIAN 2

#define SFMC_LOSS_POISSON 3

#define SFMC_LOSS_BERNOULLI 4

/*
 Observed data: values and a 0/1 observation mask.
 */
typedef struct SfmcData SfmcData;

/*
 A fitted model with its tuning values.
 */
typedef struct SfmcFit SfmcFit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Copy the last error message of this thread into `buf` (NUL-terminated,
 truncated to `len`). Returns the full message length without the NUL.

 # Safety
 `buf` must be null or valid for `len` bytes.
 */
uintptr_t sfmc_last_error(char *buf, uintptr_t len);

/*
 Library version as a static NUL-terminated string.
 */
const char *sfmc_version(void);

/*
 Build a data handle from column-major n1 x n2 buffers. Entries of `x`
 where `w` is 0 are ignored; `w` must be 0 or 1.

 # Safety
 `x` and `w` must be valid for n1 * n2 reads; `out` must be writable.
 */
int sfmc_data_new(uintptr_t n1,
                  uintptr_t n2,
                  const double *x,
                  const double *w,
                  struct SfmcData **out);

/*
 # Safety
 `data` must be null or a handle from `sfmc_data_new` not yet freed.
 */
void sfmc_data_free(struct SfmcData *data);

/*
 Full pipeline: rank selection over the default penalty grid, then the
 weighted refit. `eta <= 0` selects eta from the data.

 # Safety
 `data` must be a live handle and `out` writable.
 */
int sfmc_fit_auto(const struct SfmcData *data,
                  int loss_kind,
                  double huber_delta,
                  double eta,
                  struct SfmcFit **out);

/*
 Fit at known ranks and fixed eta (> 0).

 # Safety
 `data` must be a live handle and `out` writable.
 */
int sfmc_fit_known_rank(const struct SfmcData *data,
                        int loss_kind,
                        double huber_delta,
                        uintptr_t d_s,
                        uintptr_t d_m,
                        uintptr_t d_theta,
                        double eta,
                        struct SfmcFit **out);

/*
 # Safety
 `fit` must be null or a handle from a fit function not yet freed.
 */
void sfmc_fit_free(struct SfmcFit *fit);

/*
 Selected ranks.

 # Safety
 `fit` must be a live handle; the out-pointers must be writable.
 */
int sfmc_fit_ranks(const struct SfmcFit *fit, uintptr_t *d_s, uintptr_t *d_m, uintptr_t *d_theta);

/*
 Penalty level (NaN for known-rank fits) and weight used.

 # Safety
 `fit` must be a live handle; the out-pointers must be writable.
 */
int sfmc_fit_tuning(const struct SfmcFit *fit, double *mu, double *eta);

/*
 Copy the fitted M (column-major) into `buf` of at least n1 * n2 values.

 # Safety
 `fit` must be a live handle and `buf` valid for `len` writes.
 */
int sfmc_fit_m(const struct SfmcFit *fit, double *buf, uintptr_t len);

/*
 Copy the fitted Theta (column-major) into `buf`.

 # Safety
 `fit` must be a live handle and `buf` valid for `len` writes.
 */
int sfmc_fit_theta(const struct SfmcFit *fit, double *buf, uintptr_t len);

/*
 Standard errors of the fitted M entries (column-major). Not available for
 the Huber loss.

 # Safety
 `fit` must be a live handle and `buf` valid for `len` writes.
 */
int sfmc_fit_se_m(const struct SfmcFit *fit, double *buf, uintptr_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SFMC_H */

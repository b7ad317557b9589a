#ifndef SPLINEVINE_H
#define SPLINEVINE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Estimator selector for [`sv_vine_fit`].
 */
#define SV_MODE_SIMPA 0

#define SV_MODE_COND 1

#define SV_MODE_TEST 2

/**
 * Result codes.
 */
typedef enum SvStatus {
  SV_STATUS_OK = 0,
  SV_STATUS_NULL_POINTER = 1,
  SV_STATUS_INVALID_ARGUMENT = 2,
  SV_STATUS_DIMENSION_MISMATCH = 3,
  SV_STATUS_FIT_FAILED = 4,
  SV_STATUS_IO = 5,
  SV_STATUS_PARSE = 6,
  SV_STATUS_PANIC = 7,
} SvStatus;

/**
 * A fitted vine copula.
 */
typedef struct SvVine SvVine;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length without the NUL.
 */
uintptr_t sv_last_error(char *buf, uintptr_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sv_version(void);

/**
 * Fits a vine to `n` observations of `p` variables stored row-major in
 * `data`, all in [0, 1]. `mode` is one of the `SV_MODE_*` constants.
 */
enum SvStatus sv_vine_fit(const double *data,
                          uintptr_t n,
                          uintptr_t p,
                          int mode,
                          uint32_t d,
                          uint32_t d2,
                          uint32_t d3,
                          double alpha,
                          struct SvVine **out);

/**
 * Reads a model written by [`sv_vine_save`] or the command-line tool.
 */
enum SvStatus sv_vine_load(const char *path, struct SvVine **out);

enum SvStatus sv_vine_save(const struct SvVine *vine, const char *path);

enum SvStatus sv_vine_dim(const struct SvVine *vine, uintptr_t *out);

/**
 * Log densities of `n` points (row-major, `p` columns) written to `out`.
 */
enum SvStatus sv_vine_log_density(const struct SvVine *vine,
                                  const double *u,
                                  uintptr_t n,
                                  uintptr_t p,
                                  double *out);

/**
 * Releases a handle; null is ignored.
 */
void sv_vine_free(struct SvVine *vine);

/**
 * Draws `n` copula-scale observations of a DGP such as
 * `"frank:p=3,case=b,beta=0.6"` into `out` (row-major, `p` columns), using
 * replicate stream `stream` of `seed`.
 */
enum SvStatus sv_simulate(const char *dgp,
                          uintptr_t n,
                          uintptr_t p,
                          uint64_t seed,
                          uint64_t stream,
                          double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPLINEVINE_H */

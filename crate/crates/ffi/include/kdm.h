#ifndef KDM_H
#define KDM_H

/* Generated by cbindgen from crates/ffi; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum KdmKernelFamily {
  KDM_KERNEL_FAMILY_GAUSSIAN = 0,
  KDM_KERNEL_FAMILY_LAPLACE = 1,
  KDM_KERNEL_FAMILY_POLYNOMIAL = 2,
} KdmKernelFamily;

typedef enum KdmPrior {
  KDM_PRIOR_ZERO = 0,
  KDM_PRIOR_ONE = 1,
} KdmPrior;

typedef enum KdmStatus {
  KDM_STATUS_OK = 0,
  KDM_STATUS_NULL_POINTER = 1,
  KDM_STATUS_INVALID_ARGUMENT = 2,
  KDM_STATUS_DIMENSION_MISMATCH = 3,
  KDM_STATUS_NUMERIC = 4,
  KDM_STATUS_IO = 5,
  KDM_STATUS_PANIC = 6,
} KdmStatus;

typedef enum KdmTruncationRule {
  KDM_TRUNCATION_RULE_RELATIVE = 0,
  KDM_TRUNCATION_RULE_EXPLAINED_VARIATION = 1,
} KdmTruncationRule;

/**
 * Opaque fitted model.
 */
typedef struct KdmModelHandle KdmModelHandle;

/**
 * Opaque test outcome.
 */
typedef struct KdmTestResultHandle KdmTestResultHandle;

/**
 * Kernel family and hyperparameters; unused fields are ignored.
 */
typedef struct KdmKernel {
  enum KdmKernelFamily family;
  double rho;
  double c;
  uint32_t q;
} KdmKernel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *kdm_version(void);

/**
 * Message of the last failure on this thread, or NULL. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *kdm_last_error_message(void);

/**
 * Fits a model from row-major `n × d` samples `p` (reference) and `q`
 * (target). `eps_rel` is the decomposition tolerance relative to the
 * kernel-matrix trace.
 */
enum KdmStatus kdm_fit(const double *p,
                       const double *q,
                       size_t n,
                       size_t d,
                       struct KdmKernel kernel,
                       double lambda,
                       double eps_rel,
                       enum KdmPrior prior,
                       struct KdmModelHandle **out_model);

void kdm_model_free(struct KdmModelHandle *model);

/**
 * Rank of the low-rank expansion; 0 for a null handle.
 */
size_t kdm_model_rank(const struct KdmModelHandle *model);

/**
 * Input dimension; 0 for a null handle.
 */
size_t kdm_model_dim(const struct KdmModelHandle *model);

/**
 * RKHS norm of the fitted `h`.
 */
enum KdmStatus kdm_model_h_norm(const struct KdmModelHandle *model, double *out);

/**
 * Evaluates the density ratio at `m` row-major points of dimension `d`,
 * writing `m` values to `out`. With `clip` the values are floored at zero.
 */
enum KdmStatus kdm_model_eval(const struct KdmModelHandle *model,
                              const double *z,
                              size_t m,
                              size_t d,
                              bool clip,
                              double *out);

/**
 * Writes the model as JSON to `path` (replacing any existing file).
 */
enum KdmStatus kdm_model_save(const struct KdmModelHandle *model, const char *path);

enum KdmStatus kdm_model_load(const char *path, struct KdmModelHandle **out_model);

/**
 * Chi-square test of the model's prior. A non-positive `eta` skips the
 * finite-sample bound check.
 */
enum KdmStatus kdm_test(const struct KdmModelHandle *model,
                        enum KdmTruncationRule rule,
                        double t,
                        double eta,
                        struct KdmTestResultHandle **out_result);

void kdm_test_result_free(struct KdmTestResultHandle *result);

/**
 * Test statistic; NaN for a null handle.
 */
double kdm_test_result_statistic(const struct KdmTestResultHandle *result);

/**
 * Upper-tail p-value; NaN for a null handle.
 */
double kdm_test_result_p_value(const struct KdmTestResultHandle *result);

/**
 * Degrees of freedom; 0 for a null handle.
 */
size_t kdm_test_result_dof(const struct KdmTestResultHandle *result);

/**
 * Bound-check outcome: 1 satisfied, 0 violated, -1 not computed or null.
 */
int32_t kdm_test_result_bound_satisfied(const struct KdmTestResultHandle *result);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KDM_H */

#ifndef DDI_H
#define DDI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call.
typedef enum DdiStatus {
  DDI_STATUS_OK = 0,
  // A required pointer argument was null.
  DDI_STATUS_NULL_ARGUMENT = 1,
  // An argument was out of range or had the wrong length.
  DDI_STATUS_INVALID_ARGUMENT = 2,
  // The checkpoint is missing, unreadable or malformed.
  DDI_STATUS_CHECKPOINT = 3,
  // No exit fits within the budget.
  DDI_STATUS_BUDGET_INFEASIBLE = 4,
  // Numerical failure during inference.
  DDI_STATUS_NUMERICAL = 5,
  DDI_STATUS_IO = 6,
  // Any other failure, including a caught panic.
  DDI_STATUS_INTERNAL = 7,
} DdiStatus;

// Cost metric for reported costs and budgets.
typedef enum DdiMetric {
  // One unit per executed block.
  DDI_METRIC_UNIFORM = 0,
  // Multiply-accumulate count.
  DDI_METRIC_FLOPS = 1,
  // Energy under the default hardware parameters.
  DDI_METRIC_ENERGY = 2,
} DdiMetric;

typedef enum DdiBranchPolicy {
  // Evaluate every branch reached before the budget runs out.
  DDI_BRANCH_POLICY_ALWAYS = 0,
  // Evaluate a branch only when the next exit might not fit the budget.
  DDI_BRANCH_POLICY_OPPORTUNISTIC = 1,
} DdiBranchPolicy;

// Opaque model handle.
typedef struct DdiModel DdiModel;

// Outcome of one inference.
typedef struct DdiResult {
  // Predicted class.
  uint32_t prediction;
  // Exit that produced the prediction: 1 for the first branch, up to
  // the `num_exits` of `ddi_model_info` for the final head.
  uint32_t exit;
  // Cost actually spent, gate overhead included.
  double realized_cost;
  // Fraction of gated blocks skipped.
  double skip_ratio;
  // Smallest budget that admits the first exit; set on `BudgetInfeasible`.
  double min_budget;
} DdiResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Loads a checkpoint written by the training tools.
//
// # Safety
// `path` must be a valid NUL-terminated string and `out` a valid pointer.
// On success `*out` receives a handle to release with `ddi_model_free`.
enum DdiStatus ddi_model_load(const char *path, struct DdiModel **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must be null or a handle from `ddi_model_load` not yet freed.
void ddi_model_free(struct DdiModel *model);

// Expected input geometry and label space.
//
// # Safety
// `model` must be a live handle; each output pointer must be valid.
enum DdiStatus ddi_model_info(const struct DdiModel *model,
                              size_t *height,
                              size_t *width,
                              size_t *channels,
                              size_t *num_classes,
                              size_t *num_exits);

// Inference with hard gates through the final head; no early exit.
//
// # Safety
// `model` must be a live handle, `pixels` must point to `len` readable
// bytes and `out` must be valid.
enum DdiStatus ddi_infer_adaptive(const struct DdiModel *model,
                                  const uint8_t *pixels,
                                  size_t len,
                                  enum DdiMetric metric,
                                  struct DdiResult *out);

// Inference that stops at the deepest exit reachable within `limit`.
// On `BudgetInfeasible`, `out->min_budget` holds the cost of the first exit.
//
// # Safety
// As for `ddi_infer_adaptive`.
enum DdiStatus ddi_infer_budgeted(const struct DdiModel *model,
                                  const uint8_t *pixels,
                                  size_t len,
                                  enum DdiMetric metric,
                                  double limit,
                                  enum DdiBranchPolicy policy,
                                  struct DdiResult *out);

// Copies the calling thread's most recent error message into `buf`,
// truncated and always NUL-terminated. Returns the full message length in
// bytes, excluding the terminator, or 0 when there is none.
//
// # Safety
// `buf` must be null or point to `cap` writable bytes.
size_t ddi_last_error_message(char *buf, size_t cap);

// Library version as a static NUL-terminated string.
const char *ddi_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DDI_H */

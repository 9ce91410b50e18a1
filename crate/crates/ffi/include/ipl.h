#ifndef IPL_H
#define IPL_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum IplStatus {
  IPL_STATUS_OK = 0,
  IPL_STATUS_NULL_POINTER = 1,
  IPL_STATUS_INVALID_ARGUMENT = 2,
  IPL_STATUS_IO = 3,
  IPL_STATUS_PARSE = 4,
  IPL_STATUS_SPLIT = 5,
  IPL_STATUS_MODEL = 6,
  IPL_STATUS_TRAIN = 7,
  IPL_STATUS_EVAL = 8,
  IPL_STATUS_THEORY = 9,
  IPL_STATUS_BUFFER_TOO_SMALL = 10,
  IPL_STATUS_PANIC = 255,
} IplStatus;

typedef enum IplDelimiter {
  IPL_DELIMITER_TAB = 0,
  IPL_DELIMITER_COMMA = 1,
  IPL_DELIMITER_DOUBLE_COLON = 2,
} IplDelimiter;

typedef enum IplSplitPart {
  IPL_SPLIT_PART_TRAIN = 0,
  IPL_SPLIT_PART_VALIDATION = 1,
  IPL_SPLIT_PART_TEST = 2,
} IplSplitPart;

// Opaque interaction log.
typedef struct IplLog IplLog;

// Opaque trained or loaded model.
typedef struct IplModel IplModel;

// Opaque train/validation/test split.
typedef struct IplSplit IplSplit;

// Training parameters. `n_layers = 0` trains matrix factorization, otherwise LightGCN.
typedef struct IplTrainConfig {
  size_t dim;
  size_t n_layers;
  size_t epochs;
  size_t batch_size;
  double learning_rate;
  double l2;
  double lambda_f;
  double gamma;
  uint64_t seed;
  // Regularize over every rated item instead of the batch's positives.
  bool full_ipl;
} IplTrainConfig;

typedef struct IplMetrics {
  double precision;
  double recall;
  double ndcg;
  double snips_recall;
  double mi;
  // NaN when no item was hit.
  double di;
  size_t n_users;
} IplMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. Valid until the next failing call.
const char *ipl_last_error(void);

const char *ipl_version(void);

// Parses a delimited file. `rating_col < 0` means no rating column;
// a NaN `rating_threshold` keeps every row.
enum IplStatus ipl_log_parse_file(const char *file,
                                  enum IplDelimiter delimiter,
                                  size_t user_col,
                                  size_t item_col,
                                  int64_t rating_col,
                                  double rating_threshold,
                                  bool has_header,
                                  struct IplLog **out_log);

// Builds a log from index pairs; duplicates are dropped.
enum IplStatus ipl_log_from_pairs(size_t n_users,
                                  size_t n_items,
                                  const uint32_t *users,
                                  const uint32_t *items,
                                  size_t len,
                                  struct IplLog **out_log);

void ipl_log_free(struct IplLog *log);

size_t ipl_log_n_users(const struct IplLog *log);

size_t ipl_log_n_items(const struct IplLog *log);

size_t ipl_log_n_interactions(const struct IplLog *log);

// Writes `Q*` for every item; `len` must equal the item count.
enum IplStatus ipl_log_item_popularity(const struct IplLog *log, uint32_t *q_star, size_t len);

// Writes every user's degree; `len` must be at least the user count.
enum IplStatus ipl_log_user_degrees(const struct IplLog *log, uint32_t *degrees, size_t len);

// Per-item stratified split.
enum IplStatus ipl_split(const struct IplLog *log,
                         double train,
                         double validation,
                         double test,
                         uint64_t seed,
                         struct IplSplit **out_split);

// Copies one part of a split into a new log handle.
enum IplStatus ipl_split_part(const struct IplSplit *split,
                              enum IplSplitPart part,
                              struct IplLog **out_log);

void ipl_split_free(struct IplSplit *split);

// `r_i = C*_i / Q*_i^(2 - gamma)`. Items with `Q* = 0` get NaN.
enum IplStatus ipl_interaction_rate(const double *c_star,
                                    const uint32_t *q_star,
                                    size_t len,
                                    double gamma,
                                    double *out_rates);

// Population std over mean of `rates`.
enum IplStatus ipl_di(const double *rates, size_t len, double *out_di);

// Mutual information (nats) between `rates` and `q_star` under equal-mass binning.
enum IplStatus ipl_mi(const double *rates,
                      const uint32_t *q_star,
                      size_t len,
                      size_t bins,
                      double *out_mi);

enum IplStatus ipl_fit_pareto_beta(const double *degrees,
                                   size_t len,
                                   double x_min,
                                   double *out_beta);

// Chernoff bound `q` on at-risk membership; `*out_vacuous` is set when the bound does not apply.
enum IplStatus ipl_membership_bound_q(double c, double p, double *out_q, bool *out_vacuous);

enum IplStatus ipl_condition1_bound(const uint32_t *degrees,
                                    size_t len,
                                    size_t k,
                                    double c,
                                    double beta,
                                    double *out_bound);

struct IplTrainConfig ipl_train_config_default(void);

// Trains on the split's training part. Deterministic for a given seed.
enum IplStatus ipl_model_train(const struct IplSplit *split,
                               const struct IplTrainConfig *config,
                               struct IplModel **out_model);

// Loads a JSON or binary (`.bin`) checkpoint. LightGCN checkpoints need
// [`ipl_model_attach_graph`] before scoring.
enum IplStatus ipl_model_load(const char *file, struct IplModel **out_model);

enum IplStatus ipl_model_save(const struct IplModel *model, const char *file);

enum IplStatus ipl_model_attach_graph(struct IplModel *model, const struct IplLog *train_log);

void ipl_model_free(struct IplModel *model);

size_t ipl_model_n_users(const struct IplModel *model);

size_t ipl_model_n_items(const struct IplModel *model);

size_t ipl_model_dim(const struct IplModel *model);

bool ipl_model_is_lightgcn(const struct IplModel *model);

enum IplStatus ipl_model_score(const struct IplModel *model,
                               uint32_t user,
                               uint32_t item,
                               double *out_score);

// Top-`k` items for one user, optionally excluding the positives in `exclude`
// (may be NULL). Both output buffers need room for `k` entries; `*out_len`
// receives the number written, which is smaller than `k` only for tiny catalogs.
enum IplStatus ipl_model_top_k(const struct IplModel *model,
                               uint32_t user,
                               size_t k,
                               const struct IplLog *exclude,
                               uint32_t *out_items,
                               double *out_scores,
                               size_t *out_len);

// Accuracy and bias metrics of `model` on the split's test part.
enum IplStatus ipl_evaluate(const struct IplModel *model,
                            const struct IplSplit *split,
                            size_t k,
                            double gamma,
                            size_t mi_bins,
                            struct IplMetrics *out_metrics);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IPL_H */

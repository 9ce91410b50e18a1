#include <math.h>
#include <stdio.h>
#include "ipl.h"

#define CHECK(expr)                                                         \
    do {                                                                    \
        IplStatus s_ = (expr);                                              \
        if (s_ != IPL_STATUS_OK) {                                          \
            fprintf(stderr, "%s -> %d: %s\n", #expr, s_, ipl_last_error()); \
            return 1;                                                       \
        }                                                                   \
    } while (0)

int main(void) {
    uint32_t users[] = {0, 0, 1, 1, 2, 2, 3, 3, 0, 2};
    uint32_t items[] = {0, 1, 0, 1, 2, 3, 2, 3, 2, 0};
    IplLog *log = NULL;
    CHECK(ipl_log_from_pairs(4, 4, users, items, 10, &log));
    if (ipl_log_n_interactions(log) != 10) return 2;

    uint32_t q[4];
    CHECK(ipl_log_item_popularity(log, q, 4));
    double c[4] = {2, 4, 6, 8}, r[4];
    CHECK(ipl_interaction_rate(c, q, 4, 2.0, r));
    for (int i = 0; i < 4; i++)
        if (r[i] != c[i]) return 3;

    IplSplit *split = NULL;
    CHECK(ipl_split(log, 0.5, 0.25, 0.25, 1, &split));
    IplTrainConfig cfg = ipl_train_config_default();
    cfg.dim = 4;
    cfg.epochs = 3;
    cfg.batch_size = 4;
    IplModel *model = NULL;
    CHECK(ipl_model_train(split, &cfg, &model));
    uint32_t top[2];
    double scores[2];
    size_t n = 0;
    CHECK(ipl_model_top_k(model, 0, 2, NULL, top, scores, &n));
    if (n != 2 || scores[0] < scores[1]) return 4;

    if (ipl_split(log, 0.5, 0.5, 0.5, 1, &split) != IPL_STATUS_INVALID_ARGUMENT) return 5;
    if (ipl_last_error() == NULL) return 6;

    double q_bound;
    bool vacuous;
    CHECK(ipl_membership_bound_q(0.9, 0.0025, &q_bound, &vacuous));
    if (vacuous || fabs(q_bound - 0.7585729573112043) > 1e-12) return 7;

    ipl_model_free(model);
    ipl_split_free(split);
    ipl_log_free(log);
    printf("ok %s\n", ipl_version());
    return 0;
}

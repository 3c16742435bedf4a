#include <math.h>
#include <stdio.h>
#include <string.h>
#include "domain_balancing.h"

static const char *CONFIG =
    "{\"synth\":{\"head_classes\":8,\"input_dim\":6,\"samples_per_class\":4,\"eval_samples_per_class\":3},"
    "\"model\":{\"hidden_dims\":[8],\"feature_dim\":6,\"dfi\":{\"k_neighbors\":3}},"
    "\"optim\":{\"epochs\":2,\"batch_size\":8},\"seed\":5}";

int main(void) {
    DbDataset *ds = NULL;
    DbModel *model = NULL;
    if (db_dataset_generate(CONFIG, &ds) != DB_STATUS_OK) return 1;
    size_t n = 0, classes = 0, dim = 0;
    db_dataset_shape(ds, &n, &classes, &dim);
    if (classes != 14 || dim != 6) return 2;
    if (db_model_init(CONFIG, &model) != DB_STATUS_OK) return 3;
    if (db_model_fit(model, ds) != DB_STATUS_OK) return 4;
    if (db_model_epoch(model) != 2) return 5;

    double x[12] = {1, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0};
    double e[12];
    if (db_model_embed(model, x, 2, 6, e, 12) != DB_STATUS_OK) return 6;
    double norm = 0;
    for (int i = 0; i < 6; i++) norm += e[i] * e[i];
    if (fabs(norm - 1.0) > 1e-12) return 7;

    double sims[4] = {0.9, 0.8, 0.1, 0.2};
    unsigned char same[4] = {1, 1, 0, 0};
    double acc = 0, thr = 0;
    if (db_verification_accuracy(sims, same, 4, &acc, &thr) != DB_STATUS_OK || acc != 1.0) return 8;

    if (db_dataset_load("/nonexistent/file.dbds", &ds) != DB_STATUS_IO) return 9;
    if (db_last_error_message() == NULL) return 10;

    db_model_free(model);
    db_dataset_free(ds);
    printf("ok %s\n", db_version());
    return 0;
}

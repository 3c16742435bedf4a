#ifndef DOMAIN_BALANCING_H
#define DOMAIN_BALANCING_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DbStatus {
  DB_STATUS_OK = 0,
  DB_STATUS_NULL_POINTER = 1,
  DB_STATUS_INVALID_ARGUMENT = 2,
  DB_STATUS_INVALID_CONFIG = 3,
  DB_STATUS_IO = 4,
  DB_STATUS_FORMAT = 5,
  DB_STATUS_DIM_MISMATCH = 6,
  DB_STATUS_NUMERICAL = 7,
  DB_STATUS_PANIC = 8,
} DbStatus;

typedef enum DbLossKind {
  DB_LOSS_KIND_SOFTMAX = 0,
  DB_LOSS_KIND_COSFACE = 1,
  DB_LOSS_KIND_DBM = 2,
} DbLossKind;

// Opaque synthetic dataset.
typedef struct DbDataset DbDataset;

// Opaque model: training state plus the optimizer settings used by
// [`db_model_fit`].
typedef struct DbModel DbModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or null. The pointer stays
// valid until the next failing call on the same thread.
const char *db_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *db_version(void);

// Releases a string returned by this library (e.g. [`db_model_config_json`]).
//
// # Safety
// `s` must come from this library and must not be used afterwards.
void db_string_free(char *s);

// Generates the dataset described by an experiment configuration (JSON).
//
// # Safety
// `config_json` must be a NUL-terminated string and `out` a valid pointer.
enum DbStatus db_dataset_generate(const char *config_json, struct DbDataset **out);

// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum DbStatus db_dataset_load(const char *path, struct DbDataset **out);

// # Safety
// `ds` must be a live handle and `path` a NUL-terminated string.
enum DbStatus db_dataset_save(const struct DbDataset *ds, const char *path);

// Writes the sample count, class count and input dimension; any output
// pointer may be null.
//
// # Safety
// `ds` must be a live handle; non-null outputs must be writable.
enum DbStatus db_dataset_shape(const struct DbDataset *ds,
                               size_t *samples,
                               size_t *classes,
                               size_t *dim);

// # Safety
// `ds` must be null or a handle not yet freed.
void db_dataset_free(struct DbDataset *ds);

// Initializes a model for an experiment configuration (JSON).
//
// # Safety
// `config_json` must be a NUL-terminated string and `out` a valid pointer.
enum DbStatus db_model_init(const char *config_json, struct DbModel **out);

// Loads a checkpoint. Optimizer settings come from the configuration
// stored in the checkpoint, or defaults when it carries none.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum DbStatus db_model_load(const char *path, struct DbModel **out);

// # Safety
// `model` must be a live handle and `path` a NUL-terminated string.
enum DbStatus db_model_save(const struct DbModel *model, const char *path);

// Trains on the dataset's training split for the remaining epochs.
//
// # Safety
// `model` and `ds` must be live handles.
enum DbStatus db_model_fit(struct DbModel *model, const struct DbDataset *ds);

// # Safety
// `model` must be a live handle.
size_t db_model_feature_dim(const struct DbModel *model);

// Completed training epochs.
//
// # Safety
// `model` must be a live handle.
uint64_t db_model_epoch(const struct DbModel *model);

// Embeds `rows × cols` inputs in eval mode into `out` (`rows × feature_dim`).
//
// # Safety
// `inputs` must hold `rows * cols` values and `out` `out_len` writable values.
enum DbStatus db_model_embed(const struct DbModel *model,
                             const double *inputs,
                             size_t rows,
                             size_t cols,
                             double *out,
                             size_t out_len);

// Resolved configuration stored with the model, as a JSON string to be
// released with [`db_string_free`].
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum DbStatus db_model_config_json(const struct DbModel *model, char **out);

// # Safety
// `model` must be null or a handle not yet freed.
void db_model_free(struct DbModel *model);

// Compactness and frequency value per class for unit-norm prototypes
// (`classes × dim`). Either output may be null.
//
// # Safety
// `prototypes` must hold `classes * dim` values; non-null outputs must hold
// `classes` writable values.
enum DbStatus db_dfi_compute(const double *prototypes,
                             size_t classes,
                             size_t dim,
                             size_t k_neighbors,
                             double epsilon,
                             double scale_s,
                             double *ic_out,
                             double *beta_out);

// Batch-mean classification loss on raw (unnormalized) features. `beta`
// (`classes` values) is read only for [`DbLossKind::Dbm`]. Gradient
// outputs may be null.
//
// # Safety
// Every non-null pointer must reference the documented number of values.
enum DbStatus db_loss_forward(enum DbLossKind kind,
                              const double *features,
                              size_t batch,
                              size_t dim,
                              const uint32_t *labels,
                              const double *prototypes,
                              size_t classes,
                              const double *beta,
                              double scale_s,
                              double margin_m,
                              double *value_out,
                              double *grad_features_out,
                              double *grad_prototypes_out);

// Best-threshold verification accuracy; `same[i]` is non-zero for
// same-identity pairs.
//
// # Safety
// `sims` and `same` must hold `n` values; outputs must be writable.
enum DbStatus db_verification_accuracy(const double *sims,
                                       const uint8_t *same,
                                       size_t n,
                                       double *accuracy_out,
                                       double *threshold_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DOMAIN_BALANCING_H */

#ifndef LLS_H
#define LLS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>
#include <stdbool.h>

/*
 Result of every fallible call. Values 3..=5 match the `lls` exit codes.
 */
typedef enum LlsStatus {
  LLS_STATUS_OK = 0,
  /*
   Null pointer, bad UTF-8, or a buffer that is too small.
   */
  LLS_STATUS_INVALID_ARGUMENT = 2,
  LLS_STATUS_DATA = 3,
  LLS_STATUS_NOT_APPLICABLE = 4,
  LLS_STATUS_NUMERICAL = 5,
  /*
   A Rust panic was caught at the boundary.
   */
  LLS_STATUS_INTERNAL = 6,
} LlsStatus;

typedef struct LlsBasis LlsBasis;

typedef struct LlsDataset LlsDataset;

typedef struct LlsModel LlsModel;

typedef struct LlsMomentMatrix LlsMomentMatrix;

typedef struct LlsMomentTable LlsMomentTable;

typedef struct LlsSchema LlsSchema;

/*
 Plane estimation settings. `k_override == 0` lets the spectrum choose K.
 */
typedef struct LlsPlaneConfig {
  double rank_threshold_factor;
  double eig_threshold_factor;
  size_t k_override;
  bool weight_columns;
} LlsPlaneConfig;

/*
 Headline numbers from a plane fit.
 */
typedef struct LlsPlaneSummary {
  size_t k0;
  size_t k;
  size_t points;
  double residual;
  double rank_threshold;
} LlsPlaneSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Release a handle; null is ignored.

 # Safety
 `p` is null or a live handle, freed at most once.
 */
void lls_schema_free(struct LlsSchema *p);

/*
 Release a handle; null is ignored.

 # Safety
 `p` is null or a live handle, freed at most once.
 */
void lls_dataset_free(struct LlsDataset *p);

/*
 Release a handle; null is ignored.

 # Safety
 `p` is null or a live handle, freed at most once.
 */
void lls_moment_matrix_free(struct LlsMomentMatrix *p);

/*
 Release a handle; null is ignored.

 # Safety
 `p` is null or a live handle, freed at most once.
 */
void lls_basis_free(struct LlsBasis *p);

/*
 Release a handle; null is ignored.

 # Safety
 `p` is null or a live handle, freed at most once.
 */
void lls_model_free(struct LlsModel *p);

/*
 Release a handle; null is ignored.

 # Safety
 `p` is null or a live handle, freed at most once.
 */
void lls_moment_table_free(struct LlsMomentTable *p);

/*
 Message of the last failed call on this thread, or null. Valid until the next call.
 */
const char *lls_last_error_message(void);

/*
 Library version, static string.
 */
const char *lls_version(void);

/*
 # Safety
 `levels` points to `count` values; `out` is writable.
 */
enum LlsStatus lls_schema_new(const size_t *levels, size_t count, struct LlsSchema **out);

/*
 # Safety
 `path` is a nul-terminated string; `out` is writable.
 */
enum LlsStatus lls_schema_load(const char *path, struct LlsSchema **out);

/*
 Number of variables J; 0 for null.

 # Safety
 `s` is null or a live handle.
 */
size_t lls_schema_num_vars(const struct LlsSchema *s);

/*
 Total number of cells, the length of a basis vector; 0 for null.

 # Safety
 `s` is null or a live handle.
 */
size_t lls_schema_total_cells(const struct LlsSchema *s);

/*
 # Safety
 `path` is a nul-terminated string; `schema` a live handle; `out` writable.
 */
enum LlsStatus lls_dataset_load(const char *path,
                                const struct LlsSchema *schema,
                                struct LlsDataset **out);

/*
 Build a dataset from `rows × J` row-major 1-based levels.

 # Safety
 `cells` points to `rows * J` values; `schema` is live; `out` writable.
 */
enum LlsStatus lls_dataset_from_rows(const struct LlsSchema *schema,
                                     const uint32_t *cells,
                                     size_t rows,
                                     struct LlsDataset **out);

/*
 Sample size; 0 for null.

 # Safety
 `d` is null or a live handle.
 */
size_t lls_dataset_n(const struct LlsDataset *d);

/*
 # Safety
 `data` is live; `out` writable.
 */
enum LlsStatus lls_moment_matrix_from_dataset(const struct LlsDataset *data,
                                              size_t max_col_order,
                                              struct LlsMomentMatrix **out);

/*
 Moment matrix from the exact moments of a model.

 # Safety
 `model` is live; `out` writable.
 */
enum LlsStatus lls_moment_matrix_from_model(const struct LlsModel *model,
                                            size_t max_col_order,
                                            struct LlsMomentMatrix **out);

/*
 Writes the row and column counts.

 # Safety
 `m` is live; `rows` and `cols` writable.
 */
enum LlsStatus lls_moment_matrix_shape(const struct LlsMomentMatrix *m, size_t *rows, size_t *cols);

/*
 Write the matrix CSV (`"j:l"` row labels, `?` for unobserved cells).

 # Safety
 `m` is live; `path` nul-terminated.
 */
enum LlsStatus lls_moment_matrix_save_csv(const struct LlsMomentMatrix *m, const char *path);

/*
 Default settings.
 */
struct LlsPlaneConfig lls_plane_config_default(void);

/*
 Estimate the basis of the plane. `config` and `summary` may be null.

 # Safety
 `m` is live; `config` null or readable; `out` writable; `summary` null or writable.
 */
enum LlsStatus lls_estimate_plane(const struct LlsMomentMatrix *m,
                                  const struct LlsPlaneConfig *config,
                                  struct LlsBasis **out,
                                  struct LlsPlaneSummary *summary);

/*
 Dimension K; 0 for null.

 # Safety
 `b` is null or a live handle.
 */
size_t lls_basis_k(const struct LlsBasis *b);

/*
 Copy the K basis vectors, each of length total cells, row-major into `out`.
 `written` receives the required length even when the buffer is too small.

 # Safety
 `b` is live; `out` holds `capacity` doubles; `written` null or writable.
 */
enum LlsStatus lls_basis_copy_vectors(const struct LlsBasis *b,
                                      double *out,
                                      size_t capacity,
                                      size_t *written);

/*
 # Safety
 `path` nul-terminated; `out` writable.
 */
enum LlsStatus lls_basis_load(const char *path, struct LlsBasis **out);

/*
 # Safety
 `b` is live; `path` nul-terminated.
 */
enum LlsStatus lls_basis_save(const struct LlsBasis *b, const char *path);

/*
 Principal angles between two bases of the same schema, ascending.

 # Safety
 `a`, `b` live; `out` holds `capacity` doubles; `written` null or writable.
 */
enum LlsStatus lls_principal_angles(const struct LlsBasis *a,
                                    const struct LlsBasis *b,
                                    double *out,
                                    size_t capacity,
                                    size_t *written);

/*
 Draw a synthetic model with `support` points on a K-dimensional plane.

 # Safety
 `schema` is live; `out` writable.
 */
enum LlsStatus lls_model_generate(const struct LlsSchema *schema,
                                  size_t k,
                                  size_t support,
                                  uint64_t seed,
                                  struct LlsModel **out);

/*
 # Safety
 `path` nul-terminated; `out` writable.
 */
enum LlsStatus lls_model_load(const char *path, struct LlsModel **out);

/*
 # Safety
 `m` is live; `path` nul-terminated.
 */
enum LlsStatus lls_model_save(const struct LlsModel *m, const char *path);

/*
 Copy of the model's true basis.

 # Safety
 `m` is live; `out` writable.
 */
enum LlsStatus lls_model_basis(const struct LlsModel *m, struct LlsBasis **out);

/*
 # Safety
 `m` is live; `out` writable.
 */
enum LlsStatus lls_model_sample(const struct LlsModel *m,
                                size_t n,
                                uint64_t seed,
                                struct LlsDataset **out);

/*
 Solve for conditional moments up to order `moment_order` at `n_targets` patterns
 (`n_targets × J` row-major, 0 = free). Frequencies come from `data` or, when it is
 null, from the exact moments of `model`; exactly one must be given.

 # Safety
 `basis` live; `data`/`model` null or live; `targets` holds `n_targets * J` values.
 */
enum LlsStatus lls_conditional_moments(const struct LlsBasis *basis,
                                       const struct LlsDataset *data,
                                       const struct LlsModel *model,
                                       const uint32_t *targets,
                                       size_t n_targets,
                                       size_t moment_order,
                                       double anchor_weight,
                                       struct LlsMomentTable **out);

/*
 `E(G^v | X = pattern)`; `pattern` has J entries, `powers` has K.

 # Safety
 `t` live; `pattern` and `powers` readable; `value` writable.
 */
enum LlsStatus lls_moment_table_conditional(const struct LlsMomentTable *t,
                                            const uint32_t *pattern,
                                            const uint32_t *powers,
                                            double *value);

/*
 Number of rows; 0 for null.

 # Safety
 `t` is null or a live handle.
 */
size_t lls_moment_table_len(const struct LlsMomentTable *t);

/*
 Least-squares residual norm of the solve; NaN for null.

 # Safety
 `t` is null or a live handle.
 */
double lls_moment_table_residual_norm(const struct LlsMomentTable *t);

/*
 # Safety
 `t` live; `path` nul-terminated.
 */
enum LlsStatus lls_moment_table_save_csv(const struct LlsMomentTable *t, const char *path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LLS_H */

/* resflow: residual flows for low-dimensional density estimation.
 *
 * Plain C interface over the C++ library. All objects are opaque handles
 * created and destroyed through this API. Every fallible call returns an
 * rf_status; on failure rf_last_error() describes the problem (the message is
 * per thread and valid until the next failing call on that thread).
 *
 * Points are passed as row-major n x dim arrays of doubles.
 */
#ifndef RESFLOW_RESFLOW_H
#define RESFLOW_RESFLOW_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#  if defined(RESFLOW_BUILDING)
#    define RF_API __declspec(dllexport)
#  else
#    define RF_API __declspec(dllimport)
#  endif
#else
#  define RF_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum rf_status {
    RF_OK = 0,
    RF_ERR_USAGE = 1,
    RF_ERR_CONFIG = 2,
    RF_ERR_IO = 3,
    RF_ERR_STRUCTURAL = 4,        /* shape or dimension mismatch */
    RF_ERR_REFUSAL = 5,           /* request outside a guarded range */
    RF_ERR_CONTRACTIVITY = 6,     /* log-det series failed to converge */
    RF_ERR_INCONSISTENCY = 7,     /* internal invariant violated */
    RF_ERR_NON_CONVERGENCE = 8,   /* fixed-point inversion did not converge */
    RF_ERR_UNINITIALIZED = 9,     /* actnorm used before initialization */
    RF_ERR_NUMERIC = 10,          /* non-finite loss or gradient */
    RF_ERR_INTERNAL = 11
} rf_status;

typedef enum rf_logdet_mode {
    RF_EXACT = 0,     /* dense Jacobian determinant (small dim only) */
    RF_ESTIMATOR = 1  /* unbiased series estimator */
} rf_logdet_mode;

typedef struct rf_config rf_config;
typedef struct rf_model rf_model;

RF_API const char* rf_version(void);
RF_API const char* rf_last_error(void);
RF_API const char* rf_status_name(rf_status status);

/* ---- configuration ---------------------------------------------------- */

RF_API rf_status rf_config_create(rf_config** out);
RF_API void rf_config_destroy(rf_config* cfg);
/* Reads `key = value` lines; '#' starts a comment. */
RF_API rf_status rf_config_load_file(rf_config* cfg, const char* path);
/* Keys accept dashes for underscores and the aliases estimator, n_fixed,
 * n_exact, q, hutchinson, coeff, norm_preset. */
RF_API rf_status rf_config_set(rf_config* cfg, const char* key, const char* value);
/* Copies the value (NUL-terminated) into buf when it fits; *needed receives
 * the full length including the terminator. */
RF_API rf_status rf_config_get(const rf_config* cfg, const char* key, char* buf, size_t buf_len, size_t* needed);

/* ---- models ------------------------------------------------------------ */

/* Model with no layers: the standard normal in `dim` dimensions. */
RF_API rf_status rf_model_create_empty(int dim, rf_model** out);
RF_API rf_status rf_model_load(const char* path, rf_model** out);
RF_API rf_status rf_model_save(const rf_model* model, const char* path);
RF_API void rf_model_destroy(rf_model* model);
RF_API int rf_model_dim(const rf_model* model);
RF_API size_t rf_model_num_blocks(const rf_model* model);
RF_API long long rf_model_step(const rf_model* model);

/* log p(x) in nats under the evaluation (Polyak-averaged) parameters. */
RF_API rf_status rf_model_log_density(const rf_model* model, const double* x, size_t n, rf_logdet_mode mode,
                                      uint64_t seed, int threads, double* out_logp);

/* ---- commands ---------------------------------------------------------- */

/* Called once per training step with the metrics record (one JSON object). */
typedef void (*rf_step_callback)(const char* metrics_json, void* user);

/* Trains per cfg. Writes metrics.jsonl and checkpoints into out_dir when it
 * is non-empty. *out_model (optional) receives the final model. */
RF_API rf_status rf_train(const rf_config* cfg, const char* out_dir, rf_step_callback callback, void* user,
                          rf_model** out_model);

typedef struct rf_eval_result {
    double nll_nats;
    double nll_bits;
    double se_nats;
    double mean_terms; /* series terms per block estimate (estimator mode) */
    int n_eval;
} rf_eval_result;

/* Mean NLL on cfg's n_eval fresh samples of the dataset the model was
 * trained on (cfg's dataset if set explicitly). Writes the JSON record to
 * json_path when non-NULL. */
RF_API rf_status rf_eval(const rf_model* model, const rf_config* cfg, rf_logdet_mode mode, const char* json_path,
                         rf_eval_result* out);

/* Draws n samples into out (n x dim, may be NULL) and/or a CSV file.
 * With check_inverse, *max_inverse_error receives max ||f(x) - z||. */
RF_API rf_status rf_sample(const rf_model* model, size_t n, uint64_t seed, int check_inverse, double* out,
                           const char* csv_path, double* max_inverse_error);

typedef struct rf_grid_spec {
    double x_min, x_max, y_min, y_max;
    int nx, ny;
    rf_logdet_mode mode;
    uint64_t seed;
    int threads;
} rf_grid_spec;

/* Log-density at cell midpoints; writes CSV and/or PGM when paths are
 * non-NULL. *integral (optional) receives the midpoint-rule integral of the
 * density over the grid. */
RF_API rf_status rf_grid(const rf_model* model, const rf_grid_spec* spec, const char* csv_path, const char* pgm_path,
                         double* integral);

/* Estimator bias sweep over Lipschitz coefficients {0.5, 0.7, 0.9, 0.98}.
 * The block comes from model (block index cfg diagnose.block) or, when
 * model is NULL, from the built-in aligned diagnostic block. */
RF_API rf_status rf_diagnose(const rf_model* model, const rf_config* cfg, const char* csv_path);

#ifdef __cplusplus
}
#endif

#endif /* RESFLOW_RESFLOW_H */

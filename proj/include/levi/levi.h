/* C interface to the levi core. Every entry point returns one of the
 * LEVI_* status codes; on failure levi_last_error() carries a message for
 * the calling thread. Strings returned through char** are heap-allocated
 * and released with levi_string_free(). Reports are opaque handles released
 * with levi_report_free().
 */
#ifndef LEVI_LEVI_H
#define LEVI_LEVI_H

#ifdef __cplusplus
extern "C" {
#endif

#define LEVI_OK 0
#define LEVI_ERR_RUN 1
#define LEVI_ERR_CONFIG 2

typedef struct levi_report levi_report;

const char* levi_version(void);

/* message describing the calling thread's most recent failure ("" if none) */
const char* levi_last_error(void);

void levi_string_free(char* s);

/* Prints the closed-form linear fixture table into *out_text and verifies
 * it. LEVI_OK only when every value is exact within 1e-12. */
int levi_fixture(char** out_text);

/* Randomized per-op gradient audit (autodiff vs central finite differences).
 * instances_per_op <= 0 selects the default of 20. */
int levi_gradcheck(double tolerance, int instances_per_op, char** out_text);

/* Runs the experiment described by a config file. out_dir may be NULL to
 * honor LEVI_OUT_DIR / the config's output.dir; jobs <= 1 runs members
 * sequentially. On success *out receives a report handle. */
int levi_run(const char* config_path, const char* out_dir, int jobs, levi_report** out);

/* Single-tap sweep over every backbone block of the configured composition. */
int levi_layer_sweep(const char* config_path, const char* out_dir, int jobs, levi_report** out);

/* Re-aggregates the record csv files already present in a directory. */
int levi_reaggregate(const char* dir, levi_report** out);

/* report accessors; paths stay owned by the handle */
const char* levi_report_csv_path(const levi_report* report);
const char* levi_report_summary_path(const levi_report* report);
int levi_report_text(const levi_report* report, char** out_text);
void levi_report_free(levi_report* report);

#ifdef __cplusplus
}
#endif

#endif /* LEVI_LEVI_H */

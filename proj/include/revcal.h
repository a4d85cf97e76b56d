#ifndef REVCAL_H
#define REVCAL_H

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

/* Status codes double as CLI exit codes. */
typedef enum {
  REVCAL_OK = 0,
  REVCAL_ERR_CONFIG = 1,
  REVCAL_ERR_IO = 2,
  REVCAL_ERR_NUMERIC = 3
} revcal_status;

typedef struct revcal_model revcal_model;
typedef struct revcal_dataset revcal_dataset;

const char* revcal_version(void);

/* Message of the last failed call on this thread ("" if none). */
const char* revcal_last_error(void);

/* Strings returned through out-parameters are owned by the caller. */
void revcal_free_string(char* s);

/* Space-separated subcommand names. */
const char* revcal_subcommands(void);

/* Runs a subcommand. config_text is a JSON config or an earlier manifest;
   overrides_json (may be NULL) is a JSON object applied on top of it.
   On success *manifest_json receives the manifest. */
revcal_status revcal_run(const char* subcommand, const char* config_text, const char* overrides_json,
                         char** manifest_json);

revcal_status revcal_model_load(const char* path, revcal_model** out);
revcal_status revcal_model_save(const revcal_model* model, const char* path);
void revcal_model_free(revcal_model* model);
revcal_status revcal_model_info(const revcal_model* model, char** info_json);
revcal_status revcal_model_param_count(const revcal_model* model, size_t* out);
revcal_status revcal_model_hash(const revcal_model* model, char** hex);

/* Loads a dataset cache file, or IDX image/label files when labels_path is non-NULL. */
revcal_status revcal_dataset_load(const char* path, const char* labels_path, revcal_dataset** out);
/* Procedural 28x28 digits. */
revcal_status revcal_dataset_digits(size_t n, unsigned long long seed, revcal_dataset** out);
revcal_status revcal_dataset_save(const revcal_dataset* data, const char* path);
void revcal_dataset_free(revcal_dataset* data);
revcal_status revcal_dataset_size(const revcal_dataset* data, size_t* out);
revcal_status revcal_dataset_hash(const revcal_dataset* data, char** hex);

/* Accuracy of `main` on `data` under a named scenario (identity, A, B1, B2).
   calibrater may be NULL; merge_mode is "multiplicative" or "additive". */
revcal_status revcal_evaluate(const revcal_model* main, const revcal_dataset* data, const char* scenario,
                              unsigned long long seed, const revcal_model* calibrater, const char* merge_mode,
                              size_t threads, double* accuracy);

#ifdef __cplusplus
}
#endif

#endif

/*
 * C interface to the context-aware proposal network toolkit.
 *
 * All objects are opaque handles created and destroyed through this API.
 * Every fallible call returns a cpn_status; on failure, cpn_last_error()
 * returns a one-line description that stays valid until the next failing
 * call on the same thread. Strings returned through char** out-parameters
 * are owned by the caller and must be released with cpn_string_free().
 */
#ifndef CPN_CPN_H
#define CPN_CPN_H

#include <stddef.h>
#include <stdint.h>

#if defined(CPN_BUILDING_LIBRARY)
#define CPN_API __attribute__((visibility("default")))
#else
#define CPN_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum cpn_status {
  CPN_OK = 0,
  CPN_ERR_INVALID_ARGUMENT = 1,
  CPN_ERR_IO = 2,
  CPN_ERR_FORMAT = 3,
  CPN_ERR_VALIDATION = 4,
  CPN_ERR_DIVERGED = 5,
  CPN_ERR_INTERNAL = 6
} cpn_status;

typedef struct cpn_config cpn_config;
typedef struct cpn_model cpn_model;
typedef struct cpn_features cpn_features;

CPN_API const char* cpn_version(void);
/* Stable machine-readable name, e.g. "io" or "validation". */
CPN_API const char* cpn_status_name(cpn_status status);
CPN_API const char* cpn_last_error(void);
CPN_API void cpn_string_free(char* s);

/* Log level: trace, debug, info, warn, error, off. The library starts at the
 * level named by the CPN_LOG environment variable (default info). */
CPN_API cpn_status cpn_set_log_level(const char* level);

/* ---- run configuration ------------------------------------------------- */

/* json_text may be NULL for the defaults. Unknown keys are rejected. */
CPN_API cpn_status cpn_config_create(const char* json_text, cpn_config** out);
CPN_API cpn_status cpn_config_load(const char* path, cpn_config** out);
/* Overrides one dotted key ("mask.p", "paths.output_dir") with a JSON value;
 * bare words are taken as strings. */
CPN_API cpn_status cpn_config_set(cpn_config* cfg, const char* dotted_key, const char* value);
/* Applies n overrides in order and validates once at the end, so keys that
 * constrain each other (grid.T, grid.D) can change together. All or nothing. */
CPN_API cpn_status cpn_config_set_many(cpn_config* cfg, const char* const* dotted_keys,
                                       const char* const* values, size_t n);
CPN_API cpn_status cpn_config_to_json(const cpn_config* cfg, char** out_json);
CPN_API void cpn_config_free(cpn_config* cfg);

/* ---- pipeline commands ------------------------------------------------- */
/* Each command writes into paths.output_dir. summary/report outputs may be
 * NULL when the caller does not want them. */

CPN_API cpn_status cpn_run_synth(const cpn_config* cfg, char** summary_json);
CPN_API cpn_status cpn_run_preprocess(const cpn_config* cfg, char** summary_json);
CPN_API cpn_status cpn_run_train(const cpn_config* cfg, char** log_json);
CPN_API cpn_status cpn_run_infer(const cpn_config* cfg, char** summary_json);
CPN_API cpn_status cpn_run_eval_proposals(const cpn_config* cfg, char** report_json,
                                          char** table_text);
CPN_API cpn_status cpn_run_eval_detections(const cpn_config* cfg, char** report_json,
                                           char** table_text);
CPN_API cpn_status cpn_run_ensemble(const cpn_config* cfg, char** summary_json);

/* ---- feature sequences (CPNF files) ------------------------------------ */

/* data is T*C float32 values, time-major. */
CPN_API cpn_status cpn_features_create(size_t length, size_t channels, const float* data,
                                       cpn_features** out);
CPN_API cpn_status cpn_features_load(const char* path, cpn_features** out);
CPN_API cpn_status cpn_features_save(const cpn_features* f, const char* path);
CPN_API size_t cpn_features_length(const cpn_features* f);
CPN_API size_t cpn_features_channels(const cpn_features* f);
CPN_API const float* cpn_features_data(const cpn_features* f);
CPN_API void cpn_features_free(cpn_features* f);

/* ---- trained models (CPNM files) --------------------------------------- */

CPN_API cpn_status cpn_model_load(const char* path, cpn_model** out);
CPN_API size_t cpn_model_length(const cpn_model* m);       /* T */
CPN_API size_t cpn_model_max_duration(const cpn_model* m); /* D */
CPN_API size_t cpn_model_in_channels(const cpn_model* m);
/* Inference on features of any length (rescaled to T internally). Buffers:
 * p_start, p_end hold T values; p_cls, p_reg hold D*T values, row-major by
 * duration. Any buffer may be NULL. */
CPN_API cpn_status cpn_model_infer(const cpn_model* m, const cpn_features* f, double* p_start,
                                   double* p_end, double* p_cls, double* p_reg);
CPN_API void cpn_model_free(cpn_model* m);

/* ---- post-processing and metric primitives ----------------------------- */

CPN_API cpn_status cpn_segment_iou(double a_start, double a_end, double b_start, double b_end,
                                   double* out);
/* Gaussian soft-NMS on n segments. Output arrays need room for min(n, max_out)
 * entries; *out_n receives the number written, sorted by descending score. */
CPN_API cpn_status cpn_soft_nms(const double* starts, const double* ends, const double* scores,
                                size_t n, double sigma, double score_floor, size_t max_out,
                                double* out_starts, double* out_ends, double* out_scores,
                                size_t* out_n);

#ifdef __cplusplus
}
#endif

#endif /* CPN_CPN_H */

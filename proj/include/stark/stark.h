/* C interface to the sparse-teacher distillation library.
 *
 * Every function returns a stark_status. On failure the message of the most
 * recent error on the calling thread is available from stark_last_error().
 * Strings handed out through char** parameters are owned by the caller and
 * must be released with stark_free_string(). Handles are released with their
 * matching *_free function; passing NULL to any *_free is a no-op.
 */
#ifndef STARK_STARK_H
#define STARK_STARK_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define STARK_API __declspec(dllexport)
#else
#define STARK_API __attribute__((visibility("default")))
#endif

typedef enum stark_status {
  STARK_OK = 0,
  STARK_ERR_STAGE = 1,     /* a training / pipeline stage failed */
  STARK_ERR_CONFIG = 2,    /* invalid configuration or override */
  STARK_ERR_INPUT = 3,     /* missing or unreadable input */
  STARK_ERR_CONTRACT = 4,  /* API misuse (null handle, mismatched models) */
  STARK_ERR_MASK = 5,      /* mask refers to units that do not exist */
  STARK_ERR_REWIND = 6,    /* init checkpoint does not match the config */
  STARK_ERR_IO = 7,        /* file could not be written or is corrupt */
  STARK_ERR_NUMERIC = 8,   /* NaN or infinity appeared */
  STARK_ERR_PARAMETER = 9, /* argument out of range */
  STARK_ERR_INTERNAL = 10
} stark_status;

typedef struct stark_config stark_config;
typedef struct stark_data stark_data;
typedef struct stark_model stark_model;
typedef struct stark_scores stark_scores;
typedef struct stark_mask stark_mask;

STARK_API const char* stark_version(void);
STARK_API const char* stark_last_error(void);
STARK_API const char* stark_status_name(stark_status s);
STARK_API void stark_free_string(char* s);

/* ---- configuration ---- */
STARK_API stark_status stark_config_default(stark_config** out);
STARK_API stark_status stark_config_load(const char* path, stark_config** out);
STARK_API stark_status stark_config_from_json(const char* json, stark_config** out);
/* Dotted key, e.g. "distill.tau" or "seed"; value is JSON text or a bare string. */
STARK_API stark_status stark_config_set(stark_config* cfg, const char* key, const char* value);
STARK_API stark_status stark_config_to_json(const stark_config* cfg, char** out_json);
STARK_API stark_status stark_config_digest(const stark_config* cfg, uint64_t* out);
/* Named sub-seeds handed out so far, as a JSON object. */
STARK_API stark_status stark_config_seed_ledger(const stark_config* cfg, char** out_json);
STARK_API void stark_config_free(stark_config* cfg);

/* ---- data ---- */
STARK_API stark_status stark_data_load(stark_config* cfg, stark_data** out);
STARK_API stark_status stark_data_info(const stark_data* data, char** out_json);
/* Writes train.tsv and dev.tsv (label, text_a, text_b) under dir. */
STARK_API stark_status stark_data_write_tsv(const stark_data* data, const char* dir);
STARK_API void stark_data_free(stark_data* data);

/* ---- models ---- */
STARK_API stark_status stark_finetune(stark_config* cfg, const stark_data* data, stark_model** out_teacher,
                                      char** out_report_jsonl);
STARK_API stark_status stark_model_save(const stark_model* model, const char* path);
STARK_API stark_status stark_model_load(const char* path, stark_model** out);
STARK_API stark_status stark_model_info(const stark_model* model, char** out_json);
/* Dev-split metric of the model under its own gates. */
STARK_API stark_status stark_model_evaluate(const stark_model* model, const stark_data* data, double* out);
/* Row-major [n x classes] logits of the dev split; *out must be freed with stark_free_doubles. */
STARK_API stark_status stark_model_dev_logits(const stark_model* model, const stark_data* data, double** out,
                                              size_t* rows, size_t* cols);
STARK_API void stark_free_doubles(double* p);
STARK_API void stark_model_free(stark_model* model);

/* ---- stages ---- */
/* Trial distillation. The student init is written to init_checkpoint_path
 * before any update. */
STARK_API stark_status stark_trial(stark_config* cfg, const stark_data* data, const stark_model* teacher,
                                   const char* init_checkpoint_path, stark_model** out_student,
                                   char** out_report_jsonl);
STARK_API stark_status stark_score(const stark_config* cfg, const stark_data* data, const stark_model* teacher,
                                   const stark_model* trial_student, stark_scores** out);
/* Per-parameter saliency instead of per-head / per-neuron gates. */
STARK_API stark_status stark_score_unstructured(const stark_config* cfg, const stark_data* data,
                                                const stark_model* teacher, const stark_model* trial_student,
                                                stark_scores** out);
STARK_API stark_status stark_scores_to_jsonl(const stark_scores* scores, char** out);
STARK_API stark_status stark_scores_from_jsonl(const char* text, double lambda, stark_scores** out);
/* Re-interpolates at another lambda. */
STARK_API stark_status stark_scores_with_lambda(const stark_scores* scores, double lambda, stark_scores** out);
/* kind: "head" or "neuron". */
STARK_API stark_status stark_scores_density_csv(const stark_scores* scores, const char* kind, size_t bins,
                                                size_t window, char** out_csv);
STARK_API stark_status stark_scores_auto_sparsity(const stark_config* cfg, const stark_scores* scores,
                                                  char** out_json);
STARK_API void stark_scores_free(stark_scores* scores);

STARK_API stark_status stark_mask_rank(const stark_scores* scores, double sparsity, stark_mask** out);
STARK_API stark_status stark_mask_random(const stark_model* model, double sparsity, uint64_t seed,
                                         stark_mask** out);
STARK_API stark_status stark_mask_to_json(const stark_mask* mask, char** out_json);
STARK_API stark_status stark_mask_from_json(const char* json, stark_mask** out);
/* Number of removed units of a kind ("head", "neuron", "parameter"). */
STARK_API stark_status stark_mask_count(const stark_mask* mask, const char* kind, size_t* out);
STARK_API void stark_mask_free(stark_mask* mask);

/* Actual distillation from the masked teacher, rewound to the checkpointed init. */
STARK_API stark_status stark_distill(stark_config* cfg, const stark_data* data, const stark_model* teacher,
                                     const stark_mask* mask, const char* init_checkpoint_path,
                                     stark_model** out_student, char** out_report_jsonl);

/* Full pipeline. mode: "grid", "auto" or "random". When out_dir is not NULL,
 * checkpoints, train reports, scores, masks and densities are written there.
 * out_report_json receives the PipelineReport; out_run_json (optional)
 * receives stage timings and artifact paths. */
STARK_API stark_status stark_run(stark_config* cfg, const stark_data* data, const stark_model* teacher,
                                 const char* mode, const char* out_dir, char** out_report_json,
                                 char** out_run_json);

/* Random unstructured sparsification of the teacher; JSON array of rows. */
STARK_API stark_status stark_pilot(stark_config* cfg, const stark_data* data, const stark_model* teacher,
                                   char** out_json);

/* Comparison table from pipeline report JSON documents. */
STARK_API stark_status stark_report_render(const char* const* report_jsons, size_t count, char** out_text);

#ifdef __cplusplus
}
#endif

#endif

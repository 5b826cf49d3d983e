#ifndef CODEUNLEARN_H
#define CODEUNLEARN_H

/* C interface to the codeunlearn library.
 *
 * Every fallible call returns a cu_status. On failure the message is
 * available from cu_last_error() on the same thread until the next call.
 * Handles are opaque; free them with the matching *_free function.
 * Strings returned through char** are heap-allocated; release them with
 * cu_string_free. */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define CU_API __declspec(dllexport)
#else
#define CU_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum cu_status {
  CU_OK = 0,
  CU_ERR_DIMENSION = 1,
  CU_ERR_INDEX = 2,
  CU_ERR_STATE = 3,
  CU_ERR_CAPACITY = 4,
  CU_ERR_CONFIG = 5,
  CU_ERR_NUMERIC = 6,
  CU_ERR_CONTRACT = 7,
  CU_ERR_LENGTH = 8,
  CU_ERR_TRAINING = 9,
  CU_ERR_FORMAT = 10,
  CU_ERR_IO = 11,
  CU_ERR_UNKNOWN_TOPIC = 12,
  CU_ERR_MISSING_BASELINE = 13,
  CU_ERR_INVALID_ARGUMENT = 14,
  CU_ERR_INTERNAL = 15
} cu_status;

CU_API const char* cu_version(void);
CU_API const char* cu_status_name(cu_status status);
CU_API const char* cu_last_error(void);
CU_API void cu_string_free(char* s);

/* ---- configuration ---- */

typedef struct cu_config cu_config;

CU_API cu_status cu_config_default(cu_config** out);
/* Parses a TOML file (NULL = built-in defaults), applies "dotted.key=value"
 * overrides, then the CODEUNLEARN_OUTPUT_DIR environment variable. */
CU_API cu_status cu_config_load(const char* path, const char* const* overrides, size_t n_overrides,
                                cu_config** out);
CU_API void cu_config_free(cu_config* cfg);
CU_API cu_status cu_config_set_output_dir(cu_config* cfg, const char* dir);
CU_API cu_status cu_config_set_threads(cu_config* cfg, size_t threads);
CU_API cu_status cu_config_output_dir(const cu_config* cfg, char** out);
CU_API cu_status cu_config_to_toml(const cu_config* cfg, char** out);
/* Copies up to `cap` S' values; *count receives the full list length. */
CU_API cu_status cu_config_sprimes(const cu_config* cfg, size_t* buf, size_t cap, size_t* count);

/* ---- commands ---- */

typedef struct cu_corpus_summary {
  size_t train, validation, test, vocab;
} cu_corpus_summary;

/* topic_candidates (optional): comma-separated mid-band topic tokens. */
CU_API cu_status cu_run_gen_corpus(const cu_config* cfg, cu_corpus_summary* out, char** topic_candidates);

typedef struct cu_epoch_record {
  size_t epoch;
  double l_mse, l1, l_ce, l_joint, val_acc;
} cu_epoch_record;

typedef void (*cu_epoch_callback)(const cu_epoch_record* record, void* user);

typedef struct cu_train_summary {
  size_t epochs_run;
  size_t best_epoch;
  double val_acc, test_acc, bypass_test_acc;
} cu_train_summary;

/* resume_from may be NULL. */
CU_API cu_status cu_run_train(const cu_config* cfg, const char* resume_from, cu_epoch_callback cb, void* user,
                              cu_train_summary* out);

/* NID values are NAN when undefined (codebook == zero-shot). */
typedef struct cu_unlearn_point {
  size_t sprime;
  size_t deleted_count;
  double deleted_fraction;
  double nid_topic_bleu, nid_rest_bleu;
  double nid_topic_accuracy, nid_rest_accuracy;
  double nid_topic_meteor, nid_rest_meteor;
} cu_unlearn_point;

/* points must hold n_sprimes entries; out_dir (optional) receives the result directory. */
CU_API cu_status cu_run_unlearn(const cu_config* cfg, const char* topic, const size_t* sprimes, size_t n_sprimes,
                                cu_unlearn_point* points, char** out_dir);

/* datasets may be NULL (test split); zero_shot/codebook may be NULL (run defaults). */
CU_API cu_status cu_run_eval(const cu_config* cfg, const char* checkpoint, const char* const* datasets,
                             size_t n_datasets, const char* zero_shot, const char* codebook, char** csv,
                             char** out_path);

CU_API cu_status cu_run_report(const cu_config* cfg, char** markdown, char** out_path);

/* ---- models ---- */

typedef struct cu_model cu_model;

typedef struct cu_model_info {
  size_t vocab_size, d_model, num_codes, code_dim, top_s, live_codes, parameter_count;
} cu_model_info;

CU_API cu_status cu_model_load(const char* path, cu_model** out);
CU_API cu_status cu_model_save(cu_model* model, const char* path);
CU_API void cu_model_free(cu_model* model);
CU_API cu_status cu_model_get_info(cu_model* model, cu_model_info* out);
/* Copies up to `cap` deleted code ids; *count receives the total. */
CU_API cu_status cu_model_deleted_codes(const cu_model* model, int* buf, size_t cap, size_t* count);
CU_API cu_status cu_model_delete_codes(cu_model* model, const int* ids, size_t n);
/* Greedy decode of one source id sequence (no eos); *out_len may exceed cap. */
CU_API cu_status cu_model_translate(const cu_model* model, const int* source, size_t n, int* out, size_t cap,
                                    size_t* out_len);

/* ---- metrics on token id sequences ---- */

CU_API cu_status cu_bleu(const int* const* hyps, const size_t* hyp_lens, const int* const* refs,
                         const size_t* ref_lens, size_t n, double* out);

#ifdef __cplusplus
}
#endif

#endif

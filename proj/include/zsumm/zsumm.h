/* SPDX-License-Identifier: Apache-2.0 */
/*
 * C interface to the zsumm summarization library.
 *
 * Every fallible call returns a zsumm_status; on failure the message is
 * available from zsumm_last_error() on the same thread until the next call.
 * Objects are opaque and released with their *_free function. Strings and
 * id arrays returned through out-parameters are owned by the caller and
 * released with zsumm_string_free / zsumm_ids_free.
 */
#ifndef ZSUMM_H
#define ZSUMM_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define ZSUMM_API __declspec(dllexport)
#else
#define ZSUMM_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum zsumm_status {
  ZSUMM_OK = 0,
  ZSUMM_ERR_INVALID_ARGUMENT = 1,
  ZSUMM_ERR_SHAPE = 2,
  ZSUMM_ERR_OUT_OF_RANGE = 3,
  ZSUMM_ERR_IO = 4,
  ZSUMM_ERR_FORMAT = 5,
  ZSUMM_ERR_CHECKSUM = 6,
  ZSUMM_ERR_VERSION = 7,
  ZSUMM_ERR_NUMERIC = 8,
  ZSUMM_ERR_INTERNAL = 99
} zsumm_status;

ZSUMM_API const char* zsumm_version(void);
ZSUMM_API const char* zsumm_last_error(void);
ZSUMM_API const char* zsumm_status_name(zsumm_status status);
ZSUMM_API void zsumm_string_free(char* s);
ZSUMM_API void zsumm_ids_free(int32_t* ids);

/* ---- Vocabulary ------------------------------------------------------- */

typedef struct zsumm_vocab zsumm_vocab;

/* Counts every "text", "source", "summary" and "instruction" field of the
 * JSONL files; max_size includes the 106 reserved tokens. */
ZSUMM_API zsumm_status zsumm_vocab_build(const char* const* jsonl_paths, size_t n_paths,
                                         size_t max_size, zsumm_vocab** out);
ZSUMM_API zsumm_status zsumm_vocab_load(const char* path, zsumm_vocab** out);
ZSUMM_API zsumm_status zsumm_vocab_save(const zsumm_vocab* vocab, const char* path);
ZSUMM_API size_t zsumm_vocab_size(const zsumm_vocab* vocab);
ZSUMM_API zsumm_status zsumm_vocab_encode(const zsumm_vocab* vocab, const char* text,
                                          int32_t** ids, size_t* n);
ZSUMM_API zsumm_status zsumm_vocab_decode(const zsumm_vocab* vocab, const int32_t* ids, size_t n,
                                          char** text);
ZSUMM_API void zsumm_vocab_free(zsumm_vocab* vocab);

/* ---- Model ------------------------------------------------------------ */

typedef struct zsumm_model zsumm_model;

/* config_json may be NULL or any subset of the model config keys;
 * vocab_size is taken from the vocabulary. */
ZSUMM_API zsumm_status zsumm_model_create(const zsumm_vocab* vocab, const char* config_json,
                                          uint64_t seed, zsumm_model** out);
/* The checkpoint must carry its vocabulary. */
ZSUMM_API zsumm_status zsumm_model_load(const char* checkpoint_path, zsumm_model** out);
/* finalize != 0 also stores the materialized discriminator embeddings. */
ZSUMM_API zsumm_status zsumm_model_save(const zsumm_model* model, const char* path, int finalize);
ZSUMM_API zsumm_status zsumm_model_config(const zsumm_model* model, char** config_json);
ZSUMM_API uint64_t zsumm_model_parameter_count(const zsumm_model* model);
/* Borrowed; valid while the model lives. */
ZSUMM_API const zsumm_vocab* zsumm_model_vocab(const zsumm_model* model);
ZSUMM_API void zsumm_model_free(zsumm_model* model);

/* ---- Training --------------------------------------------------------- */

typedef struct zsumm_trainer zsumm_trainer;

typedef enum zsumm_instructions {
  ZSUMM_INSTRUCTIONS_NONE = 0,    /* only a pair's own "instruction" field */
  ZSUMM_INSTRUCTIONS_BUNDLED = 1, /* built-in task templates */
  ZSUMM_INSTRUCTIONS_FILE = 2     /* JSON {task: [instructions]} */
} zsumm_instructions;

/* The model must outlive the trainer. Optimizer state starts fresh. */
ZSUMM_API zsumm_status zsumm_trainer_create(zsumm_model* model, const char* train_json,
                                            zsumm_trainer** out);
/* Restores training config, step counter and optimizer moments from a
 * checkpoint whose weights `model` was loaded from. */
ZSUMM_API zsumm_status zsumm_trainer_resume(zsumm_model* model, const char* checkpoint_path,
                                            zsumm_trainer** out);
/* Pretraining reads unlabelled documents; the other phases read pairs. */
ZSUMM_API zsumm_status zsumm_trainer_add_corpus(zsumm_trainer* trainer, const char* jsonl_path);
/* Default: bundled templates for the grounded phase, none otherwise. */
ZSUMM_API zsumm_status zsumm_trainer_set_instructions(zsumm_trainer* trainer,
                                                      zsumm_instructions mode,
                                                      const char* templates_path);
/* One update; metrics as a JSON object. */
ZSUMM_API zsumm_status zsumm_trainer_step(zsumm_trainer* trainer, char** metrics_json);
ZSUMM_API int64_t zsumm_trainer_steps_done(const zsumm_trainer* trainer);
ZSUMM_API zsumm_status zsumm_trainer_config(const zsumm_trainer* trainer, char** train_json);
ZSUMM_API zsumm_status zsumm_trainer_save(const zsumm_trainer* trainer, const char* path,
                                          int finalize);
ZSUMM_API void zsumm_trainer_free(zsumm_trainer* trainer);

/* ---- Generation and evaluation ---------------------------------------- */

typedef struct zsumm_decode_options {
  int beam;
  double alpha;
  int block_ngram; /* 0 disables */
  int max_length;
  int min_length;
} zsumm_decode_options;

ZSUMM_API void zsumm_decode_options_default(zsumm_decode_options* options);

/* instruction may be NULL (no prefix). */
ZSUMM_API zsumm_status zsumm_generate(const zsumm_model* model, const char* source,
                                      const char* instruction,
                                      const zsumm_decode_options* options, char** summary);
/* Summarizes every pair of in_jsonl and writes one
 * {"prediction", "reference", "task"} object per line to out_jsonl. */
ZSUMM_API zsumm_status zsumm_generate_file(const zsumm_model* model, const char* in_jsonl,
                                           const char* out_jsonl, zsumm_instructions mode,
                                           const char* templates_path,
                                           const zsumm_decode_options* options, size_t* count);

typedef struct zsumm_rouge {
  double r1, r2, rl; /* F-measures */
} zsumm_rouge;

ZSUMM_API zsumm_status zsumm_rouge_text(const char* candidate, const char* reference,
                                        zsumm_rouge* out);
/* Mean F-measures. With references_jsonl NULL each line of predictions
 * holds "prediction" and "reference"; otherwise predictions are read from
 * "prediction" and references from the other file's "summary" (or
 * "reference"), aligned by line. */
ZSUMM_API zsumm_status zsumm_eval_jsonl(const char* predictions_jsonl,
                                        const char* references_jsonl, zsumm_rouge* mean,
                                        size_t* count);

/* ---- Diagnostics ------------------------------------------------------ */

/* Runs the finite-difference sweep; report is a JSON array of
 * {name, instances, coords, max_error, worst, passed}. */
ZSUMM_API zsumm_status zsumm_gradcheck(uint64_t seed, int instances, char** report_json,
                                       int* all_passed);
/* Attention score elements per sequence of length n with `layers` encoder
 * layers, the last `global_layers` of them global and the rest confined
 * to chunks of `chunk` tokens. */
ZSUMM_API zsumm_status zsumm_fie_cost(int64_t n, int layers, int global_layers, int64_t chunk,
                                      uint64_t* fie_cost, uint64_t* full_cost);
/* Same quantity measured by running an instrumented encoder stack. */
ZSUMM_API zsumm_status zsumm_fie_count(int64_t n, int layers, int global_layers, int64_t chunk,
                                       uint64_t* counted);

#ifdef __cplusplus
}
#endif

#endif /* ZSUMM_H */

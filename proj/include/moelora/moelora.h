/* Copyright (c) 2026, The moelora Authors
 * SPDX-License-Identifier: Apache-2.0
 */

#ifndef MOELORA_MOELORA_H_
#define MOELORA_MOELORA_H_

#include <stddef.h>
#include <stdint.h>

#if defined(MOELORA_BUILDING_LIBRARY)
#define MOELORA_API __attribute__((visibility("default")))
#else
#define MOELORA_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum moelora_status {
  MOELORA_OK = 0,
  MOELORA_INVALID_ARGUMENT = 1, /* null handle, bad value, bad shape */
  MOELORA_CONFIG = 2,           /* config file or JSON rejected */
  MOELORA_IO = 3,
  MOELORA_DIMENSION = 4,
  MOELORA_NUMERIC = 5,          /* non-finite loss or degenerate input */
  MOELORA_STATE = 6,            /* call out of order */
  MOELORA_INTERNAL = 7
} moelora_status;

/* Message of the last failed call on this thread; empty after success.
 * Valid until the next call into the library from the same thread. */
MOELORA_API const char* moelora_last_error(void);

/* Strings returned through char** out-parameters are owned by the caller. */
MOELORA_API void moelora_string_free(char* s);

/* ---- configuration ---------------------------------------------------- */

typedef struct moelora_config moelora_config;

MOELORA_API moelora_status moelora_config_default(moelora_config** out);
/* Defaults overlaid with a JSON file. Unknown keys are rejected. */
MOELORA_API moelora_status moelora_config_from_file(const char* path, moelora_config** out);
MOELORA_API moelora_status moelora_config_from_json(const char* json, moelora_config** out);
/* Applies a JSON object of keys on top of the current values. */
MOELORA_API moelora_status moelora_config_apply_json(moelora_config* cfg, const char* json);
MOELORA_API moelora_status moelora_config_to_json(const moelora_config* cfg, char** out);
MOELORA_API moelora_status moelora_config_trainable_params(const moelora_config* cfg,
                                                           uint64_t* out);
MOELORA_API void moelora_config_destroy(moelora_config* cfg);

/* ---- parameter accounting --------------------------------------------- */

/* Trainable parameters for `matrices` adapted d x d weights. n_experts == 0
 * selects plain LoRA with the given rank; otherwise MoELoRA with n experts
 * of that rank plus a d x n gate per matrix. */
MOELORA_API moelora_status moelora_param_count(uint64_t d, uint64_t matrices, uint64_t n_experts,
                                               uint64_t rank, uint64_t* out);

/* ---- training sessions ------------------------------------------------ */

typedef struct moelora_session moelora_session;

typedef struct moelora_step_report {
  uint64_t step;
  double task_loss;
  double balance_loss;
  double contrastive_loss;
  double total_loss;
} moelora_step_report;

typedef struct moelora_eval_report {
  double task_loss;
  double base_loss;
  double nmi;
  double separation_intra;  /* NaN when no layer produced a score */
  double separation_inter;
  double load_entropy;      /* mean over adapted layers */
  double max_load_fraction; /* largest expert share, mean over adapted layers */
} moelora_eval_report;

/* The session copies the config. */
MOELORA_API moelora_status moelora_session_create(const moelora_config* cfg,
                                                  moelora_session** out);
MOELORA_API moelora_status moelora_session_load(const char* checkpoint_dir,
                                                moelora_session** out);
MOELORA_API moelora_status moelora_session_step(moelora_session* s, moelora_step_report* out);
/* Runs `steps` steps (0 means the configured count). When jsonl_path is not
 * null, one JSON object per step is written there. `last` may be null. */
MOELORA_API moelora_status moelora_session_train(moelora_session* s, uint64_t steps,
                                                 const char* jsonl_path,
                                                 moelora_step_report* last);
/* batches == 0 uses the configured eval_batches. */
MOELORA_API moelora_status moelora_session_evaluate(moelora_session* s, uint64_t batches,
                                                    moelora_eval_report* out);
MOELORA_API moelora_status moelora_session_save(const moelora_session* s,
                                                const char* checkpoint_dir);
MOELORA_API moelora_status moelora_session_steps_done(const moelora_session* s, uint64_t* out);
MOELORA_API moelora_status moelora_session_config_json(const moelora_session* s, char** out);
/* Evaluates with routing capture and writes the histogram CSV to csv_path
 * plus scalar metrics next to it (same stem, .json). frequency_csv_path may
 * be null. */
MOELORA_API moelora_status moelora_session_trace(moelora_session* s, uint64_t batches,
                                                 const char* csv_path,
                                                 const char* frequency_csv_path);
MOELORA_API void moelora_session_destroy(moelora_session* s);

/* ---- ablation --------------------------------------------------------- */

/* Runs every variant of the grid over its seeds and writes the comparison
 * CSV. rows_out (may be null) receives the number of variants. */
MOELORA_API moelora_status moelora_ablate(const char* grid_json, const char* csv_path,
                                          uint64_t* rows_out);

#ifdef __cplusplus
}
#endif

#endif /* MOELORA_MOELORA_H_ */

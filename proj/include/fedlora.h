#ifndef FEDLORA_H
#define FEDLORA_H

/* C interface to the federated LoRA backdoor simulator.
 *
 * All functions returning int use the FEDLORA_* status codes; on any failure
 * fedlora_last_error() holds a thread-local human-readable message. Functions
 * returning pointers yield NULL on failure under the same contract. */

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

enum {
  FEDLORA_OK = 0,
  FEDLORA_ERR_IO = 1,          /* file missing / unreadable / unwritable */
  FEDLORA_ERR_PARSE = 2,       /* malformed config or CSV content */
  FEDLORA_ERR_CONFIG = 3,      /* structurally valid but inconsistent config */
  FEDLORA_ERR_INVALID_ARG = 4, /* bad argument to the API itself */
  FEDLORA_ERR_RUNTIME = 5      /* anything else */
};

const char* fedlora_version(void);
const char* fedlora_last_error(void);

/* Opaque experiment configuration. */
typedef struct fedlora_config fedlora_config;

fedlora_config* fedlora_config_create(void); /* defaults */
fedlora_config* fedlora_config_load(const char* path);
fedlora_config* fedlora_config_parse(const char* text);
fedlora_config* fedlora_config_clone(const fedlora_config* cfg);
void fedlora_config_free(fedlora_config* cfg);

/* Dotted-key access, e.g. fedlora_config_set(cfg, "lora.rank", "8"). Get
 * writes a NUL-terminated value into buf (cap bytes available). */
int fedlora_config_set(fedlora_config* cfg, const char* key, const char* value);
int fedlora_config_get(const fedlora_config* cfg, const char* key, char* buf, size_t cap);
int fedlora_config_validate(const fedlora_config* cfg);
/* 64-bit digest of the canonical serialization; seed-independent. */
int fedlora_config_digest(const fedlora_config* cfg, uint64_t* out_digest);
/* Writes the canonical serialization to a file. */
int fedlora_config_save(const fedlora_config* cfg, const char* path);

typedef struct fedlora_run_stats {
  double final_acc;
  double final_asr;
  double pretrain_accuracy;
  int pretrain_floor_reached;
  uint64_t trainable_dim;
  int resumed; /* 1 when a completed matching run was reused */
} fedlora_run_stats;

/* Runs one experiment and writes telemetry.csv, summary.csv, config.cfg,
 * final.ckpt, manifest (and trigger.ppm for a3fl) into out_dir, creating it
 * as needed. The manifest is written last, so its presence marks a complete
 * run. With resume nonzero, a directory whose manifest matches this config
 * digest and seed is not re-run. workers bounds client-round threads; results
 * are identical for any worker count. stats may be NULL. */
int fedlora_run(const fedlora_config* cfg, uint64_t seed, const char* out_dir, int workers,
                int resume, fedlora_run_stats* stats);

/* Renders one metric column (acc | asr | sigma) of `count` telemetry CSVs as
 * an SVG line plot, one labelled series per file. aw_marker < 0 disables the
 * attack-window marker; x_split <= 0 disables the piecewise x axis. */
int fedlora_plot(const char* const* csv_paths, const char* const* labels, int count,
                 const char* metric, const char* title, int log_y, double aw_marker,
                 double x_split, const char* out_svg);

/* Concatenates per-run summary CSVs and appends one median row per
 * (attack, rank, aw_end) group, marked by a "median:" attack prefix. */
int fedlora_combine_summaries(const char* const* csv_paths, int count, const char* out_csv);

#ifdef __cplusplus
}
#endif

#endif /* FEDLORA_H */

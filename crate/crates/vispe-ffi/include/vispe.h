/* C interface for the multiview embedding library.
 *
 * Every fallible function returns VISPE_OK (0) on success or a nonzero
 * error code; vispe_last_error() gives the message for the most recent
 * failure on the calling thread. Handles are opaque; release them with the
 * matching _free function. Passing NULL where a handle is required yields
 * VISPE_ERR_NULL.
 */

#ifndef VISPE_H
#define VISPE_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#define VISPE_OK 0
#define VISPE_ERR_NULL 1
#define VISPE_ERR_USAGE 2
#define VISPE_ERR_CONFIG 3
#define VISPE_ERR_NUMERIC 4
#define VISPE_ERR_IO 5

typedef struct VispeDataset VispeDataset;
typedef struct VispeTrainer VispeTrainer;

/* Message for the most recent error on this thread. Valid until the next
 * failing call on the same thread. Never NULL. */
const char *vispe_last_error(void);

/* spec_json: JSON object of synthetic dataset parameters, or NULL for the
 * defaults. */
int32_t vispe_dataset_generate(const char *spec_json, VispeDataset **out);
int32_t vispe_dataset_load(const char *dir, VispeDataset **out);
int32_t vispe_dataset_save(const VispeDataset *ds, const char *dir);
size_t vispe_dataset_n_objects(const VispeDataset *ds);
size_t vispe_dataset_total_views(const VispeDataset *ds);
size_t vispe_dataset_obs_dim(const VispeDataset *ds);
void vispe_dataset_free(VispeDataset *ds);

/* mode: "pe", "mvspe", "vispe", "instance", "supervised" or "triplet".
 * config_text: `key = value` lines, or NULL for the mode's defaults. */
int32_t vispe_trainer_new(const VispeDataset *ds, const char *mode,
                          const char *config_text, VispeTrainer **out);
/* Runs n additional epochs. */
int32_t vispe_trainer_run_epochs(VispeTrainer *t, const VispeDataset *ds,
                                 size_t n);
size_t vispe_trainer_epoch(const VispeTrainer *t);
/* Mean total loss of the most recent epoch. */
int32_t vispe_trainer_last_loss(const VispeTrainer *t, double *out);
/* x: x_len observation components; out: out_len embedding components. Both
 * lengths must match the model's dimensions. */
int32_t vispe_trainer_embed(const VispeTrainer *t, const double *x,
                            size_t x_len, double *out, size_t out_len);
int32_t vispe_trainer_eval_unseen_knn(const VispeTrainer *t,
                                      const VispeDataset *ds, double *out);
int32_t vispe_trainer_checkpoint(const VispeTrainer *t, const char *dir);
int32_t vispe_trainer_resume(const char *dir, const VispeDataset *ds,
                             VispeTrainer **out);
void vispe_trainer_free(VispeTrainer *t);

#ifdef __cplusplus
}
#endif

#endif /* VISPE_H */

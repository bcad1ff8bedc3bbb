#ifndef DRIFTCAST_H
#define DRIFTCAST_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes of every fallible call.
 */
typedef enum DcStatus {
  DC_STATUS_OK = 0,
  DC_STATUS_NULL_POINTER = 1,
  DC_STATUS_INVALID_UTF8 = 2,
  DC_STATUS_IO = 3,
  DC_STATUS_PARSE = 4,
  DC_STATUS_CONFIG = 5,
  DC_STATUS_INTEGRITY = 6,
  DC_STATUS_VERSION = 7,
  DC_STATUS_INVALID_INPUT = 8,
  DC_STATUS_NON_FINITE = 9,
  DC_STATUS_BUFFER_TOO_SMALL = 10,
  DC_STATUS_PANIC = 99,
} DcStatus;

/**
 * A loaded or generated dataset.
 */
typedef struct DcDataset DcDataset;

/**
 * A simulation state: model, optimizer, caches and prediction log.
 */
typedef struct DcSimulation DcSimulation;

/**
 * One prediction log row. `entity` indexes the dataset's sorted entities.
 */
typedef struct DcPrediction {
  uint64_t day;
  uint64_t entity;
  int64_t offset;
  double predicted;
} DcPrediction;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next call into this library on the same thread.
 */
const char *dc_last_error_message(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *dc_version(void);

/**
 * Generates a synthetic dataset from a generator config in JSON (null or
 * empty for defaults).
 *
 * # Safety
 * `config_json` is null or a valid C string; `out` is a valid pointer.
 */
enum DcStatus dc_dataset_generate(const char *config_json, struct DcDataset **out);

/**
 * Loads a dataset directory.
 *
 * # Safety
 * `dir` is a valid C string; `out` is a valid pointer.
 */
enum DcStatus dc_dataset_load(const char *dir, struct DcDataset **out);

/**
 * Writes a dataset directory.
 *
 * # Safety
 * `ds` is a live handle; `dir` is a valid C string.
 */
enum DcStatus dc_dataset_save(const struct DcDataset *ds, const char *dir);

/**
 * Number of entities.
 *
 * # Safety
 * `ds` is a live handle; `out` is a valid pointer.
 */
enum DcStatus dc_dataset_entity_count(const struct DcDataset *ds, size_t *out);

/**
 * Number of hourly rows per entity.
 *
 * # Safety
 * `ds` is a live handle; `out` is a valid pointer.
 */
enum DcStatus dc_dataset_hours(const struct DcDataset *ds, size_t *out);

/**
 * Releases a dataset. Null is ignored.
 *
 * # Safety
 * `ds` is null or a handle not freed before.
 */
void dc_dataset_free(struct DcDataset *ds);

/**
 * Trains a model on the offline span. `config_json` is a run config (null
 * or empty for defaults); its model, horizon and train sections are used.
 *
 * # Safety
 * `ds` is a live handle; `config_json` is null or a valid C string; `out` is
 * a valid pointer.
 */
enum DcStatus dc_train_offline(const struct DcDataset *ds,
                               const char *config_json,
                               struct DcSimulation **out);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` is a valid C string; `out` is a valid pointer.
 */
enum DcStatus dc_simulation_load(const char *path, struct DcSimulation **out);

/**
 * Writes a checkpoint file.
 *
 * # Safety
 * `sim` is a live handle; `path` is a valid C string.
 */
enum DcStatus dc_simulation_save(const struct DcSimulation *sim, const char *path);

/**
 * Sets the online policy: `frozen` or a `temporal:nontemporal` scheme.
 *
 * # Safety
 * `sim` is a live handle; `policy` is a valid C string.
 */
enum DcStatus dc_simulation_set_policy(struct DcSimulation *sim, const char *policy);

/**
 * Simulates `n_days` further days. On failure the state is left unchanged.
 *
 * # Safety
 * `sim` and `ds` are live handles.
 */
enum DcStatus dc_simulation_run_days(struct DcSimulation *sim,
                                     const struct DcDataset *ds,
                                     size_t n_days);

/**
 * Next simulated day to be predicted.
 *
 * # Safety
 * `sim` is a live handle; `out` is a valid pointer.
 */
enum DcStatus dc_simulation_day(const struct DcSimulation *sim, size_t *out);

/**
 * Number of rows in the prediction log.
 *
 * # Safety
 * `sim` is a live handle; `out` is a valid pointer.
 */
enum DcStatus dc_simulation_prediction_count(const struct DcSimulation *sim, size_t *out);

/**
 * Copies the prediction log into `buf`. With fewer than the log length in
 * `capacity` nothing is copied and `DcStatus::BufferTooSmall` is returned;
 * `written` always receives the log length.
 *
 * # Safety
 * `sim` and `ds` are live handles; `buf` points to `capacity` writable rows
 * (may be null when `capacity` is 0); `written` is a valid pointer.
 */
enum DcStatus dc_simulation_predictions(const struct DcSimulation *sim,
                                        const struct DcDataset *ds,
                                        struct DcPrediction *buf,
                                        size_t capacity,
                                        size_t *written);

/**
 * Writes the prediction log as CSV.
 *
 * # Safety
 * `sim` is a live handle; `path` is a valid C string.
 */
enum DcStatus dc_simulation_write_log(const struct DcSimulation *sim, const char *path);

/**
 * Releases a simulation. Null is ignored.
 *
 * # Safety
 * `sim` is null or a handle not freed before.
 */
void dc_simulation_free(struct DcSimulation *sim);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DRIFTCAST_H */

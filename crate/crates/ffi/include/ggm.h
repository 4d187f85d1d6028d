#ifndef GGM_H
#define GGM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum GgmStatus {
  GGM_STATUS_OK = 0,
  GGM_STATUS_NULL_POINTER = 1,
  GGM_STATUS_INVALID_UTF8 = 2,
  GGM_STATUS_CONFIG = 3,
  GGM_STATUS_IO = 4,
  GGM_STATUS_JSON = 5,
  GGM_STATUS_DIMENSION = 6,
  GGM_STATUS_PARAMETER = 7,
  GGM_STATUS_INDEX = 8,
  GGM_STATUS_CONTRACT = 9,
  GGM_STATUS_NUMERIC = 10,
  GGM_STATUS_BUFFER_TOO_SMALL = 11,
  GGM_STATUS_GRADCHECK_FAILED = 12,
  GGM_STATUS_PANIC = 13,
} GgmStatus;

/**
 * Training mode selector for [`ggm_train`].
 */
typedef enum GgmMode {
  GGM_MODE_BASELINE = 0,
  GGM_MODE_XGGM = 1,
} GgmMode;

/**
 * Example split selector.
 */
typedef enum GgmSplit {
  GGM_SPLIT_TRAIN = 0,
  GGM_SPLIT_ID_TEST = 1,
  GGM_SPLIT_OOD_TEST = 2,
} GgmSplit;

/**
 * Opaque run configuration.
 */
typedef struct GgmConfig GgmConfig;

/**
 * Opaque trained model: checkpoint parameters plus the regenerated dataset.
 */
typedef struct GgmModel GgmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ggm_version(void);

/**
 * Message of the last failed call on this thread, or an empty string.
 * The pointer stays valid until the next call on the same thread.
 */
const char *ggm_last_error(void);

/**
 * Parses a JSON config. Missing keys take their defaults; unknown keys are rejected.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum GgmStatus ggm_config_from_json(const char *json, struct GgmConfig **out);

/**
 * Loads a JSON config file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum GgmStatus ggm_config_load(const char *path, struct GgmConfig **out);

/**
 * Overrides the output directory.
 *
 * # Safety
 * `cfg` must come from this library and `dir` be a NUL-terminated string.
 */
enum GgmStatus ggm_config_set_output_dir(struct GgmConfig *cfg, const char *dir);

/**
 * # Safety
 * `cfg` must be null or a pointer from this library that has not been freed.
 */
void ggm_config_free(struct GgmConfig *cfg);

/**
 * Generates the dataset under `<output_dir>/data`.
 *
 * # Safety
 * `cfg` must come from this library.
 */
enum GgmStatus ggm_gen_data(const struct GgmConfig *cfg);

/**
 * Trains every configured seed in `mode` and writes the run directory.
 * Seed-mean ID and OOD accuracies go to the optional out pointers.
 *
 * # Safety
 * `cfg` must come from this library; out pointers may be null.
 */
enum GgmStatus ggm_train(const struct GgmConfig *cfg,
                         enum GgmMode mode,
                         double *out_id_all,
                         double *out_ood_all);

/**
 * Runs the gradient suite. Returns `GradcheckFailed` if any check exceeds its threshold.
 *
 * # Safety
 * `cfg` must come from this library.
 */
enum GgmStatus ggm_gradcheck(const struct GgmConfig *cfg);

/**
 * Runs the η sweep and writes `<output_dir>/sweep`. The std of OOD accuracy goes to `out_ood_std`.
 *
 * # Safety
 * `cfg` must come from this library; `out_ood_std` may be null.
 */
enum GgmStatus ggm_sweep(const struct GgmConfig *cfg, double *out_ood_std);

/**
 * Writes `<prefix>_gt.csv`, `_gt.pgm`, `_gen.csv` and `_gen.pgm` for one example.
 *
 * # Safety
 * `checkpoint` and `out_prefix` must be NUL-terminated strings.
 */
enum GgmStatus ggm_export_heatmap(const char *checkpoint,
                                  enum GgmSplit split,
                                  size_t index,
                                  const char *out_prefix);

/**
 * Loads a checkpoint and regenerates the dataset it was trained on.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum GgmStatus ggm_model_load(const char *path, struct GgmModel **out);

/**
 * # Safety
 * `model` must be null or a pointer from this library that has not been freed.
 */
void ggm_model_free(struct GgmModel *model);

/**
 * Objects per scene, i.e. the side of the relation matrices.
 *
 * # Safety
 * `model` must come from this library.
 */
size_t ggm_model_n_objects(const struct GgmModel *model);

/**
 * Number of examples in `split`.
 *
 * # Safety
 * `model` must come from this library.
 */
size_t ggm_model_split_len(const struct GgmModel *model, enum GgmSplit split);

/**
 * Predicted answer and ground-truth answer for one example.
 *
 * # Safety
 * `model` must come from this library; out pointers may be null.
 */
enum GgmStatus ggm_model_predict(const struct GgmModel *model,
                                 enum GgmSplit split,
                                 size_t index,
                                 size_t *out_pred,
                                 size_t *out_answer);

/**
 * Copies `R_GT` and the generated relation matrix, row-major, into buffers of `len`
 * entries each. `len` must be at least `n_objects²`.
 *
 * # Safety
 * `gt` and `gen` must point to `len` writable doubles.
 */
enum GgmStatus ggm_model_relations(const struct GgmModel *model,
                                   enum GgmSplit split,
                                   size_t index,
                                   double *gt,
                                   double *gen,
                                   size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GGM_H */

#ifndef HLAVQA_H
#define HLAVQA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HlavqaStatus {
  HLAVQA_STATUS_OK = 0,
  HLAVQA_STATUS_NULL_POINTER = 1,
  HLAVQA_STATUS_INVALID_ARGUMENT = 2,
  HLAVQA_STATUS_DIMENSION = 3,
  HLAVQA_STATUS_CONFIG = 4,
  HLAVQA_STATUS_DATA = 5,
  HLAVQA_STATUS_FORMAT = 6,
  HLAVQA_STATUS_NUMERICAL = 7,
  HLAVQA_STATUS_IO = 8,
  HLAVQA_STATUS_INTERNAL = 9,
} HlavqaStatus;

/**
 * Opaque trained model.
 */
typedef struct HlavqaModel HlavqaModel;

/**
 * Sizes a caller needs to lay out forward inputs and outputs.
 */
typedef struct HlavqaModelInfo {
  size_t d_x;
  size_t d_emb;
  size_t answers;
  size_t encoder_layers;
  size_t decoder_layers;
  bool has_text_prior_net;
} HlavqaModelInfo;

/**
 * Where priors enter. Bit `i` of a layer mask selects layer `i + 1`.
 */
typedef struct HlavqaIntegration {
  uint32_t text_layers;
  uint32_t image_layers;
  /**
   * 0 per key, 1 per query.
   */
  uint32_t apply_mode;
  /**
   * 0 sum to one, 1 mean one.
   */
  uint32_t norm_mode;
  /**
   * 0 text saliency network, 1 caller-provided text prior.
   */
  uint32_t text_source;
} HlavqaIntegration;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *hlavqa_last_error(void);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a writable pointer.
 */
enum HlavqaStatus hlavqa_model_load(const char *path, struct HlavqaModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`hlavqa_model_load`] and not be used afterwards.
 */
void hlavqa_model_free(struct HlavqaModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum HlavqaStatus hlavqa_model_info(const struct HlavqaModel *model, struct HlavqaModelInfo *out);

/**
 * Scores one question–image pair.
 *
 * `question` holds `tokens × d_emb` embeddings and `mask` one byte per
 * token (nonzero = valid). `image` holds `cells × d_x` features. Priors are
 * raw nonnegative weights (`tokens` and `cells` long) or null when the
 * integration does not need them. `integ` may be null for no integration.
 * `scores` receives one sigmoid score per answer; `text_weights` and
 * `image_weights` may be null.
 *
 * # Safety
 * Every non-null pointer must reference at least the stated number of
 * elements.
 */
enum HlavqaStatus hlavqa_model_forward(const struct HlavqaModel *model,
                                       const double *question,
                                       const uint8_t *mask,
                                       size_t tokens,
                                       const double *image,
                                       size_t cells,
                                       const double *text_prior,
                                       const double *image_prior,
                                       const struct HlavqaIntegration *integ,
                                       double *scores,
                                       double *text_weights,
                                       double *image_weights);

/**
 * VQA accuracy of `predicted` against exactly ten annotator answers.
 *
 * # Safety
 * `answers` must point to `count` nul-terminated strings.
 */
enum HlavqaStatus hlavqa_vqa_accuracy(const char *predicted,
                                      const char *const *answers,
                                      size_t count,
                                      double *out);

/**
 * Pools a `height × width` saliency map onto a `rows × cols` grid and
 * normalises it (`norm_mode` 0 sum to one, 1 mean one). `out` receives
 * `rows·cols` weights in row-major order.
 *
 * # Safety
 * `map` must hold `height·width` values and `out` room for `rows·cols`.
 */
enum HlavqaStatus hlavqa_aggregate_to_grid(const double *map,
                                           size_t height,
                                           size_t width,
                                           size_t rows,
                                           size_t cols,
                                           uint32_t norm_mode,
                                           double *out);

/**
 * Question-type bin index (0..12) of `question`.
 *
 * # Safety
 * `question` must be nul-terminated and `out` writable.
 */
enum HlavqaStatus hlavqa_classify_question_type(const char *question, uint32_t *out);

/**
 * Static name of bin `index`, or null when out of range.
 */
const char *hlavqa_question_type_name(uint32_t index);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HLAVQA_H */

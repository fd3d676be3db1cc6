#ifndef VTR_H
#define VTR_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define VTR_SCORE_CLS 0

#define VTR_SCORE_SELF_AVG 1

#define VTR_INDICES_SELECTED 0

#define VTR_INDICES_GLOBAL 1

#define VTR_INDICES_LOCAL 2

typedef enum VtrStatus {
  VTR_STATUS_OK = 0,
  VTR_STATUS_NULL_POINTER = 1,
  VTR_STATUS_INVALID_ARGUMENT = 2,
  VTR_STATUS_SHAPE = 3,
  VTR_STATUS_BUDGET = 4,
  VTR_STATUS_DEGENERATE = 5,
  VTR_STATUS_FORMAT = 6,
  VTR_STATUS_TRACE = 7,
  VTR_STATUS_LAYOUT = 8,
  VTR_STATUS_CONFIG = 9,
  VTR_STATUS_IO = 10,
  VTR_STATUS_BUFFER_TOO_SMALL = 11,
  VTR_STATUS_PANIC = 12,
} VtrStatus;

/**
 * Opaque decoder attention trace.
 */
typedef struct VtrDecoderTrace VtrDecoderTrace;

/**
 * Opaque encoder attention trace.
 */
typedef struct VtrEncoderTrace VtrEncoderTrace;

/**
 * Opaque stage-one selection, including merged embeddings.
 */
typedef struct VtrSelection VtrSelection;

typedef struct VtrScanConfig {
  double r1;
  double global_fraction;
  size_t local_layer;
  size_t output_layer;
  size_t window_rows;
  size_t window_cols;
  /**
   * `VTR_SCORE_CLS` or `VTR_SCORE_SELF_AVG`.
   */
  uint32_t score_source;
} VtrScanConfig;

typedef struct VtrEncoderSynthParams {
  uint64_t seed;
  size_t grid_h;
  size_t grid_w;
  size_t layers;
  size_t heads;
  size_t embed_dim;
  double locality_strength;
  bool with_cls;
  bool with_self_attention;
} VtrEncoderSynthParams;

typedef struct VtrDecoderSynthParams {
  uint64_t seed;
  size_t layers;
  size_t heads;
  size_t n_pre_text;
  size_t n_visual;
  size_t n_post_text;
  double position_bias_strength;
  bool has_visual_boost;
  size_t boost_first_layer;
  size_t boost_last_layer;
  double boost_strength;
} VtrDecoderSynthParams;

typedef struct VtrModelDims {
  size_t n_layers;
  size_t d;
  size_t m;
} VtrModelDims;

typedef struct VtrPruneConfig {
  size_t k;
  double r2;
  size_t n_layers;
} VtrPruneConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *vtr_last_error_message(void);

/**
 * Fills `out` with the default stage-one settings.
 *
 * # Safety
 * `out` must be null or point to writable memory for one `VtrScanConfig`.
 */
enum VtrStatus vtr_scan_config_default(struct VtrScanConfig *out);

/**
 * Loads an encoder bundle from a directory or its manifest path.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum VtrStatus vtr_encoder_load(const char *path, struct VtrEncoderTrace **out);

/**
 * # Safety
 * `params` must be readable; `out` must be writable.
 */
enum VtrStatus vtr_encoder_generate(const struct VtrEncoderSynthParams *params,
                                    struct VtrEncoderTrace **out);

/**
 * # Safety
 * `trace` must be null or a handle from this library not yet freed.
 */
void vtr_encoder_free(struct VtrEncoderTrace *trace);

/**
 * # Safety
 * `trace` must be a live handle; `n_tokens` must be writable.
 */
enum VtrStatus vtr_encoder_n_tokens(const struct VtrEncoderTrace *trace, size_t *n_tokens);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum VtrStatus vtr_decoder_load(const char *path, struct VtrDecoderTrace **out);

/**
 * # Safety
 * `params` must be readable; `out` must be writable.
 */
enum VtrStatus vtr_decoder_generate(const struct VtrDecoderSynthParams *params,
                                    struct VtrDecoderTrace **out);

/**
 * # Safety
 * `trace` must be null or a handle from this library not yet freed.
 */
void vtr_decoder_free(struct VtrDecoderTrace *trace);

/**
 * Head-averaged attention from the last instruction token onto the visual
 * span at 1-based `layer`. `written` receives the visual-token count.
 *
 * # Safety
 * `trace` must be a live handle; `buf` must hold `cap` doubles.
 */
enum VtrStatus vtr_decoder_text_scores(const struct VtrDecoderTrace *trace,
                                       size_t layer,
                                       double *buf,
                                       size_t cap,
                                       size_t *written);

/**
 * Stage one: selects tokens and merges the rest.
 *
 * # Safety
 * `trace` must be a live handle; `cfg` readable; `out` writable.
 */
enum VtrStatus vtr_reduce_encoder(const struct VtrEncoderTrace *trace,
                                  const struct VtrScanConfig *cfg,
                                  struct VtrSelection **out);

/**
 * # Safety
 * `sel` must be null or a handle from this library not yet freed.
 */
void vtr_selection_free(struct VtrSelection *sel);

/**
 * Copies ascending token indices out of a selection. `which` is one of
 * `VTR_INDICES_SELECTED`, `VTR_INDICES_GLOBAL`, `VTR_INDICES_LOCAL`.
 * `written` always receives the full count, so a first call with `cap = 0`
 * sizes the buffer.
 *
 * # Safety
 * `sel` must be a live handle; `buf` must hold `cap` elements.
 */
enum VtrStatus vtr_selection_indices(const struct VtrSelection *sel,
                                     uint32_t which,
                                     size_t *buf,
                                     size_t cap,
                                     size_t *written);

/**
 * For every token, the selected token it maps to (itself if selected).
 *
 * # Safety
 * `sel` must be a live handle; `buf` must hold `cap` elements.
 */
enum VtrStatus vtr_selection_assignment(const struct VtrSelection *sel,
                                        size_t *buf,
                                        size_t cap,
                                        size_t *written);

/**
 * Row-major merged embeddings, one row per selected token. `rows` and `cols`
 * receive the shape.
 *
 * # Safety
 * `sel` must be a live handle; `buf` must hold `cap` doubles.
 */
enum VtrStatus vtr_selection_merged_embeddings(const struct VtrSelection *sel,
                                               double *buf,
                                               size_t cap,
                                               size_t *rows,
                                               size_t *cols);

/**
 * Total prefill FLOPs over a per-layer visual-token profile of
 * `dims.n_layers` entries.
 *
 * # Safety
 * `tokens` must hold `n` elements; `out` must be writable.
 */
enum VtrStatus vtr_flops_total(const size_t *tokens,
                               size_t n,
                               struct VtrModelDims dims,
                               double *out);

/**
 * # Safety
 * `out` must be writable.
 */
enum VtrStatus vtr_average_retention(double r1, double r2, size_t k, size_t n_layers, double *out);

/**
 * # Safety
 * `out` must be writable.
 */
enum VtrStatus vtr_solve_r1(double target_avg, double r2, size_t k, size_t n_layers, double *out);

/**
 * Stage two over `n` text-attention scores. `counts` receives
 * `cfg.n_layers` per-layer token counts; `retained` receives the kept
 * positions, ascending, with their number in `n_retained`.
 *
 * # Safety
 * `scores` must hold `n` doubles, `counts` `cfg.n_layers` elements and
 * `retained` `retained_cap` elements.
 */
enum VtrStatus vtr_prune_at_layer(const double *scores,
                                  size_t n,
                                  struct VtrPruneConfig cfg,
                                  size_t *counts,
                                  size_t *retained,
                                  size_t retained_cap,
                                  size_t *n_retained);

/**
 * Fraction of KV-cache entries kept under a per-layer visual-token profile,
 * relative to `n_visual_original` visual tokens at every layer.
 *
 * # Safety
 * `counts` must hold `n_layers` elements; `out` must be writable.
 */
enum VtrStatus vtr_kv_fraction(const size_t *counts,
                               size_t n_layers,
                               size_t n_visual_original,
                               size_t n_text_total,
                               double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VTR_H */

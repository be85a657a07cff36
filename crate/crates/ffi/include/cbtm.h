#ifndef CBTM_H
#define CBTM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CbtmStatus {
  CBTM_STATUS_OK = 0,
  /*
   A null pointer, bad UTF-8 or a buffer of the wrong length.
   */
  CBTM_STATUS_INVALID_ARGUMENT = 1,
  CBTM_STATUS_VALIDATION = 2,
  CBTM_STATUS_RUNTIME = 3,
  CBTM_STATUS_INTEGRITY = 4,
  CBTM_STATUS_PANIC = 5,
} CbtmStatus;

typedef enum CbtmPolicy {
  CBTM_POLICY_PER_TOKEN = 0,
  CBTM_POLICY_FREEZE_HALF = 1,
} CbtmPolicy;

typedef struct CbtmClusters CbtmClusters;

typedef struct CbtmCollection CbtmCollection;

typedef struct CbtmPipeline CbtmPipeline;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or null. The pointer is
 valid until the next failing call on the same thread.
 */
const char *cbtm_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *cbtm_version(void);

/*
 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CbtmStatus cbtm_pipeline_load(const char *path, struct CbtmPipeline **out);

/*
 # Safety
 `pipeline` must come from [`cbtm_pipeline_load`] or be null.
 */
size_t cbtm_pipeline_dim(const struct CbtmPipeline *pipeline);

/*
 Embeds `text` into `out`, which must hold exactly `dim` values.

 # Safety
 Pointers must be valid; `out` must point to `len` writable doubles.
 */
enum CbtmStatus cbtm_pipeline_embed(const struct CbtmPipeline *pipeline,
                                    const char *text,
                                    double *out,
                                    size_t len);

/*
 # Safety
 `pipeline` must come from [`cbtm_pipeline_load`] or be null, and must
 not be used afterwards.
 */
void cbtm_pipeline_free(struct CbtmPipeline *pipeline);

/*
 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CbtmStatus cbtm_clusters_load(const char *path, struct CbtmClusters **out);

/*
 # Safety
 `clusters` must come from [`cbtm_clusters_load`] or be null.
 */
size_t cbtm_clusters_k(const struct CbtmClusters *clusters);

/*
 # Safety
 `clusters` must come from [`cbtm_clusters_load`] or be null.
 */
size_t cbtm_clusters_dim(const struct CbtmClusters *clusters);

/*
 Nearest-center cluster of each of `n_docs` row-major embeddings.

 # Safety
 `embeddings` must hold `n_docs * dim` doubles and `out` `n_docs` slots.
 */
enum CbtmStatus cbtm_clusters_greedy_assign(const struct CbtmClusters *clusters,
                                            const double *embeddings,
                                            size_t n_docs,
                                            size_t dim,
                                            size_t *out);

/*
 Ensemble weights of one embedding; `out` must hold exactly K values.

 # Safety
 `embedding` must hold `dim` doubles and `out` `len` writable doubles.
 */
enum CbtmStatus cbtm_clusters_ensemble_weights(const struct CbtmClusters *clusters,
                                               const double *embedding,
                                               size_t dim,
                                               double temperature,
                                               size_t k_active,
                                               double *out,
                                               size_t len);

/*
 # Safety
 `clusters` must come from [`cbtm_clusters_load`] or be null, and must
 not be used afterwards.
 */
void cbtm_clusters_free(struct CbtmClusters *clusters);

/*
 Opens a finished run directory, verifying every digest.

 # Safety
 `run_dir` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CbtmStatus cbtm_collection_open(const char *run_dir, struct CbtmCollection **out);

/*
 # Safety
 `collection` must come from [`cbtm_collection_open`] or be null.
 */
size_t cbtm_collection_k(const struct CbtmCollection *collection);

/*
 Ensemble perplexity on a JSONL corpus.

 # Safety
 Pointers must be valid; `corpus_path` NUL-terminated.
 */
enum CbtmStatus cbtm_collection_eval_ppl(const struct CbtmCollection *collection,
                                         const char *corpus_path,
                                         double temperature,
                                         size_t k_active,
                                         enum CbtmPolicy policy,
                                         double *out);

/*
 Expert weights for a context; `out` must hold exactly K values.

 # Safety
 Pointers must be valid; `out` must point to `len` writable doubles.
 */
enum CbtmStatus cbtm_collection_route(const struct CbtmCollection *collection,
                                      const char *context,
                                      double temperature,
                                      size_t k_active,
                                      double *out,
                                      size_t len);

/*
 # Safety
 `collection` must come from [`cbtm_collection_open`] or be null, and
 must not be used afterwards.
 */
void cbtm_collection_free(struct CbtmCollection *collection);

/*
 Training FLOPs of one of `k` experts sharing `tokens`.

 # Safety
 `out` must be a valid pointer.
 */
enum CbtmStatus cbtm_elm_flops(uint64_t layers,
                               uint64_t hidden,
                               uint64_t seq_len,
                               uint64_t vocab,
                               uint64_t tokens,
                               uint64_t k,
                               double *out);

/*
 Log-linear cost interpolation over `n` observations.

 # Safety
 `ts` and `costs` must each hold `n` doubles; `out` must be valid.
 */
enum CbtmStatus cbtm_interpolate_cost(const double *ts,
                                      const double *costs,
                                      size_t n,
                                      double target,
                                      double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CBTM_H */

/* C interface to the attribution library: model lifecycle, classification,
 * attention-relevance explanations, evaluation protocols, and the invariant
 * self-test. All functions return attrib_status; on failure the thread-local
 * message from attrib_last_error() describes the problem. */
#ifndef ATTRIB_H
#define ATTRIB_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum {
    ATTRIB_OK = 0,
    ATTRIB_ERR_INVARIANT = 1, /* numeric/internal invariant violated */
    ATTRIB_ERR_IO = 2         /* file, format, or argument problem */
} attrib_status;

/* Message for the most recent failure on this thread; never NULL. */
const char* attrib_last_error(void);

typedef struct attrib_model attrib_model;
typedef struct attrib_explanation attrib_explanation;

/* ---- model lifecycle ---- */
attrib_status attrib_model_load(const char* path, attrib_model** out);
attrib_status attrib_model_save(const attrib_model* model, const char* path);
/* Configuration echo as a JSON string; release with attrib_string_free. */
attrib_status attrib_model_config_json(const attrib_model* model, char** out_json);
void attrib_model_free(attrib_model* model);

/* Trains a small model on a generated synthetic dataset. modality is
 * "image" or "text". out_summary_json (optional, may be NULL) receives
 * per-epoch loss and final train accuracy. */
attrib_status attrib_train_toy(const char* modality, size_t items, size_t epochs, double lr,
                               uint64_t dataset_seed, uint64_t seed, attrib_model** out_model,
                               char** out_summary_json);

/* ---- classification ---- */
/* input_path: PGM image (image models) or whitespace-tokenized text file
 * (text models, vocab_path required; NULL for image models). */
attrib_status attrib_classify_file(const attrib_model* model, const char* input_path,
                                   const char* vocab_path, size_t* out_class);

/* ---- explanations ---- */
/* method: ours | ours_no_grad | ours_block_last | ours_block_first |
 * rollout | raw_attention | gradcam_attn | partial_lrp | full_lrp.
 * target_class < 0 uses the predicted class. */
attrib_status attrib_explain_file(const attrib_model* model, const char* input_path,
                                  const char* vocab_path, const char* method, int target_class,
                                  attrib_explanation** out);
size_t attrib_explanation_num_tokens(const attrib_explanation* e);
size_t attrib_explanation_target_class(const attrib_explanation* e);
size_t attrib_explanation_predicted_class(const attrib_explanation* e);
/* Copies per-token scores into buf (len must be >= num_tokens). */
attrib_status attrib_explanation_token_scores(const attrib_explanation* e, double* buf, size_t len);
/* Pixel map extents; zero for text models. */
attrib_status attrib_explanation_pixel_size(const attrib_explanation* e, size_t* out_h,
                                            size_t* out_w);
attrib_status attrib_explanation_pixel_map(const attrib_explanation* e, double* buf, size_t len);
/* Writes <out_stem>.pgm (min-max normalized map) and <out_stem>.json. */
attrib_status attrib_explanation_write(const attrib_explanation* e, const char* out_stem);
void attrib_explanation_free(attrib_explanation* e);

/* ---- evaluation ---- */
/* methods_csv: comma-separated method names; include_random adds the
 * uniform-random-map baseline. Outputs are JSON and CSV report strings. */
attrib_status attrib_evaluate(const attrib_model* model, const char* methods_csv,
                              uint64_t dataset_seed, size_t items, uint64_t seed,
                              int include_random, char** out_json, char** out_csv);

/* ---- self-test ---- */
/* Runs the invariant suite; out_text gets one line per check. Returns
 * ATTRIB_ERR_INVARIANT when any check fails. inject_fault disables the
 * binary-split normalization so the matmul conservation check must fail. */
attrib_status attrib_selftest(int inject_fault, char** out_text);

/* Frees any char* returned by this library. */
void attrib_string_free(char* s);

#ifdef __cplusplus
}
#endif

#endif /* ATTRIB_H */

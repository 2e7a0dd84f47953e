#ifndef TCNA_H
#define TCNA_H

#include <stddef.h>
#include <stdint.h>

typedef enum TcnaStatus {
  TCNA_STATUS_OK = 0,
  TCNA_STATUS_NULL_POINTER = 1,
  TCNA_STATUS_INVALID_ARGUMENT = 2,
  TCNA_STATUS_SHAPE = 3,
  TCNA_STATUS_IO = 4,
  TCNA_STATUS_FORMAT = 5,
  TCNA_STATUS_CHECKPOINT = 6,
  TCNA_STATUS_NUMERIC = 7,
  TCNA_STATUS_INTERNAL = 8,
} TcnaStatus;

// A uni-modal branch loaded from a checkpoint.
typedef struct TcnaBranch TcnaBranch;

// A fusion model and its three frozen branches.
typedef struct TcnaFusion TcnaFusion;

// Shape of a loaded branch. `modality` is 0 for rgb, 1 for flow, 2 for obj.
typedef struct TcnaBranchInfo {
  size_t input_dim;
  size_t channels;
  size_t kernel;
  size_t layers;
  size_t receptive_field;
  size_t num_actions;
  size_t num_verbs;
  size_t num_nouns;
  uint8_t modality;
} TcnaBranchInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer
// stays valid until the next `tcna_*` call on the same thread.
const char *tcna_last_error_message(void);

// Static name of a status code.
const char *tcna_status_name(enum TcnaStatus status);

// Receptive field `1 + (kernel - 1) * sum(dilations)`.
//
// # Safety
// `dilations` must point to `len` values, or be null when `len` is 0.
size_t tcna_required_input_length(size_t kernel, const size_t *dilations, size_t len);

// Analytic per-sample MACs of a TCN branch over `snippets` inputs.
//
// # Safety
// `dilations` must point to `num_dilations` values and both outputs must be writable.
enum TcnaStatus tcna_tcn_macs(size_t input_dim,
                              size_t channels,
                              size_t kernel,
                              const size_t *dilations,
                              size_t num_dilations,
                              const size_t *classes,
                              size_t snippets,
                              uint64_t *out_sequence,
                              uint64_t *out_heads);

// Analytic per-sample MACs of the encoder-decoder LSTM baseline.
//
// # Safety
// Both outputs must be writable.
enum TcnaStatus tcna_lstm_macs(size_t input_dim,
                               size_t hidden,
                               size_t decoder_steps,
                               size_t num_classes,
                               size_t snippets,
                               uint64_t *out_sequence,
                               uint64_t *out_heads);

// Loads a branch checkpoint written by `tcna train-branch`.
//
// # Safety
// `path` must be a nul-terminated string and `out` writable.
enum TcnaStatus tcna_branch_load(const char *path, struct TcnaBranch **out);

// Releases a branch handle; null is ignored.
//
// # Safety
// `branch` must come from `tcna_branch_load` and not be used afterwards.
void tcna_branch_free(struct TcnaBranch *branch);

// # Safety
// `branch` must be a live handle and `out` writable.
enum TcnaStatus tcna_branch_info(const struct TcnaBranch *branch, struct TcnaBranchInfo *out);

// Eval-mode logits for `batch` windows laid out `[batch][snippets][input_dim]`.
// Outputs are `[batch][classes]` for the action, verb and noun heads.
//
// # Safety
// `features` must hold `batch * snippets * input_dim` floats and each
// output `batch * classes` floats for its head.
enum TcnaStatus tcna_branch_predict(const struct TcnaBranch *branch,
                                    const float *features,
                                    size_t batch,
                                    size_t snippets,
                                    float *out_action,
                                    float *out_verb,
                                    float *out_noun);

// Loads a fusion checkpoint written by `tcna train-fusion`.
//
// # Safety
// `path` must be a nul-terminated string and `out` writable.
enum TcnaStatus tcna_fusion_load(const char *path, struct TcnaFusion **out);

// Releases a fusion handle; null is ignored.
//
// # Safety
// `fusion` must come from `tcna_fusion_load` and not be used afterwards.
void tcna_fusion_free(struct TcnaFusion *fusion);

// Shape of the rgb, flow and obj branches inside a fusion model.
//
// # Safety
// `fusion` must be a live handle and `out` must hold three records.
enum TcnaStatus tcna_fusion_branch_info(const struct TcnaFusion *fusion,
                                        struct TcnaBranchInfo *out);

// Fused action, verb and noun probabilities, `[batch][classes]` each.
// Inputs are `[batch][snippets][dim]` per modality.
//
// # Safety
// Each input must hold `batch * snippets * dim` floats for its modality
// and each output `batch * classes` floats for its head.
enum TcnaStatus tcna_fusion_predict(const struct TcnaFusion *fusion,
                                    const float *rgb,
                                    const float *flow,
                                    const float *obj,
                                    size_t batch,
                                    size_t snippets,
                                    float *out_action,
                                    float *out_verb,
                                    float *out_noun);

// Fraction of rows whose label is among the `k` highest scores.
//
// # Safety
// `scores` must hold `batch * classes` floats, `labels` `batch` values.
enum TcnaStatus tcna_top_k_accuracy(const float *scores,
                                    size_t batch,
                                    size_t classes,
                                    const size_t *labels,
                                    size_t k,
                                    double *out);

// Per-class top-`k` recall averaged over the classes present in `labels`.
//
// # Safety
// `scores` must hold `batch * classes` floats, `labels` `batch` values.
enum TcnaStatus tcna_class_mean_recall(const float *scores,
                                       size_t batch,
                                       size_t classes,
                                       const size_t *labels,
                                       size_t k,
                                       double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TCNA_H */

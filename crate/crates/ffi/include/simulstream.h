#ifndef SIMULSTREAM_H
#define SIMULSTREAM_H

/* Generated by cbindgen; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum SsStatus {
  SS_STATUS_OK = 0,
  SS_STATUS_NULL_POINTER = 1,
  SS_STATUS_INVALID_ARGUMENT = 2,
  SS_STATUS_IO = 3,
  SS_STATUS_FORMAT = 4,
  SS_STATUS_CONFIG = 5,
  SS_STATUS_SESSION_FINISHED = 6,
  SS_STATUS_PANIC = 7,
  SS_STATUS_INTERNAL = 8,
} SsStatus;

typedef enum SsSessionState {
  SS_SESSION_STATE_RUNNING = 0,
  SS_SESSION_STATE_SOURCE_ENDED = 1,
  SS_SESSION_STATE_FINISHED = 2,
} SsSessionState;

typedef struct SsCodec SsCodec;

typedef struct SsModel SsModel;

typedef struct SsSession SsSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the next failing call.
const char *ss_last_error_message(void);

const char *ss_version(void);

// Load an `RQT1` checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum SsStatus ss_model_load(const char *path, struct SsModel **out);

// # Safety
// `model` must come from `ss_model_load` and not be used afterwards. Null is ignored.
void ss_model_free(struct SsModel *model);

// RVQ levels per audio stream, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
uint32_t ss_model_levels(const struct SsModel *model);

// # Safety
// `model` must be null or a live handle.
uint64_t ss_model_num_parameters(const struct SsModel *model);

// Start a streaming session. `greedy` selects argmax decoding without
// guidance; otherwise the default sampling settings are used with `seed`.
// The session keeps its own reference to the model.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum SsStatus ss_session_new(const struct SsModel *model,
                             bool greedy,
                             uint64_t seed,
                             struct SsSession **out);

// Feed one source frame (`levels` tokens) and receive one output frame:
// a text token and `levels` target audio tokens.
//
// # Safety
// `source` must hold `levels` values and `out_audio` room for `levels` values.
enum SsStatus ss_session_step(struct SsSession *session,
                              const uint16_t *source,
                              uintptr_t levels,
                              uint16_t *out_text,
                              uint16_t *out_audio);

// Signal that the live source has ended; later steps should feed input-EOS frames.
//
// # Safety
// `session` must be a live handle.
enum SsStatus ss_session_end_source(struct SsSession *session);

// Token to feed as every source level once the source has ended.
//
// # Safety
// `session` must be null or a live handle.
uint16_t ss_session_input_eos(const struct SsSession *session);

// # Safety
// `session` must be a live handle and `out` a valid pointer.
enum SsStatus ss_session_state(const struct SsSession *session, enum SsSessionState *out);

// # Safety
// `session` must come from `ss_session_new` and not be used afterwards. Null is ignored.
void ss_session_free(struct SsSession *session);

// Load `RVQ1` codebooks.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum SsStatus ss_codec_load(const char *path, struct SsCodec **out);

// # Safety
// `codec` must come from `ss_codec_load` and not be used afterwards. Null is ignored.
void ss_codec_free(struct SsCodec *codec);

// # Safety
// `codec` must be null or a live handle.
uint32_t ss_codec_levels(const struct SsCodec *codec);

// Quantize `frames × dim` latents (row-major) into `frames × levels` 1-based tokens.
//
// # Safety
// `latents` must hold `frames·dim` values and `out_tokens` room for `out_len` values.
enum SsStatus ss_codec_encode(const struct SsCodec *codec,
                              const float *latents,
                              uintptr_t frames,
                              uintptr_t dim,
                              uint16_t *out_tokens,
                              uintptr_t out_len);

// Length-adaptive average lagging of `n` non-decreasing emission times.
//
// # Safety
// `emit_times` must hold `n` values and `out` be a valid pointer.
enum SsStatus ss_laal(const double *emit_times,
                      uintptr_t n,
                      double source_duration,
                      uintptr_t n_ref,
                      double *out);

// Sentence BLEU (0–100) of two strings after normalization and whitespace tokenization.
//
// # Safety
// Both strings must be NUL-terminated UTF-8 and `out` a valid pointer.
enum SsStatus ss_bleu(const char *hypothesis, const char *reference, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SIMULSTREAM_H */

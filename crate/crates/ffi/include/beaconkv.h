#ifndef BEACONKV_H
#define BEACONKV_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BkvStatus {
  BKV_STATUS_OK = 0,
  BKV_STATUS_NULL_POINTER = 1,
  BKV_STATUS_INVALID_STRING = 2,
  BKV_STATUS_IO = 3,
  BKV_STATUS_FORMAT = 4,
  BKV_STATUS_CONFIG = 5,
  BKV_STATUS_USAGE = 6,
  BKV_STATUS_STATE = 7,
  BKV_STATUS_CONFIG_MISMATCH = 8,
  BKV_STATUS_NUMERIC = 9,
  BKV_STATUS_BUFFER_TOO_SMALL = 10,
  BKV_STATUS_INTERNAL = 11,
} BkvStatus;

// A loaded checkpoint.
typedef struct BkvModel BkvModel;

// A growing compressed context bound to one model.
typedef struct BkvSession BkvSession;

// Message of the last failure on this thread. The pointer stays valid
// until the next failing call on the same thread.
const char *bkv_last_error(void);

// Loads a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum BkvStatus bkv_model_load(const char *path, struct BkvModel **out);

// # Safety
// `model` must come from [`bkv_model_load`] and not be used afterwards.
void bkv_model_free(struct BkvModel *model);

// Chunk size `w` of the model.
//
// # Safety
// Pointers must be valid.
enum BkvStatus bkv_model_chunk_size(const struct BkvModel *model, size_t *out);

// Opens an empty session. `policy` is `N`, `adaptive`, `random:SEED` or a
// comma list of per-chunk ratios.
//
// # Safety
// `model` must be live; the session keeps its own reference, so the model
// may be freed before the session.
enum BkvStatus bkv_session_new(const struct BkvModel *model,
                               const char *policy,
                               struct BkvSession **out);

// # Safety
// `session` must come from [`bkv_session_new`] and not be used afterwards.
void bkv_session_free(struct BkvSession *session);

// Compresses `len` more tokens; `chunks` receives the number of chunks encoded.
//
// # Safety
// `tokens` must hold `len` ids; `chunks` may be null.
enum BkvStatus bkv_session_append(struct BkvSession *session,
                                  const uint32_t *tokens,
                                  size_t len,
                                  size_t *chunks);

// Greedy decoding after `tail`, stopping at `stop` unless it is negative.
// Writes up to `cap` ids to `out` and the count to `out_len`.
//
// # Safety
// `tail` must hold `tail_len` ids and `out` room for `cap` ids.
enum BkvStatus bkv_session_generate(const struct BkvSession *session,
                                    const uint32_t *tail,
                                    size_t tail_len,
                                    size_t max_new,
                                    int64_t stop,
                                    uint32_t *out,
                                    size_t cap,
                                    size_t *out_len);

// Cached entries per layer (`m`).
//
// # Safety
// Pointers must be valid.
enum BkvStatus bkv_session_entries(const struct BkvSession *session, size_t *out);

// Writes the session's cache as a snapshot file.
//
// # Safety
// `path` must be a NUL-terminated string.
enum BkvStatus bkv_session_save(const struct BkvSession *session, const char *path);

// Forward FLOPs of a named preset at length `n` and ratio `alpha`, for
// full attention and for beacon compression.
//
// # Safety
// `preset` must be a NUL-terminated string; outputs must be valid.
enum BkvStatus bkv_flops(const char *preset,
                         uint64_t n,
                         uint64_t alpha,
                         double *full,
                         double *beacon);

// KV entries per layer for full attention and for beacon compression.
//
// # Safety
// Outputs must be valid pointers.
enum BkvStatus bkv_kv_entries(uint64_t n,
                              uint64_t chunk_size,
                              uint64_t alpha,
                              uint64_t *full,
                              uint64_t *beacon);

#endif  /* BEACONKV_H */

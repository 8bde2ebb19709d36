#ifndef NODULENET_H
#define NODULENET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum NnStatus {
  NN_STATUS_OK = 0,
  NN_STATUS_NULL_POINTER = 1,
  NN_STATUS_INVALID_ARGUMENT = 2,
  NN_STATUS_SHAPE = 3,
  NN_STATUS_CONFIG = 4,
  NN_STATUS_DATA = 5,
  NN_STATUS_UNDEFINED_METRIC = 6,
  NN_STATUS_NUMERIC = 7,
  NN_STATUS_FORMAT = 8,
  NN_STATUS_IO = 9,
  NN_STATUS_PANIC = 10,
} NnStatus;

// Opaque network handle.
typedef struct NnNet NnNet;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the message of the last failed call on this thread into `buf`,
// NUL-terminated and truncated to `len` bytes. Returns the full message
// length, excluding the terminator.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t nn_last_error(char *buf, size_t len);

// Creates a freshly initialised network. `config_toml` is a run
// configuration document or null for defaults.
//
// # Safety
// `config_toml` must be null or a NUL-terminated string; `out` must be
// writable.
enum NnStatus nn_net_create(const char *config_toml, struct NnNet **out);

// Loads a weights file written for the network described by
// `config_toml` (null for defaults).
//
// # Safety
// String arguments must be null or NUL-terminated; `out` must be
// writable.
enum NnStatus nn_net_load(const char *path, const char *config_toml, struct NnNet **out);

// # Safety
// `net` must come from this library; `path` must be NUL-terminated.
enum NnStatus nn_net_save(const struct NnNet *net, const char *path);

// Writes the `(z, y, x)` patch extents the network expects.
//
// # Safety
// `net` must come from this library; `out` must hold 3 values.
enum NnStatus nn_net_input_shape(const struct NnNet *net, size_t *out);

// Runs inference on `n` patches stored back to back in `patches`
// (row-major `z, y, x` each). Writes one nodule probability per patch to
// `probs` and the thresholded masks, back to back, to `masks`.
//
// # Safety
// `patches` and `masks` must hold `n * z * y * x` values and `probs`
// must hold `n`.
enum NnStatus nn_net_predict(const struct NnNet *net,
                             const float *patches,
                             size_t n,
                             double seg_threshold,
                             double *probs,
                             uint8_t *masks);

// Releases a handle. Null is ignored.
//
// # Safety
// `net` must be null or come from this library and not be used again.
void nn_net_free(struct NnNet *net);

// Dice overlap of two binary masks of `len` voxels; nonzero is foreground.
//
// # Safety
// `pred` and `truth` must hold `len` bytes; `out` must be writable.
enum NnStatus nn_dice(const uint8_t *pred, const uint8_t *truth, size_t len, double *out);

// Share of true nodules (`labels[i] != 0`) with `scores[i] >= threshold`.
//
// # Safety
// `scores` and `labels` must hold `n` values; `out` must be writable.
enum NnStatus nn_sensitivity(const double *scores,
                             const uint8_t *labels,
                             size_t n,
                             double threshold,
                             double *out);

// Mean FROC sensitivity at 1/8, 1/4, 1/2, 1, 2, 4 and 8 false positives
// per scan.
//
// # Safety
// `scores`, `labels` and `scan_ids` must hold `n` values; `out` must be
// writable.
enum NnStatus nn_froc_score(const double *scores,
                            const uint8_t *labels,
                            const uint32_t *scan_ids,
                            size_t n,
                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NODULENET_H */

/* C interface for the block-sparse attention library. */

#ifndef BATT_H
#define BATT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Success.
#define BATT_OK 0

// A required pointer argument was null.
#define BATT_ERR_NULL 100

// The call panicked; state may be inconsistent.
#define BATT_ERR_PANIC 101

// A mode field held an unknown value.
#define BATT_ERR_ENUM 102

// A path argument was not valid UTF-8.
#define BATT_ERR_PATH 103

// `sort` value: keep token order.
#define BATT_SORT_NONE 0

// `sort` value: reorder query tokens by norm.
#define BATT_SORT_Q 1

// `sort` value: reorder key tokens by norm.
#define BATT_SORT_K 2

// `sort` value: reorder both query and key tokens by norm.
#define BATT_SORT_QK 3

// `comp` value: raw block logits.
#define BATT_COMP_NONE 0

// `comp` value: exact covariance-trace correction.
#define BATT_COMP_EXACT 1

// `comp` value: diagonal covariance correction.
#define BATT_COMP_DIAG 2

// `dist` value: Gaussian tokens with a linear amplitude ramp.
#define BATT_DIST_GAUSSIAN 0

// `dist` value: lognormal-scaled unit directions.
#define BATT_DIST_HEAVY 1

// Opaque row-major matrix of finite doubles.
typedef struct BattTensor BattTensor;

// Run settings; see `batt_config_default` for the defaults. The `sort`,
// `comp`, and `dist` fields take the `BATT_SORT_*`, `BATT_COMP_*`, and
// `BATT_DIST_*` values.
typedef struct BattConfig {
  size_t seq_len;
  size_t dim;
  size_t heads;
  size_t block_size;
  double density;
  double beta;
  int32_t sort;
  int32_t comp;
  // 0 disables windowed sorting; otherwise the window length.
  size_t sort_window;
  int32_t dist;
  uint64_t seed;
  size_t dense_cap;
} BattConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent error on this thread, or null if none.
// The pointer stays valid until the next failing call on this thread.
const char *batt_last_error_message(void);

// Library version as a static string.
const char *batt_version(void);

// Frees a string returned by this library. Null is ignored.
//
// # Safety
// `s` must be a pointer returned by a `batt_` function that documents
// this deallocator, and must not be used afterwards.
void batt_string_free(char *s);

// Builds a tensor from a row-major buffer of `rows * cols` doubles.
//
// # Safety
// `data` must point to `rows * cols` readable doubles and `out` to a
// writable pointer slot.
int32_t batt_tensor_new(size_t rows, size_t cols, const double *data, struct BattTensor **out);

// Frees a tensor. Null is ignored.
//
// # Safety
// `t` must be a pointer returned by this library and must not be used
// afterwards.
void batt_tensor_free(struct BattTensor *t);

// Row count, or 0 when `t` is null.
//
// # Safety
// `t` must be null or a live tensor handle.
size_t batt_tensor_rows(const struct BattTensor *t);

// Column count, or 0 when `t` is null.
//
// # Safety
// `t` must be null or a live tensor handle.
size_t batt_tensor_cols(const struct BattTensor *t);

// Pointer to the tensor's row-major data, valid while the handle lives.
// Null when `t` is null.
//
// # Safety
// `t` must be null or a live tensor handle.
const double *batt_tensor_data(const struct BattTensor *t);

// Reads a tensor file written in the library's binary format.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable slot.
int32_t batt_tensor_read(const char *path, struct BattTensor **out);

// Writes a tensor file in the library's binary format.
//
// # Safety
// `path` must be a NUL-terminated string and `t` a live tensor handle.
int32_t batt_tensor_write(const char *path, const struct BattTensor *t);

// Fills `out` with the default configuration.
//
// # Safety
// `out` must point to writable `BattConfig` storage.
int32_t batt_config_default(struct BattConfig *out);

// Runs pattern selection and block-sparse attention on the given Q, K, V
// and stores the output matrix in `out`. Only `block_size`, `density`,
// `beta`, `sort`, `comp`, and `sort_window` are read from the config.
//
// # Safety
// `q`, `k`, `v` must be live tensor handles and `out` a writable slot.
int32_t batt_attend(const struct BattTensor *q,
                    const struct BattTensor *k,
                    const struct BattTensor *v,
                    const struct BattConfig *config,
                    struct BattTensor **out);

// Runs the full seeded pipeline for `config` and stores the JSON report
// in `out_json`. Free the string with `batt_string_free`.
//
// # Safety
// `config` must point to a `BattConfig` and `out_json` to a writable
// pointer slot.
int32_t batt_run_json(const struct BattConfig *config, char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BATT_H */

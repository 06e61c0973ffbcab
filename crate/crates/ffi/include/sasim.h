#ifndef SASIM_H
#define SASIM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SasimStatus {
  SASIM_STATUS_OK = 0,
  SASIM_STATUS_NULL_POINTER = 1,
  SASIM_STATUS_INVALID_ARGUMENT = 2,
  SASIM_STATUS_IO = 3,
  SASIM_STATUS_FORMAT = 4,
  SASIM_STATUS_PROGRAM_INVALID = 5,
  SASIM_STATUS_SHAPE = 6,
  SASIM_STATUS_OVERFLOW = 7,
  SASIM_STATUS_COMPILE = 8,
  SASIM_STATUS_BUFFER_TOO_SMALL = 9,
  SASIM_STATUS_VOTE_COUNT = 10,
  SASIM_STATUS_PANIC = 11,
} SasimStatus;

// Opaque compiled program.
typedef struct SasimProgram SasimProgram;

// Cycle accounting of one inference.
typedef struct SasimCycles {
  uint64_t total_cycles;
  uint64_t reg_load_cycles;
  uint64_t mac_cycles;
  uint64_t writeback_cycles;
  uint64_t dense_macs;
  uint64_t actual_macs;
  uint64_t active_units;
  uint64_t freq_hz;
  double latency_s;
  double raw_gops;
  double effective_gops;
} SasimCycles;

// One six-recording vote. `verdict` is 0 for VA, 1 for non-VA.
typedef struct SasimDiagnosis {
  uint32_t verdict;
  uint32_t votes_va;
  uint32_t votes_nonva;
} SasimDiagnosis;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version, a static NUL-terminated string.
const char *sasim_version(void);

// Message of the last failed call on this thread; empty after success.
const char *sasim_last_error(void);

// Loads a program file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum SasimStatus sasim_program_load(const char *path, struct SasimProgram **out);

// Parses a program from its binary form.
//
// # Safety
// `data` must point to `len` readable bytes and `out` be a valid pointer.
enum SasimStatus sasim_program_from_bytes(const uint8_t *data,
                                          size_t len,
                                          struct SasimProgram **out);

// Compiles a model (JSON description plus weight blob) on the default
// array, calibrating on synthetic inputs drawn from `seed`.
//
// # Safety
// Both paths must be NUL-terminated strings and `out` a valid pointer.
enum SasimStatus sasim_program_compile(const char *model_path,
                                       const char *weights_path,
                                       double sparsity,
                                       uint64_t seed,
                                       struct SasimProgram **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `prog` must come from this library and not be used afterwards.
void sasim_program_free(struct SasimProgram *prog);

// Number of input elements, 0 for a null handle.
//
// # Safety
// `prog` must be null or a live handle.
size_t sasim_program_input_len(const struct SasimProgram *prog);

// Number of output elements, 0 for a null handle.
//
// # Safety
// `prog` must be null or a live handle.
size_t sasim_program_output_len(const struct SasimProgram *prog);

// Calibrated input scale exponent, 0 for a null handle.
//
// # Safety
// `prog` must be null or a live handle.
int32_t sasim_program_input_scale_exp(const struct SasimProgram *prog);

// Runs one inference on 8-bit input values at `2^input_scale_exp`.
// `out_scale_exp` and `cycles` may be null.
//
// # Safety
// Buffers must hold the stated number of elements; `prog` must be live.
enum SasimStatus sasim_program_run(const struct SasimProgram *prog,
                                   const int8_t *input,
                                   size_t input_len,
                                   int32_t input_scale_exp,
                                   int8_t *output,
                                   size_t output_len,
                                   int32_t *out_scale_exp,
                                   struct SasimCycles *cycles);

// Filters, infers and votes over `n_samples` 16-bit samples, a multiple
// of six 512-sample recordings. Writes one diagnosis per six recordings
// into `out` (capacity `out_cap`) and their count into `written`.
//
// # Safety
// `samples` must hold `n_samples` values, `out` `out_cap` entries.
enum SasimStatus sasim_diagnose(const struct SasimProgram *prog,
                                const int16_t *samples,
                                size_t n_samples,
                                struct SasimDiagnosis *out,
                                size_t out_cap,
                                size_t *written);

// Bit-serial signed product of an activation and a `bits`-wide weight.
//
// # Safety
// `out` must be a valid pointer.
enum SasimStatus sasim_cmul(int8_t activation, int32_t weight, uint32_t bits, int32_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SASIM_H */

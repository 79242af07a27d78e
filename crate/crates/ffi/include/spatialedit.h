#ifndef SPATIALEDIT_H
#define SPATIALEDIT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SeStatus {
  SE_STATUS_OK = 0,
  SE_STATUS_NULL_POINTER = 1,
  // Bad argument or configuration: wrong sizes, bad prompt ids, a
  // checkpoint without editing modules.
  SE_STATUS_INVALID_ARGUMENT = 2,
  SE_STATUS_IO = 3,
  // Checkpoint or dataset bytes failed validation.
  SE_STATUS_CORRUPT = 4,
  // The computation failed, e.g. a non-finite sampler state.
  SE_STATUS_RUNTIME = 5,
  SE_STATUS_PANIC = 6,
} SeStatus;

// Opaque handle to a loaded editing model.
typedef struct SeModel SeModel;

typedef struct SeModelInfo {
  uint32_t image_size;
  uint32_t channels;
  uint32_t frames_max;
  uint32_t prompt_len;
  uint32_t vocab;
} SeModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer is
// valid until the next call into this library on the same thread.
const char *se_last_error(void);

// Library version as a static NUL-terminated string.
const char *se_version(void);

// Loads an editing checkpoint. On success `*out` owns a handle that must be
// released with [`se_model_free`].
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum SeStatus se_model_load(const char *path, struct SeModel **out);

// Releases a handle from [`se_model_load`]. Null is ignored.
//
// # Safety
// `model` must come from [`se_model_load`] and not have been freed.
void se_model_free(struct SeModel *model);

// # Safety
// `model` must be a live handle and `info` a valid pointer.
enum SeStatus se_model_info(const struct SeModel *model, struct SeModelInfo *info);

// Edits one clip. `source` and `out` hold `frames × channels × size × size`
// floats in `[0, 1]`, frame-major then channel-major. Prompts are token ids
// with no padding. The result depends only on the inputs, `steps` and
// `seed`.
//
// # Safety
// All pointers must be valid for the stated lengths; `out` must not alias
// `source`.
enum SeStatus se_model_edit(const struct SeModel *model,
                            const float *source,
                            uintptr_t frames,
                            const uint16_t *source_prompt,
                            uintptr_t source_prompt_len,
                            const uint16_t *edit_prompt,
                            uintptr_t edit_prompt_len,
                            uint32_t steps,
                            uint64_t seed,
                            float *out,
                            uintptr_t out_len);

// Generates the synthetic corpus for `seed` and writes it to `dir`.
//
// # Safety
// `dir` must be a NUL-terminated string.
enum SeStatus se_dataset_generate(const char *dir,
                                  uint64_t seed,
                                  uintptr_t train_pairs,
                                  uintptr_t test_pairs,
                                  uintptr_t clips,
                                  uintptr_t heldout_clips);

// Runs the finite-difference gradient suite. `*passed` is set to 1 when
// every check is within tolerance.
//
// # Safety
// `passed` must be a valid pointer.
enum SeStatus se_gradcheck(uint64_t seed, uint8_t *passed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPATIALEDIT_H */

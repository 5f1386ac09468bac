#ifndef EVENHANCER_H
#define EVENHANCER_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EvStatus {
  EV_STATUS_OK = 0,
  EV_STATUS_NULL_POINTER = 1,
  EV_STATUS_INVALID_CONFIG = 2,
  EV_STATUS_INVALID_EVENT = 3,
  EV_STATUS_SHAPE = 4,
  EV_STATUS_RANGE = 5,
  EV_STATUS_PARSE = 6,
  EV_STATUS_IO = 7,
  EV_STATUS_IMAGE = 8,
  EV_STATUS_NON_FINITE = 9,
  EV_STATUS_CHECK_FAILED = 10,
  EV_STATUS_INVALID_UTF8 = 11,
  EV_STATUS_PANIC = 12,
} EvStatus;

/*
 A list of rendered frames.
 */
typedef struct EvFrames EvFrames;

/*
 A loaded network and its weights.
 */
typedef struct EvModel EvModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or null. The pointer stays
 valid until the next status-returning call on the same thread.
 */
const char *ev_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *ev_version(void);

/*
 Load a checkpoint file into a new model handle stored in `*out`.
 */
enum EvStatus ev_model_load(const char *path, struct EvModel **out);

void ev_model_free(struct EvModel *model);

/*
 Event segment count `M` the model expects; 0 for a null handle.
 */
size_t ev_model_segments(const struct EvModel *model);

/*
 Accumulate `n` events into an `(m + 1) x height x width` voxel grid written
 to `out`, which must hold `out_len` doubles.
 */
enum EvStatus ev_voxelize(const double *t,
                          const uint32_t *x,
                          const uint32_t *y,
                          const int8_t *p,
                          size_t n,
                          size_t height,
                          size_t width,
                          size_t m,
                          double *out,
                          size_t out_len);

/*
 Render frames at scale `s` for `n_times` target times between `frame0` and
 `frame1` (each `height x width x 3`), guided by `n_events` events at the
 input resolution. The result handle is stored in `*out`.
 */
enum EvStatus ev_model_infer(const struct EvModel *model,
                             const double *frame0,
                             const double *frame1,
                             size_t height,
                             size_t width,
                             const double *t,
                             const uint32_t *x,
                             const uint32_t *y,
                             const int8_t *p,
                             size_t n_events,
                             double s,
                             const double *times,
                             size_t n_times,
                             struct EvFrames **out);

void ev_frames_free(struct EvFrames *frames);

/*
 Number of frames; 0 for a null handle.
 */
size_t ev_frames_count(const struct EvFrames *frames);

/*
 Size of frame `index`.
 */
enum EvStatus ev_frames_size(const struct EvFrames *frames,
                             size_t index,
                             size_t *height,
                             size_t *width);

/*
 Copy frame `index` into `out`, which must hold exactly `height * width * 3`
 doubles.
 */
enum EvStatus ev_frames_copy(const struct EvFrames *frames,
                             size_t index,
                             double *out,
                             size_t out_len);

/*
 Run the built-in oracle checks. Writes the pass and total counts when the
 pointers are non-null; returns `CheckFailed` if any check fails.
 */
enum EvStatus ev_selftest(size_t *passed, size_t *total);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EVENHANCER_H */

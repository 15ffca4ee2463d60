#ifndef XRMBT_H
#define XRMBT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every entry point.
 */
typedef enum {
  XRMBT_STATUS_OK = 0,
  XRMBT_STATUS_NULL_POINTER = 1,
  XRMBT_STATUS_INVALID_ARGUMENT = 2,
  XRMBT_STATUS_CONFIG = 3,
  XRMBT_STATUS_NUMERICAL = 4,
  XRMBT_STATUS_IO = 5,
  XRMBT_STATUS_FORMAT = 6,
  XRMBT_STATUS_SKELETON_MISMATCH = 7,
  XRMBT_STATUS_BUFFER_TOO_SMALL = 8,
  XRMBT_STATUS_PANIC = 9,
} XrmbtStatus;

/**
 * A trained model bound to the built-in 22-joint skeleton.
 */
typedef struct XrmbtModel XrmbtModel;

/**
 * A loaded sequence.
 */
typedef struct XrmbtSequence XrmbtSequence;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *xrmbt_version(void);

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call on the same thread.
 */
const char *xrmbt_last_error(void);

XrmbtStatus xrmbt_sequence_load(const char *path, XrmbtSequence **out);

void xrmbt_sequence_free(XrmbtSequence *seq);

XrmbtStatus xrmbt_sequence_frames(const XrmbtSequence *seq, uintptr_t *out);

XrmbtStatus xrmbt_sequence_points(const XrmbtSequence *seq, uintptr_t *out);

/**
 * Copies frame `frame`'s sensor-frame points, `3 * points` floats, into `buf`.
 */
XrmbtStatus xrmbt_sequence_cloud(const XrmbtSequence *seq,
                                 uintptr_t frame,
                                 float *buf,
                                 uintptr_t len);

/**
 * Loads a checkpoint trained on the built-in skeleton.
 */
XrmbtStatus xrmbt_model_load(const char *path, XrmbtModel **out);

/**
 * A parameter-free model that returns the synthesis stage unchanged.
 */
XrmbtStatus xrmbt_model_synthesis_only(XrmbtModel **out);

void xrmbt_model_free(XrmbtModel *model);

XrmbtStatus xrmbt_model_joints(const XrmbtModel *model, uintptr_t *out);

/**
 * Predicted world joint positions in meters, `frames * joints * 3` floats
 * laid out frame-major. Uses the sequence's stored synthesis when present,
 * otherwise the noisy oracle seeded by `seed`.
 */
XrmbtStatus xrmbt_predict_positions(const XrmbtModel *model,
                                    const XrmbtSequence *seq,
                                    uint64_t seed,
                                    float *buf,
                                    uintptr_t len);

/**
 * Mean per-joint position error in centimeters between two
 * `frames * joints * 3` position buffers.
 */
XrmbtStatus xrmbt_mpjpe(const float *pred,
                        const float *gt,
                        uintptr_t frames,
                        uintptr_t joints,
                        double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* XRMBT_H */

#ifndef SINGQA_H
#define SINGQA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Number of bins in a pitch histogram.
#define SINGQA_HISTOGRAM_BINS 120

// Result code returned by every fallible call.
typedef enum {
  SINGQA_STATUS_OK = 0,
  SINGQA_STATUS_NULL_POINTER = 1,
  SINGQA_STATUS_INVALID_ARGUMENT = 2,
  SINGQA_STATUS_IO = 3,
  SINGQA_STATUS_FORMAT = 4,
  SINGQA_STATUS_DIMENSION_MISMATCH = 5,
  SINGQA_STATUS_MISSING_INPUT = 6,
  SINGQA_STATUS_STALE_MODEL = 7,
  SINGQA_STATUS_PANIC = 8,
} SingqaStatus;

typedef enum {
  // Divide by the number of voiced frames.
  SINGQA_HISTOGRAM_NORM_VOICED = 0,
  // Divide by the total number of frames.
  SINGQA_HISTOGRAM_NORM_ALL = 1,
} SingqaHistogramNorm;

typedef enum {
  SINGQA_FEATURE_KIND_EMBEDDING = 0,
  SINGQA_FEATURE_KIND_SPECTRAL = 1,
  SINGQA_FEATURE_KIND_PITCH = 2,
} SingqaFeatureKind;

typedef struct SingqaFeatures SingqaFeatures;

// A single head (optionally bias corrected) or a fusion of heads.
typedef struct SingqaModel SingqaModel;

typedef struct SingqaPitchTrack SingqaPitchTrack;

// Utterance- and system-level metrics. Undefined correlations are NaN.
typedef struct {
  double utt_mse;
  double utt_lcc;
  double utt_srcc;
  double utt_ktau;
  double sys_mse;
  double sys_lcc;
  double sys_srcc;
  double sys_ktau;
  size_t n_utterances;
  size_t n_systems;
} SingqaMetricReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *singqa_version(void);

// Message for the most recent failure on this thread, or NULL if none.
// Valid until the next failing call on the same thread.
const char *singqa_last_error_message(void);

// Static description of a status code.
const char *singqa_status_name(SingqaStatus status);

// Cents relative to A4 = 440 Hz.
//
// # Safety
// `out` must be valid for writes.
SingqaStatus singqa_hz_to_cent(double f_hz, double *out);

// Octave-folded pitch coordinate in [0, 120).
//
// # Safety
// `out` must be valid for writes.
SingqaStatus singqa_fold_to_octave(double f_cent, double *out);

// Builds a pitch track from per-frame f0 (Hz, 0 when unvoiced) and voicing flags.
//
// # Safety
// `f0_hz` and `voiced` must point to `len` readable elements; `out` must be valid for writes.
SingqaStatus singqa_pitch_track_new(const double *f0_hz,
                                    const uint8_t *voiced,
                                    size_t len,
                                    double frame_shift,
                                    SingqaPitchTrack **out);

// Reads a pitch track written by `singqa extract-pitch`.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be valid for writes.
SingqaStatus singqa_pitch_track_read(const char *path, SingqaPitchTrack **out);

// Tracks f0 in a WAV file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be valid for writes.
SingqaStatus singqa_pitch_track_from_wav(const char *path,
                                         double frame_shift,
                                         double f0_min,
                                         double f0_max,
                                         SingqaPitchTrack **out);

// Number of frames, or 0 for a NULL handle.
//
// # Safety
// `track` must be NULL or a live handle.
size_t singqa_pitch_track_len(const SingqaPitchTrack *track);

// Copies the track into caller buffers of `capacity` elements; either buffer may be NULL.
//
// # Safety
// `track` must be a live handle; non-NULL buffers must hold `capacity` elements.
SingqaStatus singqa_pitch_track_copy(const SingqaPitchTrack *track,
                                     double *f0_hz,
                                     uint8_t *voiced,
                                     size_t capacity);

// # Safety
// `track` must be NULL or a handle not yet freed.
void singqa_pitch_track_free(SingqaPitchTrack *track);

// Fills `bins_out` with the 120-bin octave-folded histogram.
// `voiced_frames_out` may be NULL.
//
// # Safety
// `track` must be a live handle; `bins_out` must hold `SINGQA_HISTOGRAM_BINS` doubles.
SingqaStatus singqa_pitch_histogram(const SingqaPitchTrack *track,
                                    SingqaHistogramNorm norm,
                                    double *bins_out,
                                    size_t *voiced_frames_out);

// Negative entropy (nats) of a histogram, renormalized to sum to one.
//
// # Safety
// `bins` must hold `SINGQA_HISTOGRAM_BINS` doubles; `out` must be valid for writes.
SingqaStatus singqa_histogram_sharpness(const double *bins, double *out);

// Copies `frames * dims` row-major values into a new feature sequence.
//
// # Safety
// `data` must point to `frames * dims` floats; `out` must be valid for writes.
SingqaStatus singqa_features_new(const float *data,
                                 size_t frames,
                                 size_t dims,
                                 double frame_shift,
                                 SingqaFeatureKind kind,
                                 SingqaFeatures **out);

// # Safety
// `path` must be a NUL-terminated string; `out` must be valid for writes.
SingqaStatus singqa_features_read(const char *path, SingqaFeatures **out);

// # Safety
// `seq` must be a live handle; `path` must be a NUL-terminated string.
SingqaStatus singqa_features_write(const SingqaFeatures *seq, const char *path);

// # Safety
// `seq` must be NULL or a live handle.
size_t singqa_features_frames(const SingqaFeatures *seq);

// # Safety
// `seq` must be NULL or a live handle.
size_t singqa_features_dims(const SingqaFeatures *seq);

// Frame shift in seconds, or NaN for a NULL handle.
//
// # Safety
// `seq` must be NULL or a live handle.
double singqa_features_frame_shift(const SingqaFeatures *seq);

// # Safety
// `seq` and `out` must be valid.
SingqaStatus singqa_features_kind(const SingqaFeatures *seq, SingqaFeatureKind *out);

// Row-major values, borrowed from the handle; NULL for a NULL handle.
//
// # Safety
// `seq` must be NULL or a live handle. The pointer dies with the handle.
const float *singqa_features_data(const SingqaFeatures *seq);

// # Safety
// `seq` must be NULL or a handle not yet freed.
void singqa_features_free(SingqaFeatures *seq);

// Metrics over `n` utterances; `system_ids` holds `n` NUL-terminated strings.
//
// # Safety
// All arrays must hold `n` elements; `out` must be valid for writes.
SingqaStatus singqa_metrics_report(const double *pred,
                                   const double *label,
                                   const char *const *system_ids,
                                   size_t n,
                                   SingqaMetricReport *out);

// Loads a head model or a fusion file (members are digest-checked).
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be valid for writes.
SingqaStatus singqa_model_load(const char *path, SingqaModel **out);

// 1 for a single head, k for a fusion; 0 for a NULL handle.
//
// # Safety
// `model` must be NULL or a live handle.
size_t singqa_model_member_count(const SingqaModel *model);

// Embedding dimension expected by the model, 0 for a NULL handle.
//
// # Safety
// `model` must be NULL or a live handle.
size_t singqa_model_embedding_dim(const SingqaModel *model);

// Unclamped MOS for one utterance. `pitch` and `spectral` may be NULL when
// no member of the model needs them.
//
// # Safety
// Handles must be NULL or live; `out` must be valid for writes.
SingqaStatus singqa_model_score(const SingqaModel *model,
                                const SingqaFeatures *embedding,
                                const SingqaPitchTrack *pitch,
                                const SingqaFeatures *spectral,
                                double *out);

// Clamps a raw score to the MOS range [1, 5].
double singqa_clamp_mos(double score);

// # Safety
// `model` must be NULL or a handle not yet freed.
void singqa_model_free(SingqaModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SINGQA_H */

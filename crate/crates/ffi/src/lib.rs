//! C ABI for singqa.
//!
//! Every fallible function returns a [`SingqaStatus`] and writes its result
//! through an out-pointer. On failure the thread-local message from
//! [`singqa_last_error_message`] describes what went wrong. Handles are
//! opaque; each `*_new`, `*_read` or `*_load` has a matching `*_free`.

use std::ffi::{c_char, CStr};
use std::path::PathBuf;

use singqa::features::{self, FeatureKind, FeatureSequence};
use singqa::heads::UtteranceFeatures;
use singqa::metrics;
use singqa::pipeline::{self, Predictor};
use singqa::pitch::{self, HistogramNorm, PitchHistogram, PitchTrack, NUM_BINS};

mod status;

pub use status::SingqaStatus;
use status::{guard, Failure};

/// Number of bins in a pitch histogram.
pub const SINGQA_HISTOGRAM_BINS: usize = 120;
const _: () = assert!(SINGQA_HISTOGRAM_BINS == NUM_BINS);

pub struct SingqaFeatures(FeatureSequence);

pub struct SingqaPitchTrack(PitchTrack);

/// A single head (optionally bias corrected) or a fusion of heads.
pub struct SingqaModel(Predictor);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SingqaFeatureKind {
    Embedding = 0,
    Spectral = 1,
    Pitch = 2,
}

impl From<SingqaFeatureKind> for FeatureKind {
    fn from(k: SingqaFeatureKind) -> Self {
        match k {
            SingqaFeatureKind::Embedding => FeatureKind::Embedding,
            SingqaFeatureKind::Spectral => FeatureKind::Spectral,
            SingqaFeatureKind::Pitch => FeatureKind::Pitch,
        }
    }
}

impl From<FeatureKind> for SingqaFeatureKind {
    fn from(k: FeatureKind) -> Self {
        match k {
            FeatureKind::Embedding => SingqaFeatureKind::Embedding,
            FeatureKind::Spectral => SingqaFeatureKind::Spectral,
            FeatureKind::Pitch => SingqaFeatureKind::Pitch,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SingqaHistogramNorm {
    /// Divide by the number of voiced frames.
    Voiced = 0,
    /// Divide by the total number of frames.
    All = 1,
}

impl From<SingqaHistogramNorm> for HistogramNorm {
    fn from(n: SingqaHistogramNorm) -> Self {
        match n {
            SingqaHistogramNorm::Voiced => HistogramNorm::Voiced,
            SingqaHistogramNorm::All => HistogramNorm::All,
        }
    }
}

/// Utterance- and system-level metrics. Undefined correlations are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SingqaMetricReport {
    pub utt_mse: f64,
    pub utt_lcc: f64,
    pub utt_srcc: f64,
    pub utt_ktau: f64,
    pub sys_mse: f64,
    pub sys_lcc: f64,
    pub sys_srcc: f64,
    pub sys_ktau: f64,
    pub n_utterances: usize,
    pub n_systems: usize,
}

unsafe fn out_ref<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut().ok_or_else(|| Failure::null(what))
}

unsafe fn handle<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, Failure> {
    ptr.as_ref().ok_or_else(|| Failure::null(what))
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(Failure::null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn text<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(Failure::null(what));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Failure::invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn path(ptr: *const c_char) -> Result<PathBuf, Failure> {
    text(ptr, "path").map(PathBuf::from)
}

fn release<T>(ptr: *mut T) {
    if !ptr.is_null() {
        // SAFETY: handles are only created by Box::into_raw in this crate
        drop(unsafe { Box::from_raw(ptr) });
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn singqa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the most recent failure on this thread, or NULL if none.
/// Valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn singqa_last_error_message() -> *const c_char {
    status::last_error_ptr()
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn singqa_status_name(status: SingqaStatus) -> *const c_char {
    let name = match status {
        SingqaStatus::Ok => "ok\0",
        SingqaStatus::NullPointer => "null pointer\0",
        SingqaStatus::InvalidArgument => "invalid argument\0",
        SingqaStatus::Io => "i/o error\0",
        SingqaStatus::Format => "format error\0",
        SingqaStatus::DimensionMismatch => "dimension mismatch\0",
        SingqaStatus::MissingInput => "missing input\0",
        SingqaStatus::StaleModel => "stale model\0",
        SingqaStatus::Panic => "internal panic\0",
    };
    debug_assert_eq!(&name[..name.len() - 1], status.name());
    name.as_ptr().cast()
}

/// Cents relative to A4 = 440 Hz.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn singqa_hz_to_cent(f_hz: f64, out: *mut f64) -> SingqaStatus {
    guard(|| {
        *out_ref(out, "out")? = pitch::hz_to_cent(f_hz)?;
        Ok(())
    })
}

/// Octave-folded pitch coordinate in [0, 120).
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn singqa_fold_to_octave(f_cent: f64, out: *mut f64) -> SingqaStatus {
    guard(|| {
        *out_ref(out, "out")? = pitch::fold_to_octave(f_cent)?;
        Ok(())
    })
}

/// Builds a pitch track from per-frame f0 (Hz, 0 when unvoiced) and voicing flags.
///
/// # Safety
/// `f0_hz` and `voiced` must point to `len` readable elements; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn singqa_pitch_track_new(
    f0_hz: *const f64,
    voiced: *const u8,
    len: usize,
    frame_shift: f64,
    out: *mut *mut SingqaPitchTrack,
) -> SingqaStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let f0 = slice(f0_hz, len, "f0_hz")?.to_vec();
        let voiced = slice(voiced, len, "voiced")?
            .iter()
            .map(|&v| v != 0)
            .collect();
        let track = PitchTrack::new(f0, voiced, frame_shift)?;
        *out = Box::into_raw(Box::new(SingqaPitchTrack(track)));
        Ok(())
    })
}

/// Reads a pitch track written by `singqa extract-pitch`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn singqa_pitch_track_read(
    path: *const c_char,
    out: *mut *mut SingqaPitchTrack,
) -> SingqaStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let track = pipeline::read_pitch_track(&self::path(path)?)?;
        *out = Box::into_raw(Box::new(SingqaPitchTrack(track)));
        Ok(())
    })
}

/// Tracks f0 in a WAV file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn singqa_pitch_track_from_wav(
    path: *const c_char,
    frame_shift: f64,
    f0_min: f64,
    f0_max: f64,
    out: *mut *mut SingqaPitchTrack,
) -> SingqaStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let clip = singqa::audio::read_wav(self::path(path)?)?;
        let track = pitch::track_pitch(&clip, frame_shift, f0_min, f0_max)?;
        *out = Box::into_raw(Box::new(SingqaPitchTrack(track)));
        Ok(())
    })
}

/// Number of frames, or 0 for a NULL handle.
///
/// # Safety
/// `track` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn singqa_pitch_track_len(track: *const SingqaPitchTrack) -> usize {
    track.as_ref().map_or(0, |t| t.0.len())
}

/// Copies the track into caller buffers of `capacity` elements; either buffer may be NULL.
///
/// # Safety
/// `track` must be a live handle; non-NULL buffers must hold `capacity` elements.
#[no_mangle]
pub unsafe extern "C" fn singqa_pitch_track_copy(
    track: *const SingqaPitchTrack,
    f0_hz: *mut f64,
    voiced: *mut u8,
    capacity: usize,
) -> SingqaStatus {
    guard(|| {
        let t = &handle(track, "track")?.0;
        if capacity < t.len() {
            return Err(Failure::invalid(format!(
                "buffer holds {capacity} frames, track has {}",
                t.len()
            )));
        }
        if !f0_hz.is_null() {
            std::slice::from_raw_parts_mut(f0_hz, t.len()).copy_from_slice(t.f0_hz());
        }
        if !voiced.is_null() {
            let dst = std::slice::from_raw_parts_mut(voiced, t.len());
            for (d, &v) in dst.iter_mut().zip(t.voiced()) {
                *d = u8::from(v);
            }
        }
        Ok(())
    })
}

/// # Safety
/// `track` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn singqa_pitch_track_free(track: *mut SingqaPitchTrack) {
    release(track);
}

/// Fills `bins_out` with the 120-bin octave-folded histogram.
/// `voiced_frames_out` may be NULL.
///
/// # Safety
/// `track` must be a live handle; `bins_out` must hold `SINGQA_HISTOGRAM_BINS` doubles.
#[no_mangle]
pub unsafe extern "C" fn singqa_pitch_histogram(
    track: *const SingqaPitchTrack,
    norm: SingqaHistogramNorm,
    bins_out: *mut f64,
    voiced_frames_out: *mut usize,
) -> SingqaStatus {
    guard(|| {
        let t = &handle(track, "track")?.0;
        if bins_out.is_null() {
            return Err(Failure::null("bins_out"));
        }
        let hist = pitch::compute_histogram(t, norm.into());
        std::slice::from_raw_parts_mut(bins_out, NUM_BINS).copy_from_slice(&hist.bins);
        if let Some(v) = voiced_frames_out.as_mut() {
            *v = hist.voiced_frames;
        }
        Ok(())
    })
}

/// Negative entropy (nats) of a histogram, renormalized to sum to one.
///
/// # Safety
/// `bins` must hold `SINGQA_HISTOGRAM_BINS` doubles; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn singqa_histogram_sharpness(
    bins: *const f64,
    out: *mut f64,
) -> SingqaStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let src = slice(bins, NUM_BINS, "bins")?;
        if src.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(Failure::invalid(
                "histogram bins must be finite and non-negative",
            ));
        }
        let mut hist = PitchHistogram {
            bins: [0.0; NUM_BINS],
            voiced_frames: 0,
            total_frames: 0,
        };
        hist.bins.copy_from_slice(src);
        *out = pitch::histogram_sharpness(&hist)?;
        Ok(())
    })
}

/// Copies `frames * dims` row-major values into a new feature sequence.
///
/// # Safety
/// `data` must point to `frames * dims` floats; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn singqa_features_new(
    data: *const f32,
    frames: usize,
    dims: usize,
    frame_shift: f64,
    kind: SingqaFeatureKind,
    out: *mut *mut SingqaFeatures,
) -> SingqaStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let len = frames
            .checked_mul(dims)
            .ok_or_else(|| Failure::invalid("frames * dims overflows"))?;
        let values = slice(data, len, "data")?.to_vec();
        let seq = FeatureSequence::new(values, frames, dims, frame_shift, kind.into())?;
        *out = Box::into_raw(Box::new(SingqaFeatures(seq)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn singqa_features_read(
    path: *const c_char,
    out: *mut *mut SingqaFeatures,
) -> SingqaStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let seq = features::read_feature_file(self::path(path)?)?;
        *out = Box::into_raw(Box::new(SingqaFeatures(seq)));
        Ok(())
    })
}

/// # Safety
/// `seq` must be a live handle; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn singqa_features_write(
    seq: *const SingqaFeatures,
    path: *const c_char,
) -> SingqaStatus {
    guard(|| {
        let seq = &handle(seq, "features")?.0;
        features::write_feature_file(seq, self::path(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `seq` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn singqa_features_frames(seq: *const SingqaFeatures) -> usize {
    seq.as_ref().map_or(0, |s| s.0.frames())
}

/// # Safety
/// `seq` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn singqa_features_dims(seq: *const SingqaFeatures) -> usize {
    seq.as_ref().map_or(0, |s| s.0.dims())
}

/// Frame shift in seconds, or NaN for a NULL handle.
///
/// # Safety
/// `seq` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn singqa_features_frame_shift(seq: *const SingqaFeatures) -> f64 {
    seq.as_ref().map_or(f64::NAN, |s| s.0.frame_shift())
}

/// # Safety
/// `seq` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn singqa_features_kind(
    seq: *const SingqaFeatures,
    out: *mut SingqaFeatureKind,
) -> SingqaStatus {
    guard(|| {
        *out_ref(out, "out")? = handle(seq, "features")?.0.kind().into();
        Ok(())
    })
}

/// Row-major values, borrowed from the handle; NULL for a NULL handle.
///
/// # Safety
/// `seq` must be NULL or a live handle. The pointer dies with the handle.
#[no_mangle]
pub unsafe extern "C" fn singqa_features_data(seq: *const SingqaFeatures) -> *const f32 {
    seq.as_ref()
        .map_or(std::ptr::null(), |s| s.0.data().as_ptr())
}

/// # Safety
/// `seq` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn singqa_features_free(seq: *mut SingqaFeatures) {
    release(seq);
}

/// Metrics over `n` utterances; `system_ids` holds `n` NUL-terminated strings.
///
/// # Safety
/// All arrays must hold `n` elements; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn singqa_metrics_report(
    pred: *const f64,
    label: *const f64,
    system_ids: *const *const c_char,
    n: usize,
    out: *mut SingqaMetricReport,
) -> SingqaStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let pred = slice(pred, n, "pred")?;
        let label = slice(label, n, "label")?;
        let ids = slice(system_ids, n, "system_ids")?
            .iter()
            .map(|&p| text(p, "system id"))
            .collect::<Result<Vec<_>, _>>()?;
        let r = metrics::full_report(pred, label, &ids)?;
        *out = SingqaMetricReport {
            utt_mse: r.utterance.mse,
            utt_lcc: r.utterance.lcc,
            utt_srcc: r.utterance.srcc,
            utt_ktau: r.utterance.ktau,
            sys_mse: r.system.mse,
            sys_lcc: r.system.lcc,
            sys_srcc: r.system.srcc,
            sys_ktau: r.system.ktau,
            n_utterances: r.n_utterances,
            n_systems: r.n_systems,
        };
        Ok(())
    })
}

/// Loads a head model or a fusion file (members are digest-checked).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn singqa_model_load(
    path: *const c_char,
    out: *mut *mut SingqaModel,
) -> SingqaStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let predictor = Predictor::load(&self::path(path)?)?;
        *out = Box::into_raw(Box::new(SingqaModel(predictor)));
        Ok(())
    })
}

/// 1 for a single head, k for a fusion; 0 for a NULL handle.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn singqa_model_member_count(model: *const SingqaModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.members().len())
}

/// Embedding dimension expected by the model, 0 for a NULL handle.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn singqa_model_embedding_dim(model: *const SingqaModel) -> usize {
    model
        .as_ref()
        .and_then(|m| m.0.members().first())
        .map_or(0, |h| h.head.config.embedding_dim)
}

/// Unclamped MOS for one utterance. `pitch` and `spectral` may be NULL when
/// no member of the model needs them.
///
/// # Safety
/// Handles must be NULL or live; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn singqa_model_score(
    model: *const SingqaModel,
    embedding: *const SingqaFeatures,
    pitch: *const SingqaPitchTrack,
    spectral: *const SingqaFeatures,
    out: *mut f64,
) -> SingqaStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let model = &handle(model, "model")?.0;
        let feats = UtteranceFeatures {
            embedding: handle(embedding, "embedding")?.0.clone(),
            pitch: pitch.as_ref().map(|p| p.0.clone()),
            spectral: spectral.as_ref().map(|s| s.0.clone()),
        };
        *out = model.score_features(&feats)?;
        Ok(())
    })
}

/// Clamps a raw score to the MOS range [1, 5].
#[no_mangle]
pub extern "C" fn singqa_clamp_mos(score: f64) -> f64 {
    pipeline::clamp_mos(score)
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn singqa_model_free(model: *mut SingqaModel) {
    release(model);
}

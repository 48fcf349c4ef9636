//! Pitch tracking and octave-folded pitch histograms.
//!
//! Frequencies are mapped to cents relative to A4 = 440 Hz, folded into a
//! single octave of 120 ten-cent bins, and counted per bin. Singers who hit
//! their notes consistently produce histograms with sharp peaks; the
//! sharpness measure here is the negative Shannon entropy of the bins.

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureSequence};
use crate::framing;

pub const NUM_BINS: usize = 120;
pub const A4_HZ: f64 = 440.0;
pub const CENTS_PER_OCTAVE: f64 = 1200.0;
pub const CENTS_PER_BIN: f64 = 10.0;

/// Default hop between frames, in seconds.
pub const DEFAULT_FRAME_SHIFT: f64 = 0.02;
pub const DEFAULT_F0_MIN: f64 = 60.0;
pub const DEFAULT_F0_MAX: f64 = 800.0;

/// Analysis window of the tracker, in seconds.
pub const TRACKER_WINDOW: f64 = 0.040;
/// Maximum cumulative-mean-normalized difference accepted as voiced.
pub const VOICING_THRESHOLD: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct PitchTrack {
    f0_hz: Vec<f64>,
    voiced: Vec<bool>,
    frame_shift: f64,
}

impl PitchTrack {
    pub fn new(f0_hz: Vec<f64>, voiced: Vec<bool>, frame_shift: f64) -> Result<Self> {
        if f0_hz.is_empty() || f0_hz.len() != voiced.len() {
            return Err(Error::InvalidFeatures(format!(
                "pitch track needs equal non-zero lengths (f0 {}, voiced {})",
                f0_hz.len(),
                voiced.len()
            )));
        }
        if !(frame_shift.is_finite() && frame_shift > 0.0) {
            return Err(Error::InvalidFeatures(format!(
                "frame shift {frame_shift} must be positive"
            )));
        }
        for (n, (&f, &v)) in f0_hz.iter().zip(&voiced).enumerate() {
            let ok = if v {
                f.is_finite() && f > 0.0
            } else {
                f == 0.0
            };
            if !ok {
                return Err(Error::InvalidFeatures(format!(
                    "frame {n}: f0 {f} inconsistent with voiced = {v}"
                )));
            }
        }
        Ok(Self {
            f0_hz,
            voiced,
            frame_shift,
        })
    }

    /// Builds a track from per-frame estimates where `None` marks unvoiced frames.
    pub fn from_estimates(estimates: &[Option<f64>], frame_shift: f64) -> Result<Self> {
        let f0 = estimates.iter().map(|e| e.unwrap_or(0.0)).collect();
        let voiced = estimates.iter().map(Option::is_some).collect();
        Self::new(f0, voiced, frame_shift)
    }

    pub fn f0_hz(&self) -> &[f64] {
        &self.f0_hz
    }

    pub fn voiced(&self) -> &[bool] {
        &self.voiced
    }

    pub fn frame_shift(&self) -> f64 {
        self.frame_shift
    }

    pub fn len(&self) -> usize {
        self.f0_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0_hz.is_empty()
    }

    pub fn voiced_frames(&self) -> usize {
        self.voiced.iter().filter(|&&v| v).count()
    }

    /// Voiced f0 values, in frame order.
    pub fn voiced_f0(&self) -> impl Iterator<Item = f64> + '_ {
        self.f0_hz
            .iter()
            .zip(&self.voiced)
            .filter_map(|(&f, &v)| v.then_some(f))
    }

    /// Two columns per frame: f0 in Hz and voicing as 0/1.
    pub fn to_feature_sequence(&self) -> FeatureSequence {
        let data = self
            .f0_hz
            .iter()
            .zip(&self.voiced)
            .flat_map(|(&f, &v)| [f as f32, if v { 1.0 } else { 0.0 }])
            .collect();
        FeatureSequence::new(data, self.len(), 2, self.frame_shift, FeatureKind::Pitch)
            .expect("pitch track is a valid feature sequence")
    }

    pub fn from_feature_sequence(seq: &FeatureSequence) -> Result<Self> {
        if seq.kind() != FeatureKind::Pitch || seq.dims() != 2 {
            return Err(Error::InvalidFeatures(format!(
                "expected a pitch sequence with 2 dims, got {} with {} dims",
                seq.kind(),
                seq.dims()
            )));
        }
        let mut f0 = Vec::with_capacity(seq.frames());
        let mut voiced = Vec::with_capacity(seq.frames());
        for row in seq.rows() {
            let v = row[1] >= 0.5;
            voiced.push(v);
            f0.push(if v { f64::from(row[0]) } else { 0.0 });
        }
        Self::new(f0, voiced, seq.frame_shift())
    }
}

/// What the histogram counts are divided by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HistogramNorm {
    /// Number of voiced frames; bins sum to 1 when anything is voiced.
    #[default]
    Voiced,
    /// Total number of frames, voiced or not.
    All,
}

impl HistogramNorm {
    pub fn name(self) -> &'static str {
        match self {
            HistogramNorm::Voiced => "voiced",
            HistogramNorm::All => "all",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "voiced" => Ok(HistogramNorm::Voiced),
            "all" => Ok(HistogramNorm::All),
            other => Err(Error::InvalidConfig(format!(
                "histogram normalization `{other}` (expected voiced or all)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PitchHistogram {
    pub bins: [f64; NUM_BINS],
    pub voiced_frames: usize,
    pub total_frames: usize,
}

impl PitchHistogram {
    pub fn sum(&self) -> f64 {
        self.bins.iter().sum()
    }
}

/// `1200 * log2(f / 440)`.
pub fn hz_to_cent(f_hz: f64) -> Result<f64> {
    if f_hz.is_nan() || f_hz <= 0.0 {
        return Err(Error::NonPositiveFrequency(f_hz));
    }
    if !f_hz.is_finite() {
        return Err(Error::NonFinite("frequency"));
    }
    Ok(CENTS_PER_OCTAVE * (f_hz / A4_HZ).log2())
}

/// Maps cents to a continuous bin coordinate in [0, 120) with a floored modulo.
pub fn fold_to_octave(f_cent: f64) -> Result<f64> {
    if !f_cent.is_finite() {
        return Err(Error::NonFinite("cent value"));
    }
    let r = (f_cent / CENTS_PER_BIN).rem_euclid(NUM_BINS as f64);
    // rem_euclid rounds tiny negative inputs up to exactly 120
    Ok(if r >= NUM_BINS as f64 { 0.0 } else { r })
}

/// Folded bin coordinate of a positive frequency.
pub fn folded_pitch(f_hz: f64) -> Result<f64> {
    fold_to_octave(hz_to_cent(f_hz)?)
}

/// Zero-based bin index for a coordinate in [0, 120): bin `j` (1-based) holds
/// `j - 1 <= I < j`.
pub fn bin_index(coordinate: f64) -> usize {
    (coordinate.floor() as usize).min(NUM_BINS - 1)
}

pub fn compute_histogram(track: &PitchTrack, norm: HistogramNorm) -> PitchHistogram {
    let mut counts = [0usize; NUM_BINS];
    for f in track.voiced_f0() {
        let coord = folded_pitch(f).expect("voiced frames carry positive finite f0");
        counts[bin_index(coord)] += 1;
    }
    let voiced_frames = track.voiced_frames();
    let total_frames = track.len();
    let normalizer = match norm {
        HistogramNorm::Voiced => voiced_frames,
        HistogramNorm::All => total_frames,
    };
    let mut bins = [0.0; NUM_BINS];
    if normalizer > 0 {
        for (b, &c) in bins.iter_mut().zip(&counts) {
            *b = c as f64 / normalizer as f64;
        }
    }
    PitchHistogram {
        bins,
        voiced_frames,
        total_frames,
    }
}

/// Negative Shannon entropy (nats) of the bin distribution; 0 for a single
/// occupied bin, `-ln 120` for a uniform histogram. Bins are renormalized by
/// their sum so histograms normalized by all frames are accepted too.
pub fn histogram_sharpness(hist: &PitchHistogram) -> Result<f64> {
    let total = hist.sum();
    if total <= 0.0 {
        return Err(Error::EmptyHistogram);
    }
    Ok(hist
        .bins
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| {
            let q = p / total;
            q * q.ln()
        })
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackerConfig {
    pub frame_shift: f64,
    pub f0_min: f64,
    pub f0_max: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            frame_shift: DEFAULT_FRAME_SHIFT,
            f0_min: DEFAULT_F0_MIN,
            f0_max: DEFAULT_F0_MAX,
        }
    }
}

/// YIN-style tracker over 40 ms windows.
///
/// For each frame the difference function `d(τ)` is normalized by its
/// cumulative mean; the first lag in range whose normalized value drops
/// below [`VOICING_THRESHOLD`] is refined to its local minimum and then by a
/// parabola through the neighbouring lags.
pub fn track_pitch(
    clip: &AudioClip,
    frame_shift: f64,
    f0_min: f64,
    f0_max: f64,
) -> Result<PitchTrack> {
    let sr = clip.sample_rate();
    let nyquist = sr as f64 / 2.0;
    if !(f0_min > 0.0 && f0_min < f0_max && f0_max < nyquist) {
        return Err(Error::InvalidPitchRange(format!(
            "need 0 < f0_min ({f0_min}) < f0_max ({f0_max}) < sample_rate/2 ({nyquist})"
        )));
    }
    if !(frame_shift.is_finite() && frame_shift > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "frame shift {frame_shift} must be positive"
        )));
    }
    let window = (TRACKER_WINDOW * sr as f64).round() as usize;
    let lag_min = ((sr as f64 / f0_max).floor() as usize).max(2);
    let lag_max = (sr as f64 / f0_min).ceil() as usize;
    if lag_max + 2 >= window {
        return Err(Error::InvalidPitchRange(format!(
            "f0_min {f0_min} Hz needs a lag of {lag_max} samples, longer than the {window}-sample window"
        )));
    }
    let samples = clip.samples();
    if samples.len() < window {
        return Err(Error::ClipTooShort {
            samples: samples.len(),
            required: window,
        });
    }

    let frames = framing::frame_count(samples.len(), sr, frame_shift);
    let mut diff = vec![0.0; lag_max + 2];
    let mut cmnd = vec![0.0; lag_max + 2];
    let estimates: Vec<Option<f64>> = (0..frames)
        .map(|n| {
            let start = framing::window_start(n, samples.len(), sr, frame_shift, window);
            let frame = &samples[start..start + window];
            yin_frame(frame, lag_min, lag_max, &mut diff, &mut cmnd)
                .map(|lag| sr as f64 / lag)
                .filter(|f| (f0_min..=f0_max).contains(f))
        })
        .collect();
    PitchTrack::from_estimates(&estimates, frame_shift)
}

/// Returns the refined period in samples, or `None` when unvoiced.
fn yin_frame(
    frame: &[f64],
    lag_min: usize,
    lag_max: usize,
    diff: &mut [f64],
    cmnd: &mut [f64],
) -> Option<f64> {
    let top = lag_max + 1;
    let span = frame.len() - top;
    for (tau, d) in diff.iter_mut().enumerate().take(top + 1).skip(1) {
        *d = frame[..span]
            .iter()
            .zip(&frame[tau..tau + span])
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
    }
    cmnd[0] = 1.0;
    let mut running = 0.0;
    for tau in 1..=top {
        running += diff[tau];
        cmnd[tau] = if running > 0.0 {
            diff[tau] * tau as f64 / running
        } else {
            1.0
        };
    }

    let mut tau = (lag_min..=lag_max).find(|&t| cmnd[t] < VOICING_THRESHOLD)?;
    while tau < lag_max && cmnd[tau + 1] < cmnd[tau] {
        tau += 1;
    }

    let (a, b, c) = (cmnd[tau - 1], cmnd[tau], cmnd[tau + 1]);
    let denom = a - 2.0 * b + c;
    let shift = if denom.abs() > f64::EPSILON {
        (0.5 * (a - c) / denom).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    Some(tau as f64 + shift)
}

//! Amplitude and phase spectra per frame.
//!
//! Each frame holds `fft_size/2 + 1` log-amplitudes in dB relative to the
//! loudest bin of the whole clip (floored at -80 dB) followed by the same
//! number of phases in (-π, π]. Frames use a Hann window of twice the frame
//! shift and the same placement as the pitch tracker.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureSequence};
use crate::framing;

pub const DB_FLOOR: f64 = -80.0;
pub const MIN_FFT_SIZE: usize = 64;

pub fn hann(len: usize) -> Vec<f64> {
    // periodic form: 50% overlap-adds to a constant
    (0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / len as f64).cos())
        .collect()
}

pub fn spectral_dims(fft_size: usize) -> usize {
    fft_size + 2
}

pub fn stft_amplitude_phase(
    clip: &AudioClip,
    frame_shift: f64,
    fft_size: usize,
) -> Result<FeatureSequence> {
    if fft_size < MIN_FFT_SIZE || !fft_size.is_power_of_two() {
        return Err(Error::InvalidFftSize {
            fft_size,
            reason: format!("must be a power of two >= {MIN_FFT_SIZE}"),
        });
    }
    if !(frame_shift.is_finite() && frame_shift > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "frame shift {frame_shift} must be positive"
        )));
    }
    let sr = clip.sample_rate();
    let window_len = (2.0 * frame_shift * sr as f64).round() as usize;
    if window_len < 2 {
        return Err(Error::InvalidConfig(format!(
            "frame shift {frame_shift} s is shorter than a sample pair at {sr} Hz"
        )));
    }
    if window_len > fft_size {
        return Err(Error::InvalidFftSize {
            fft_size,
            reason: format!("shorter than the {window_len}-sample analysis window"),
        });
    }
    let samples = clip.samples();
    if samples.len() < window_len {
        return Err(Error::ClipTooShort {
            samples: samples.len(),
            required: window_len,
        });
    }

    let window = hann(window_len);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(fft_size);
    let bins = fft_size / 2 + 1;
    let frames = framing::frame_count(samples.len(), sr, frame_shift);

    let mut magnitudes = Vec::with_capacity(frames * bins);
    let mut phases = Vec::with_capacity(frames * bins);
    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    for n in 0..frames {
        let start = framing::window_start(n, samples.len(), sr, frame_shift, window_len);
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (i, (s, w)) in samples[start..start + window_len]
            .iter()
            .zip(&window)
            .enumerate()
        {
            buf[i].re = s * w;
        }
        fft.process(&mut buf);
        for c in &buf[..bins] {
            magnitudes.push(c.norm());
            phases.push(c.im.atan2(c.re));
        }
    }

    let peak = magnitudes.iter().copied().fold(0.0, f64::max);
    let mut data = Vec::with_capacity(frames * 2 * bins);
    for n in 0..frames {
        let row = n * bins..(n + 1) * bins;
        data.extend(
            magnitudes[row.clone()]
                .iter()
                .map(|&m| relative_db(m, peak) as f32),
        );
        data.extend(phases[row].iter().map(|&p| wrap_phase(p)));
    }
    FeatureSequence::new(
        data,
        frames,
        spectral_dims(fft_size),
        frame_shift,
        FeatureKind::Spectral,
    )
}

/// Stored phase in (-π, π] at f32 precision.
fn wrap_phase(phase: f64) -> f32 {
    let p = phase as f32;
    if p <= -std::f32::consts::PI {
        std::f32::consts::PI
    } else {
        p
    }
}

fn relative_db(magnitude: f64, peak: f64) -> f64 {
    if peak <= 0.0 || magnitude <= 0.0 {
        return DB_FLOOR;
    }
    (20.0 * (magnitude / peak).log10()).max(DB_FLOOR)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pitch;

    fn tone(freq: f64, sr: u32, n: usize, gain: f64) -> AudioClip {
        let s = (0..n)
            .map(|i| gain * (2.0 * PI * freq * i as f64 / sr as f64).sin())
            .collect();
        AudioClip::new(s, sr).unwrap()
    }

    /// Direct O(N²) DFT magnitude of the Hann-windowed frame.
    fn dft_magnitudes(frame: &[f64], n_fft: usize) -> Vec<f64> {
        let w = hann(frame.len());
        (0..=n_fft / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, (x, wt)) in frame.iter().zip(&w).enumerate() {
                    let a = -2.0 * PI * (k * t) as f64 / n_fft as f64;
                    re += x * wt * a.cos();
                    im += x * wt * a.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect()
    }

    fn argmax(v: &[f32]) -> usize {
        v.iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0
    }

    #[test]
    fn one_khz_peaks_at_bin_32() {
        let clip = tone(1000.0, 16000, 16000, 0.5);
        // 16 ms shift -> 512-sample window
        let seq = stft_amplitude_phase(&clip, 0.016, 512).unwrap();
        assert_eq!(seq.dims(), 514);
        for row in seq.rows() {
            assert_eq!(argmax(&row[..257]), 32);
        }
        let oracle = dft_magnitudes(&clip.samples()[..512], 512);
        let best = oracle
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(best, 32);
    }

    #[test]
    fn fft_matches_direct_dft() {
        let clip = tone(437.0, 8000, 4000, 0.3);
        let seq = stft_amplitude_phase(&clip, 0.008, 128).unwrap();
        let mags = dft_magnitudes(&clip.samples()[..128], 128);
        // frame 0 starts at sample 0; compare shapes relative to its own max
        let local_peak = mags.iter().copied().fold(0.0, f64::max);
        let row0 = seq.row(0);
        let row_peak = row0[..65].iter().copied().fold(f32::MIN, f32::max) as f64;
        for k in 0..65 {
            let want = relative_db(mags[k], local_peak);
            let got = row0[k] as f64 - row_peak;
            if want > -60.0 {
                assert!((want - got).abs() < 1e-3, "bin {k}: {want} vs {got}");
            }
        }
    }

    #[test]
    fn silence_sits_on_floor() {
        let clip = AudioClip::new(vec![0.0; 8000], 16000).unwrap();
        let seq = stft_amplitude_phase(&clip, 0.016, 512).unwrap();
        for row in seq.rows() {
            assert!(row[..257].iter().all(|&v| v == DB_FLOOR as f32));
        }
    }

    #[test]
    fn centred_impulse_is_flat() {
        let sr = 16000;
        let mut s = vec![0.0; 16000];
        // frame 10 is centred on sample 10 * 256 = 2560 (hop 16 ms -> 256 samples)
        s[2560] = 1.0;
        let clip = AudioClip::new(s, sr).unwrap();
        let seq = stft_amplitude_phase(&clip, 0.016, 512).unwrap();
        let amp = &seq.row(10)[..257];
        let (lo, hi) = amp
            .iter()
            .fold((f32::MAX, f32::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        assert!(hi - lo < 1.0, "spread {}", hi - lo);
    }

    #[test]
    fn gain_invariance_and_phase_range() {
        let a = stft_amplitude_phase(&tone(330.0, 16000, 8000, 0.8), 0.02, 1024).unwrap();
        let b = stft_amplitude_phase(&tone(330.0, 16000, 8000, 0.2), 0.02, 1024).unwrap();
        let bins = 513;
        for (ra, rb) in a.rows().zip(b.rows()) {
            for k in 0..bins {
                assert!((ra[k] - rb[k]).abs() < 1e-3);
            }
            // power-of-two gain ratio: phases identical bit for bit
            assert_eq!(&ra[bins..], &rb[bins..]);
            assert!(ra[bins..].iter().all(|&p| p > -PI as f32 && p <= PI as f32));
        }
    }

    #[test]
    fn frame_count_matches_pitch_tracker() {
        for n in [8000usize, 8001, 12345, 16000] {
            let clip = tone(220.0, 16000, n, 0.5);
            let spec = stft_amplitude_phase(&clip, 0.02, 1024).unwrap();
            let track = pitch::track_pitch(&clip, 0.02, 60.0, 800.0).unwrap();
            assert_eq!(spec.frames(), track.len());
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        let clip = tone(220.0, 16000, 8000, 0.5);
        for size in [32, 100, 0] {
            assert!(matches!(
                stft_amplitude_phase(&clip, 0.001, size),
                Err(Error::InvalidFftSize { .. })
            ));
        }
        // 40 ms window does not fit in 512 points at 16 kHz
        assert!(matches!(
            stft_amplitude_phase(&clip, 0.02, 512),
            Err(Error::InvalidFftSize { .. })
        ));
        let short = tone(220.0, 16000, 100, 0.5);
        assert!(matches!(
            stft_amplitude_phase(&short, 0.016, 512),
            Err(Error::ClipTooShort { .. })
        ));
    }
}

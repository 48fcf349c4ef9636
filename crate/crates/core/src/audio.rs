use std::path::Path;

use hound::{SampleFormat, WavReader};

use crate::error::{Error, Result};

/// Mono audio in [-1, 1] at its native sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidClip("no samples".into()));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidClip("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("audio sample"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads a 16-bit integer or 32-bit float PCM WAV, averaging stereo to mono.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => wav_error(path, other),
    })?;
    let spec = reader.spec();
    if spec.channels == 0 || spec.channels > 2 {
        return Err(Error::UnsupportedWav(format!(
            "{}: {} channels (expected 1 or 2)",
            path.display(),
            spec.channels
        )));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_error(path, e))?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_error(path, e))?,
        (format, bits) => {
            return Err(Error::UnsupportedWav(format!(
                "{}: {bits}-bit {format:?} samples (expected 16-bit int or 32-bit float)",
                path.display()
            )))
        }
    };
    let channels = spec.channels as usize;
    if !interleaved.len().is_multiple_of(channels) {
        return Err(Error::MalformedWav(format!(
            "{}: partial sample frame at end of data",
            path.display()
        )));
    }
    let mono = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(2)
            .map(|lr| 0.5 * (lr[0] + lr[1]))
            .collect()
    };
    AudioClip::new(mono, spec.sample_rate)
        .map_err(|e| Error::MalformedWav(format!("{}: {e}", path.display())))
}

fn wav_error(path: &Path, err: hound::Error) -> Error {
    match err {
        hound::Error::Unsupported => {
            Error::UnsupportedWav(format!("{}: unsupported encoding", path.display()))
        }
        hound::Error::IoError(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
            Error::MalformedWav(format!("{}: truncated file", path.display()))
        }
        other => Error::MalformedWav(format!("{}: {other}", path.display())),
    }
}

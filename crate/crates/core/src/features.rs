//! Frame-level feature matrices and the `SQAF` binary container.
//!
//! Layout (all integers and floats little-endian):
//!
//! | offset | size | field                                  |
//! |--------|------|----------------------------------------|
//! | 0      | 4    | magic `SQAF`                           |
//! | 4      | 1    | version (1)                            |
//! | 5      | 1    | kind (0 embedding, 1 spectral, 2 pitch)|
//! | 6      | 8    | frame shift in seconds (f64)           |
//! | 14     | 4    | frames (u32)                           |
//! | 18     | 4    | dims (u32)                             |
//! | 22     | 4·n  | frames·dims f32 values, row-major      |

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SQAF";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FeatureKind {
    Embedding,
    Spectral,
    Pitch,
}

impl FeatureKind {
    pub fn code(self) -> u8 {
        match self {
            FeatureKind::Embedding => 0,
            FeatureKind::Spectral => 1,
            FeatureKind::Pitch => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(FeatureKind::Embedding),
            1 => Some(FeatureKind::Spectral),
            2 => Some(FeatureKind::Pitch),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Embedding => "embedding",
            FeatureKind::Spectral => "spectral",
            FeatureKind::Pitch => "pitch",
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embedding" | "emb" => Ok(FeatureKind::Embedding),
            "spectral" | "spec" => Ok(FeatureKind::Spectral),
            "pitch" => Ok(FeatureKind::Pitch),
            other => Err(Error::InvalidConfig(format!(
                "unknown feature kind `{other}`"
            ))),
        }
    }
}

/// A `frames × dims` matrix of finite values with its frame shift.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    data: Vec<f32>,
    frames: usize,
    dims: usize,
    frame_shift: f64,
    kind: FeatureKind,
}

impl FeatureSequence {
    pub fn new(
        data: Vec<f32>,
        frames: usize,
        dims: usize,
        frame_shift: f64,
        kind: FeatureKind,
    ) -> Result<Self> {
        if frames == 0 || dims == 0 {
            return Err(Error::InvalidFeatures(format!(
                "shape {frames}x{dims} must have at least one frame and one dim"
            )));
        }
        if data.len() != frames * dims {
            return Err(Error::InvalidFeatures(format!(
                "{} values for shape {frames}x{dims}",
                data.len()
            )));
        }
        if !(frame_shift.is_finite() && frame_shift > 0.0) {
            return Err(Error::InvalidFeatures(format!(
                "frame shift {frame_shift} must be positive"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature value"));
        }
        Ok(Self {
            data,
            frames,
            dims,
            frame_shift,
            kind,
        })
    }

    /// Builds a sequence from per-frame rows, all of equal length.
    pub fn from_rows(rows: &[Vec<f32>], frame_shift: f64, kind: FeatureKind) -> Result<Self> {
        let dims = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != dims) {
            return Err(Error::DimensionMismatch {
                expected: dims,
                got: bad.len(),
            });
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(data, rows.len(), dims, frame_shift, kind)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn frame_shift(&self) -> f64 {
        self.frame_shift
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, frame: usize) -> &[f32] {
        &self.data[frame * self.dims..(frame + 1) * self.dims]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dims)
    }

    /// Keeps the first `frames` frames.
    pub fn truncated(&self, frames: usize) -> Self {
        let frames = frames.clamp(1, self.frames);
        Self {
            data: self.data[..frames * self.dims].to_vec(),
            frames,
            ..*self
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.kind.code());
        out.extend_from_slice(&self.frame_shift.to_le_bytes());
        out.extend_from_slice(&(self.frames as u32).to_le_bytes());
        out.extend_from_slice(&(self.dims as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::FeatureFormat(format!(
                "truncated header: {} bytes",
                bytes.len()
            )));
        }
        if bytes[0..4] != MAGIC {
            return Err(Error::FeatureFormat(format!(
                "bad magic {:?}",
                String::from_utf8_lossy(&bytes[0..4])
            )));
        }
        if bytes[4] != VERSION {
            return Err(Error::FeatureFormat(format!(
                "unsupported version {}",
                bytes[4]
            )));
        }
        let kind = FeatureKind::from_code(bytes[5])
            .ok_or_else(|| Error::FeatureFormat(format!("unknown kind code {}", bytes[5])))?;
        let frame_shift = f64::from_le_bytes(bytes[6..14].try_into().unwrap());
        let frames = u32::from_le_bytes(bytes[14..18].try_into().unwrap()) as usize;
        let dims = u32::from_le_bytes(bytes[18..22].try_into().unwrap()) as usize;

        let expected = frames
            .checked_mul(dims)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::FeatureFormat(format!("shape {frames}x{dims} overflows")))?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() < expected {
            return Err(Error::FeatureFormat(format!(
                "truncated payload: header claims {frames}x{dims} ({} floats), found {} bytes",
                frames * dims,
                payload.len()
            )));
        }
        if payload.len() > expected {
            return Err(Error::FeatureFormat(format!(
                "payload size mismatch: header claims {frames}x{dims}, found {} trailing bytes",
                payload.len() - expected
            )));
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::FeatureFormat("non-finite value in payload".into()));
        }
        Self::new(data, frames, dims, frame_shift, kind)
            .map_err(|e| Error::FeatureFormat(e.to_string()))
    }
}

pub fn write_feature_file(seq: &FeatureSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, seq.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureSequence::from_bytes(&bytes)
        .map_err(|e| Error::FeatureFormat(format!("{}: {e}", path.display())))
}

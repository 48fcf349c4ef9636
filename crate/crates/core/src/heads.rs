//! MOS predictor heads over precomputed frame-level features.
//!
//! Every variant ends in a single linear layer `ŷ = w·v + b` on an
//! utterance-level vector `v`:
//!
//! * `plain`: mean-pooled embedding.
//! * `compressed_pitch`: mean over frames of `[embedding ‖ I(f_cent)/120 ‖ voiced]`.
//! * `pitch_histogram`: layer-normalized `[pooled embedding ‖ histogram]` with a
//!   learned per-dimension affine.
//! * `spectrum`: mean over frames of `[embedding ‖ projection · spectral]`, the
//!   projection being learned jointly with the output layer.
//!
//! Parameter-free preprocessing is done once per utterance by
//! [`assemble_input`]; the head then maps the resulting [`HeadInput`] to `v`.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::pitch::{self, HistogramNorm, PitchTrack, NUM_BINS};
use crate::training::{self, Dataset, Objective, TrainConfig, TrainingLog};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const COMPRESSED_PITCH_CHANNELS: usize = 2;
pub const DEFAULT_PROJECTION_DIM: usize = 64;
/// Relative frame-shift mismatch tolerated when aligning two sequences.
pub const FRAME_SHIFT_TOLERANCE: f64 = 0.01;
/// Length difference (frames) absorbed by truncation when aligning.
pub const MAX_FRAME_SLACK: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadVariant {
    Plain,
    CompressedPitch,
    PitchHistogram,
    Spectrum,
}

impl HeadVariant {
    pub const ALL: [HeadVariant; 4] = [
        HeadVariant::Plain,
        HeadVariant::CompressedPitch,
        HeadVariant::PitchHistogram,
        HeadVariant::Spectrum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeadVariant::Plain => "plain",
            HeadVariant::CompressedPitch => "compressed_pitch",
            HeadVariant::PitchHistogram => "pitch_histogram",
            HeadVariant::Spectrum => "spectrum",
        }
    }
}

impl fmt::Display for HeadVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HeadVariant::ALL
            .into_iter()
            .find(|v| v.name() == s || v.name().replace('_', "-") == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown head variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    pub variant: HeadVariant,
    pub embedding_dim: usize,
    /// Width of the auxiliary block of `v`: 0, 2, 120 or the projection width.
    pub aux_dim: usize,
    /// Raw spectral dimension fed to the projection (spectrum only).
    pub raw_aux_dim: usize,
    pub use_layer_norm: bool,
    pub histogram_norm: HistogramNorm,
    pub seed: u64,
}

impl HeadConfig {
    pub fn plain(embedding_dim: usize) -> Self {
        Self {
            variant: HeadVariant::Plain,
            embedding_dim,
            aux_dim: 0,
            raw_aux_dim: 0,
            use_layer_norm: false,
            histogram_norm: HistogramNorm::Voiced,
            seed: 0,
        }
    }

    pub fn compressed_pitch(embedding_dim: usize) -> Self {
        Self {
            variant: HeadVariant::CompressedPitch,
            aux_dim: COMPRESSED_PITCH_CHANNELS,
            ..Self::plain(embedding_dim)
        }
    }

    pub fn pitch_histogram(embedding_dim: usize, use_layer_norm: bool) -> Self {
        Self {
            variant: HeadVariant::PitchHistogram,
            aux_dim: NUM_BINS,
            use_layer_norm,
            ..Self::plain(embedding_dim)
        }
    }

    pub fn spectrum(embedding_dim: usize, raw_spectral_dim: usize, projection_dim: usize) -> Self {
        Self {
            variant: HeadVariant::Spectrum,
            aux_dim: projection_dim,
            raw_aux_dim: raw_spectral_dim,
            ..Self::plain(embedding_dim)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::InvalidConfig(
                "embedding_dim must be positive".into(),
            ));
        }
        let ok = match self.variant {
            HeadVariant::Plain => self.aux_dim == 0 && self.raw_aux_dim == 0,
            HeadVariant::CompressedPitch => {
                self.aux_dim == COMPRESSED_PITCH_CHANNELS && self.raw_aux_dim == 0
            }
            HeadVariant::PitchHistogram => self.aux_dim == NUM_BINS && self.raw_aux_dim == 0,
            HeadVariant::Spectrum => self.aux_dim > 0 && self.raw_aux_dim > 0,
        };
        if !ok {
            return Err(Error::InvalidConfig(format!(
                "aux_dim {} / raw_aux_dim {} inconsistent with variant {}",
                self.aux_dim, self.raw_aux_dim, self.variant
            )));
        }
        if self.use_layer_norm && self.variant != HeadVariant::PitchHistogram {
            return Err(Error::InvalidConfig(
                "layer normalization applies to the pitch_histogram variant only".into(),
            ));
        }
        Ok(())
    }

    /// Length of `v`, the vector the output layer sees.
    pub fn feature_dim(&self) -> usize {
        self.embedding_dim + self.aux_dim
    }

    /// Length of the parameter-free [`HeadInput`].
    pub fn input_dim(&self) -> usize {
        match self.variant {
            HeadVariant::Spectrum => self.embedding_dim + self.raw_aux_dim,
            _ => self.feature_dim(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormAffine {
    pub scale: Vec<f32>,
    pub offset: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorHead {
    pub config: HeadConfig,
    pub weights: Vec<f32>,
    pub bias: f32,
    /// Row-major `aux_dim × raw_aux_dim` (spectrum only).
    pub projection: Option<Vec<f32>>,
    pub norm: Option<LayerNormAffine>,
}

/// Utterance-level input to a head, before any trainable transform.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadInput(pub Vec<f64>);

/// Frame-level inputs available for one utterance.
#[derive(Debug, Clone)]
pub struct UtteranceFeatures {
    pub embedding: FeatureSequence,
    pub pitch: Option<PitchTrack>,
    pub spectral: Option<FeatureSequence>,
}

pub fn mean_pool(seq: &FeatureSequence) -> Vec<f64> {
    let mut acc = vec![0.0; seq.dims()];
    for row in seq.rows() {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += f64::from(v);
        }
    }
    let n = seq.frames() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// `(v - mean) / sqrt(var + ε)` with the population variance; no affine.
pub fn layer_normalize(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let denom = (var + LAYER_NORM_EPS).sqrt();
    v.iter().map(|x| (x - mean) / denom).collect()
}

/// Common length after checking shift agreement and slack.
pub fn aligned_len(frames_a: usize, shift_a: f64, frames_b: usize, shift_b: f64) -> Result<usize> {
    let rel = (shift_a - shift_b).abs() / shift_a.max(shift_b);
    if rel > FRAME_SHIFT_TOLERANCE {
        return Err(Error::Alignment(format!(
            "frame shifts {shift_a} s and {shift_b} s differ by more than 1%"
        )));
    }
    if frames_a.abs_diff(frames_b) > MAX_FRAME_SLACK {
        return Err(Error::Alignment(format!(
            "frame counts {frames_a} and {frames_b} differ by more than {MAX_FRAME_SLACK}"
        )));
    }
    Ok(frames_a.min(frames_b))
}

/// Truncates both sequences to the shorter length.
pub fn align_frames(
    emb: &FeatureSequence,
    aux: &FeatureSequence,
) -> Result<(FeatureSequence, FeatureSequence)> {
    let n = aligned_len(
        emb.frames(),
        emb.frame_shift(),
        aux.frames(),
        aux.frame_shift(),
    )?;
    Ok((emb.truncated(n), aux.truncated(n)))
}

fn check_embedding(config: &HeadConfig, emb: &FeatureSequence) -> Result<()> {
    if emb.dims() != config.embedding_dim {
        return Err(Error::DimensionMismatch {
            expected: config.embedding_dim,
            got: emb.dims(),
        });
    }
    Ok(())
}

/// Parameter-free part of feature assembly for one utterance.
pub fn assemble_input(config: &HeadConfig, feats: &UtteranceFeatures) -> Result<HeadInput> {
    let emb = &feats.embedding;
    check_embedding(config, emb)?;
    let out = match config.variant {
        HeadVariant::Plain => mean_pool(emb),
        HeadVariant::CompressedPitch => {
            let track = feats
                .pitch
                .as_ref()
                .ok_or_else(|| Error::MissingInput("pitch track for compressed_pitch".into()))?;
            let n = aligned_len(
                emb.frames(),
                emb.frame_shift(),
                track.len(),
                track.frame_shift(),
            )?;
            let mut acc = vec![0.0; config.feature_dim()];
            for t in 0..n {
                for (a, &v) in acc.iter_mut().zip(emb.row(t)) {
                    *a += f64::from(v);
                }
                if track.voiced()[t] {
                    acc[config.embedding_dim] +=
                        pitch::folded_pitch(track.f0_hz()[t])? / NUM_BINS as f64;
                    acc[config.embedding_dim + 1] += 1.0;
                }
            }
            acc.iter_mut().for_each(|a| *a /= n as f64);
            acc
        }
        HeadVariant::PitchHistogram => {
            let track = feats
                .pitch
                .as_ref()
                .ok_or_else(|| Error::MissingInput("pitch track for pitch_histogram".into()))?;
            let hist = pitch::compute_histogram(track, config.histogram_norm);
            let mut v = mean_pool(emb);
            v.extend_from_slice(&hist.bins);
            if config.use_layer_norm {
                layer_normalize(&v)
            } else {
                v
            }
        }
        HeadVariant::Spectrum => {
            let spec = feats
                .spectral
                .as_ref()
                .ok_or_else(|| Error::MissingInput("spectral features for spectrum".into()))?;
            if spec.dims() != config.raw_aux_dim {
                return Err(Error::DimensionMismatch {
                    expected: config.raw_aux_dim,
                    got: spec.dims(),
                });
            }
            let (e, s) = align_frames(emb, spec)?;
            let mut v = mean_pool(&e);
            v.extend(mean_pool(&s));
            v
        }
    };
    Ok(HeadInput(out))
}

/// Layout of the flat parameter vector used in training.
#[derive(Debug, Clone, Copy)]
struct ParamLayout {
    features: usize,
    emb: usize,
    aux: usize,
    raw: usize,
    norm: bool,
    projection: bool,
}

impl ParamLayout {
    fn of(config: &HeadConfig) -> Self {
        Self {
            features: config.feature_dim(),
            emb: config.embedding_dim,
            aux: config.aux_dim,
            raw: config.raw_aux_dim,
            norm: config.use_layer_norm,
            projection: config.variant == HeadVariant::Spectrum,
        }
    }

    fn bias(&self) -> usize {
        self.features
    }

    fn scale(&self) -> usize {
        self.features + 1
    }

    fn offset(&self) -> usize {
        self.scale() + self.features
    }

    fn projection(&self) -> usize {
        self.features + 1 + if self.norm { 2 * self.features } else { 0 }
    }

    fn len(&self) -> usize {
        self.projection()
            + if self.projection {
                self.aux * self.raw
            } else {
                0
            }
    }

    /// `v` from the raw input.
    fn features_into(&self, p: &[f64], x: &[f64], v: &mut Vec<f64>) {
        v.clear();
        if self.projection {
            v.extend_from_slice(&x[..self.emb]);
            let s = &x[self.emb..];
            let proj = &p[self.projection()..self.len()];
            for row in proj.chunks_exact(self.raw) {
                v.push(row.iter().zip(s).map(|(a, b)| a * b).sum());
            }
        } else if self.norm {
            let (scale, offset) = (self.scale(), self.offset());
            v.extend(
                x.iter()
                    .enumerate()
                    .map(|(i, z)| p[scale + i] * z + p[offset + i]),
            );
        } else {
            v.extend_from_slice(x);
        }
    }
}

struct HeadObjective {
    layout: ParamLayout,
}

impl Objective for HeadObjective {
    type Input = HeadInput;

    fn predict(&self, p: &[f64], x: &HeadInput) -> f64 {
        let mut v = Vec::with_capacity(self.layout.features);
        self.layout.features_into(p, &x.0, &mut v);
        dot(&p[..self.layout.features], &v) + p[self.layout.bias()]
    }

    fn accumulate_gradient(&self, p: &[f64], x: &HeadInput, s: f64, g: &mut [f64]) {
        let l = &self.layout;
        let mut v = Vec::with_capacity(l.features);
        l.features_into(p, &x.0, &mut v);
        for (gi, vi) in g[..l.features].iter_mut().zip(&v) {
            *gi += s * vi;
        }
        g[l.bias()] += s;
        if l.norm {
            for i in 0..l.features {
                g[l.scale() + i] += s * p[i] * x.0[i];
                g[l.offset() + i] += s * p[i];
            }
        }
        if l.projection {
            let spec = &x.0[l.emb..];
            let base = l.projection();
            for r in 0..l.aux {
                let w = s * p[l.emb + r];
                if w != 0.0 {
                    let row = &mut g[base + r * l.raw..base + (r + 1) * l.raw];
                    for (gi, sj) in row.iter_mut().zip(spec) {
                        *gi += w * sj;
                    }
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

impl PredictorHead {
    /// Zero output weights, the given bias, identity affine and a seeded
    /// Gaussian projection.
    pub fn initial(config: HeadConfig, bias: f64) -> Result<Self> {
        config.validate()?;
        let f = config.feature_dim();
        let norm = config.use_layer_norm.then(|| LayerNormAffine {
            scale: vec![1.0; f],
            offset: vec![0.0; f],
        });
        let projection = (config.variant == HeadVariant::Spectrum).then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let std = 1.0 / config.raw_aux_dim as f64;
            let normal = Normal::new(0.0, std).expect("positive std");
            (0..config.aux_dim * config.raw_aux_dim)
                .map(|_| normal.sample(&mut rng) as f32)
                .collect()
        });
        Ok(Self {
            weights: vec![0.0; f],
            bias: bias as f32,
            projection,
            norm,
            config,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let f = self.config.feature_dim();
        let dim = |expected: usize, got: usize| {
            if expected == got {
                Ok(())
            } else {
                Err(Error::DimensionMismatch { expected, got })
            }
        };
        dim(f, self.weights.len())?;
        match (&self.norm, self.config.use_layer_norm) {
            (Some(n), true) => {
                dim(f, n.scale.len())?;
                dim(f, n.offset.len())?;
            }
            (None, false) => {}
            _ => {
                return Err(Error::InvalidConfig(
                    "layer-norm parameters present iff use_layer_norm".into(),
                ))
            }
        }
        match (&self.projection, self.config.variant) {
            (Some(p), HeadVariant::Spectrum) => {
                dim(self.config.aux_dim * self.config.raw_aux_dim, p.len())?
            }
            (None, v) if v != HeadVariant::Spectrum => {}
            _ => {
                return Err(Error::InvalidConfig(
                    "projection present iff variant is spectrum".into(),
                ))
            }
        }
        let all = self
            .weights
            .iter()
            .chain(std::iter::once(&self.bias))
            .chain(self.projection.iter().flatten())
            .chain(
                self.norm
                    .iter()
                    .flat_map(|n| n.scale.iter().chain(&n.offset)),
            );
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("head parameter"));
        }
        Ok(())
    }

    /// Flat parameters: output weights, bias, layer-norm scale and offset
    /// (if any), then projection rows (if any).
    pub fn parameters(&self) -> Vec<f64> {
        self.to_params()
    }

    pub(crate) fn to_params(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.weights.iter().map(|&w| f64::from(w)).collect();
        p.push(f64::from(self.bias));
        if let Some(n) = &self.norm {
            p.extend(n.scale.iter().map(|&v| f64::from(v)));
            p.extend(n.offset.iter().map(|&v| f64::from(v)));
        }
        if let Some(proj) = &self.projection {
            p.extend(proj.iter().map(|&v| f64::from(v)));
        }
        p
    }

    pub(crate) fn from_params(config: HeadConfig, p: &[f64]) -> Self {
        let l = ParamLayout::of(&config);
        debug_assert_eq!(p.len(), l.len());
        let norm = l.norm.then(|| LayerNormAffine {
            scale: to_f32(&p[l.scale()..l.offset()]),
            offset: to_f32(&p[l.offset()..l.offset() + l.features]),
        });
        let projection = l.projection.then(|| to_f32(&p[l.projection()..l.len()]));
        Self {
            weights: to_f32(&p[..l.features]),
            bias: p[l.bias()] as f32,
            projection,
            norm,
            config,
        }
    }

    /// Maps a [`HeadInput`] to the vector the output layer consumes.
    pub fn feature_vector(&self, input: &HeadInput) -> Result<Vec<f64>> {
        if input.0.len() != self.config.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.config.input_dim(),
                got: input.0.len(),
            });
        }
        let mut v = Vec::with_capacity(self.config.feature_dim());
        ParamLayout::of(&self.config).features_into(&self.to_params(), &input.0, &mut v);
        Ok(v)
    }

    pub fn assemble_features(&self, feats: &UtteranceFeatures) -> Result<Vec<f64>> {
        self.feature_vector(&assemble_input(&self.config, feats)?)
    }

    /// `w·v + b`, unclamped.
    pub fn forward(&self, v: &[f64]) -> Result<f64> {
        if v.len() != self.weights.len() {
            return Err(Error::DimensionMismatch {
                expected: self.weights.len(),
                got: v.len(),
            });
        }
        Ok(self
            .weights
            .iter()
            .zip(v)
            .map(|(&w, x)| f64::from(w) * x)
            .sum::<f64>()
            + f64::from(self.bias))
    }

    pub fn score(&self, input: &HeadInput) -> Result<f64> {
        self.forward(&self.feature_vector(input)?)
    }
}

/// Mean L1 loss and its subgradient at `params` (layout of
/// [`PredictorHead::parameters`]).
pub fn l1_loss_and_gradient(
    config: &HeadConfig,
    params: &[f64],
    inputs: &[HeadInput],
    labels: &[f64],
) -> Result<(f64, Vec<f64>)> {
    config.validate()?;
    let layout = ParamLayout::of(config);
    if params.len() != layout.len() {
        return Err(Error::DimensionMismatch {
            expected: layout.len(),
            got: params.len(),
        });
    }
    if inputs.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: inputs.len(),
            got: labels.len(),
        });
    }
    if inputs.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if let Some(bad) = inputs.iter().find(|x| x.0.len() != config.input_dim()) {
        return Err(Error::DimensionMismatch {
            expected: config.input_dim(),
            got: bad.0.len(),
        });
    }
    let refs: Vec<&HeadInput> = inputs.iter().collect();
    let mut grad = vec![0.0; params.len()];
    let loss =
        training::batch_l1_gradient(&HeadObjective { layout }, params, &refs, labels, &mut grad);
    Ok((loss, grad))
}

pub(crate) fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains a head of the given configuration by L1 mini-batch SGD.
pub fn train_head(
    config: HeadConfig,
    train: &Dataset<HeadInput>,
    val: &Dataset<HeadInput>,
    cfg: &TrainConfig,
) -> Result<(PredictorHead, TrainingLog)> {
    config.validate()?;
    training::check_splits(train, val)?;
    let expected = config.input_dim();
    if let Some(bad) = train
        .inputs
        .iter()
        .chain(&val.inputs)
        .find(|x| x.0.len() != expected)
    {
        return Err(Error::DimensionMismatch {
            expected,
            got: bad.0.len(),
        });
    }
    let init = PredictorHead::initial(config.clone(), median(&train.labels))?;
    let objective = HeadObjective {
        layout: ParamLayout::of(&config),
    };
    let (params, log) = training::fit(&objective, init.to_params(), train, val, cfg)?;
    Ok((PredictorHead::from_params(config, &params), log))
}

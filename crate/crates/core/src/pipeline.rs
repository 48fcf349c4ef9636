//! File-level glue between manifests, feature files and models.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::audio;
use crate::error::{Error, Result};
use crate::features::{self, FeatureKind, FeatureSequence};
use crate::fusion;
use crate::heads::{self, HeadConfig, HeadInput, HeadVariant, UtteranceFeatures};
use crate::manifest::{UtteranceRecord, MOS_MAX, MOS_MIN};
use crate::metrics;
use crate::model_file::{self, FusionFile, HeadModel, FUSION_MAGIC};
use crate::pitch::{self, HistogramNorm, PitchHistogram, PitchTrack, NUM_BINS};
use crate::spectral;
use crate::training::Dataset;

pub const JOBS_ENV: &str = "SINGQA_JOBS";

/// Runs `f` over `items` on at most `jobs` threads (0 = all cores),
/// keeping input order.
pub fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    jobs: usize,
    f: impl Fn(&T) -> R + Sync + Send,
) -> Result<Vec<R>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    Ok(pool.install(|| items.par_iter().map(f).collect()))
}

/// Filesystem-safe stem; ids that need rewriting get a digest suffix to stay unique.
fn file_stem_for(utt_id: &str) -> String {
    let safe: String = utt_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect();
    if safe == utt_id && !safe.starts_with('.') {
        return safe;
    }
    let digest = Sha256::digest(utt_id.as_bytes());
    format!("{safe}-{}", hex::encode(&digest[..4]))
}

fn wav_of(record: &UtteranceRecord) -> Result<&Path> {
    record
        .wav_path
        .as_deref()
        .ok_or_else(|| Error::MissingInput("wav_path".into()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PitchParams {
    pub frame_shift: f64,
    pub f0_min: f64,
    pub f0_max: f64,
    pub norm: HistogramNorm,
}

impl Default for PitchParams {
    fn default() -> Self {
        Self {
            frame_shift: pitch::DEFAULT_FRAME_SHIFT,
            f0_min: pitch::DEFAULT_F0_MIN,
            f0_max: pitch::DEFAULT_F0_MAX,
            norm: HistogramNorm::Voiced,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PitchOutcome {
    pub path: PathBuf,
    /// As stored on disk (f32 precision).
    pub track: PitchTrack,
    pub histogram: PitchHistogram,
}

/// Tracks one utterance and writes `<out_dir>/<utt_id>.pitch`.
pub fn extract_pitch_one(
    record: &UtteranceRecord,
    out_dir: &Path,
    params: &PitchParams,
) -> Result<PitchOutcome> {
    let run = || {
        let clip = audio::read_wav(wav_of(record)?)?;
        let track = pitch::track_pitch(&clip, params.frame_shift, params.f0_min, params.f0_max)?;
        let seq = track.to_feature_sequence();
        let path = out_dir.join(format!("{}.pitch", file_stem_for(&record.utt_id)));
        features::write_feature_file(&seq, &path)?;
        let track = PitchTrack::from_feature_sequence(&seq)?;
        let histogram = pitch::compute_histogram(&track, params.norm);
        Ok(PitchOutcome {
            path,
            track,
            histogram,
        })
    };
    run().map_err(Error::for_utterance(&record.utt_id))
}

/// Computes `<out_dir>/<utt_id>.spec` for one utterance.
pub fn extract_spectral_one(
    record: &UtteranceRecord,
    out_dir: &Path,
    frame_shift: f64,
    fft_size: usize,
) -> Result<PathBuf> {
    let run = || {
        let clip = audio::read_wav(wav_of(record)?)?;
        let seq = spectral::stft_amplitude_phase(&clip, frame_shift, fft_size)?;
        let path = out_dir.join(format!("{}.spec", file_stem_for(&record.utt_id)));
        features::write_feature_file(&seq, &path)?;
        Ok(path)
    };
    run().map_err(Error::for_utterance(&record.utt_id))
}

pub fn histogram_csv_header() -> String {
    let mut h = String::from("utt_id");
    for j in 1..=NUM_BINS {
        let _ = write!(h, ",bin{j}");
    }
    h.push_str(",sharpness");
    h
}

/// One CSV row; sharpness is `nan` when nothing is voiced.
pub fn histogram_csv_row(utt_id: &str, hist: &PitchHistogram) -> String {
    let mut row = utt_id.to_string();
    for b in &hist.bins {
        let _ = write!(row, ",{}", metrics::format_value(*b));
    }
    let sharp = pitch::histogram_sharpness(hist).unwrap_or(f64::NAN);
    let _ = write!(row, ",{}", metrics::format_value(sharp));
    row
}

pub fn read_pitch_track(path: &Path) -> Result<PitchTrack> {
    PitchTrack::from_feature_sequence(&features::read_feature_file(path)?)
}

fn feature_file(record: &UtteranceRecord, kind: FeatureKind) -> Result<FeatureSequence> {
    let path = record
        .feature_path(kind)
        .ok_or_else(|| Error::MissingInput(format!("{kind} feature path")))?;
    let seq = features::read_feature_file(path)?;
    if seq.kind() != kind {
        return Err(Error::FeatureFormat(format!(
            "{} holds {} features, expected {kind}",
            path.display(),
            seq.kind()
        )));
    }
    Ok(seq)
}

/// Loads the frame-level inputs a head of `variant` needs.
pub fn load_features(record: &UtteranceRecord, variant: HeadVariant) -> Result<UtteranceFeatures> {
    let run = || {
        let embedding = feature_file(record, FeatureKind::Embedding)?;
        let pitch = match variant {
            HeadVariant::CompressedPitch | HeadVariant::PitchHistogram => Some(
                PitchTrack::from_feature_sequence(&feature_file(record, FeatureKind::Pitch)?)?,
            ),
            _ => None,
        };
        let spectral = match variant {
            HeadVariant::Spectrum => Some(feature_file(record, FeatureKind::Spectral)?),
            _ => None,
        };
        Ok(UtteranceFeatures {
            embedding,
            pitch,
            spectral,
        })
    };
    run().map_err(Error::for_utterance(&record.utt_id))
}

pub fn load_inputs(records: &[UtteranceRecord], config: &HeadConfig) -> Result<Vec<HeadInput>> {
    records
        .iter()
        .map(|r| {
            heads::assemble_input(config, &load_features(r, config.variant)?)
                .map_err(Error::for_utterance(&r.utt_id))
        })
        .collect()
}

/// Options not recoverable from the feature files themselves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadOptions {
    pub projection_dim: usize,
    pub use_layer_norm: bool,
    pub histogram_norm: HistogramNorm,
    pub seed: u64,
}

impl Default for HeadOptions {
    fn default() -> Self {
        Self {
            projection_dim: heads::DEFAULT_PROJECTION_DIM,
            use_layer_norm: true,
            histogram_norm: HistogramNorm::Voiced,
            seed: 0,
        }
    }
}

/// Head configuration with dimensions taken from the first record's files.
pub fn infer_config(
    variant: HeadVariant,
    records: &[UtteranceRecord],
    opts: &HeadOptions,
) -> Result<HeadConfig> {
    let first = records.first().ok_or(Error::Empty("manifest"))?;
    let emb = feature_file(first, FeatureKind::Embedding)
        .map_err(Error::for_utterance(&first.utt_id))?
        .dims();
    let mut config = match variant {
        HeadVariant::Plain => HeadConfig::plain(emb),
        HeadVariant::CompressedPitch => HeadConfig::compressed_pitch(emb),
        HeadVariant::PitchHistogram => HeadConfig::pitch_histogram(emb, opts.use_layer_norm),
        HeadVariant::Spectrum => {
            let raw = feature_file(first, FeatureKind::Spectral)
                .map_err(Error::for_utterance(&first.utt_id))?
                .dims();
            HeadConfig::spectrum(emb, raw, opts.projection_dim)
        }
    };
    config.histogram_norm = opts.histogram_norm;
    config.seed = opts.seed;
    config.validate()?;
    Ok(config)
}

/// Pairs inputs with the manifest's labels and systems; every row needs a label.
pub fn labeled<I>(records: &[UtteranceRecord], inputs: Vec<I>) -> Result<Dataset<I>> {
    let labels = records
        .iter()
        .map(|r| {
            r.mos_label.ok_or_else(|| {
                Error::for_utterance(&r.utt_id)(Error::MissingInput("mos label".into()))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let systems = records.iter().map(|r| r.system_id.clone()).collect();
    Dataset::new(inputs, labels, systems)
}

/// A head model or a fusion of head models.
#[derive(Debug, Clone)]
pub enum Predictor {
    Head(HeadModel),
    Fusion {
        file: FusionFile,
        members: Vec<HeadModel>,
    },
}

impl Predictor {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if text.starts_with(FUSION_MAGIC) {
            let (file, members) = model_file::read_fusion(path)?;
            Ok(Predictor::Fusion { file, members })
        } else {
            Ok(Predictor::Head(model_file::parse_head_model(&text, path)?))
        }
    }

    pub fn score(&self, record: &UtteranceRecord) -> Result<f64> {
        let member_score = |m: &HeadModel| {
            let feats = load_features(record, m.head.config.variant)?;
            m.score(&heads::assemble_input(&m.head.config, &feats)?)
                .map_err(Error::for_utterance(&record.utt_id))
        };
        self.combine(member_score)
    }

    /// Scores already loaded features; every member sees the same set.
    pub fn score_features(&self, feats: &UtteranceFeatures) -> Result<f64> {
        self.combine(|m| m.score(&heads::assemble_input(&m.head.config, feats)?))
    }

    pub fn members(&self) -> &[HeadModel] {
        match self {
            Predictor::Head(m) => std::slice::from_ref(m),
            Predictor::Fusion { members, .. } => members,
        }
    }

    fn combine(&self, member_score: impl Fn(&HeadModel) -> Result<f64>) -> Result<f64> {
        match self {
            Predictor::Head(m) => member_score(m),
            Predictor::Fusion { file, members } => {
                let scores = members
                    .iter()
                    .map(member_score)
                    .collect::<Result<Vec<_>>>()?;
                fusion::fuse_forward(&scores, &file.model)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub utt_id: String,
    pub raw_score: f64,
    pub clamped_score: f64,
}

pub fn clamp_mos(score: f64) -> f64 {
    score.clamp(MOS_MIN, MOS_MAX)
}

pub const PREDICTIONS_CSV_HEADER: &str = "utt_id,raw_score,clamped_score";

pub fn write_predictions(predictions: &[Prediction], path: &Path) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(PREDICTIONS_CSV_HEADER.split(','))
        .map_err(csv_err)?;
    for p in predictions {
        w.write_record([
            p.utt_id.clone(),
            metrics::format_value(p.raw_score),
            metrics::format_value(p.clamped_score),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let bad = |row: usize, message: String| Error::Csv {
        path: path.to_path_buf(),
        message: if row == 0 {
            message
        } else {
            format!("row {row}: {message}")
        },
    };
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| bad(0, e.to_string()))?;
    let header = r.headers().map_err(|e| bad(0, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>().join(",") != PREDICTIONS_CSV_HEADER {
        return Err(bad(
            0,
            format!("expected header `{PREDICTIONS_CSV_HEADER}`"),
        ));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| bad(row, e.to_string()))?;
        let num = |j: usize| {
            rec[j]
                .parse::<f64>()
                .map_err(|_| bad(row, format!("unparsable score `{}`", &rec[j])))
        };
        out.push(Prediction {
            utt_id: rec[0].to_string(),
            raw_score: num(1)?,
            clamped_score: num(2)?,
        });
    }
    Ok(out)
}

/// Scores every record; fails on the first utterance error.
pub fn predict_records(
    predictor: &Predictor,
    records: &[UtteranceRecord],
) -> Result<Vec<Prediction>> {
    records
        .iter()
        .map(|r| {
            let raw = predictor.score(r)?;
            Ok(Prediction {
                utt_id: r.utt_id.clone(),
                raw_score: raw,
                clamped_score: clamp_mos(raw),
            })
        })
        .collect()
}

/// Report of raw (or clamped) predictions against manifest labels, in
/// manifest order. Every labelled record needs a prediction.
pub fn evaluate_predictions(
    predictions: &[Prediction],
    records: &[UtteranceRecord],
    use_clamped: bool,
) -> Result<metrics::MetricReport> {
    let by_id: std::collections::HashMap<&str, &Prediction> =
        predictions.iter().map(|p| (p.utt_id.as_str(), p)).collect();
    let mut pred = Vec::new();
    let mut label = Vec::new();
    let mut systems = Vec::new();
    for r in records {
        let Some(y) = r.mos_label else { continue };
        let p = by_id.get(r.utt_id.as_str()).ok_or_else(|| {
            Error::for_utterance(&r.utt_id)(Error::MissingInput("prediction".into()))
        })?;
        pred.push(if use_clamped {
            p.clamped_score
        } else {
            p.raw_score
        });
        label.push(y);
        systems.push(r.system_id.as_str());
    }
    if pred.is_empty() {
        return Err(Error::Empty("labelled predictions"));
    }
    metrics::full_report(&pred, &label, &systems)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stems_are_filesystem_safe() {
        assert_eq!(file_stem_for("a-b_c.d"), "a-b_c.d");
        let rewritten = file_stem_for("sys1/utt 3");
        assert!(rewritten.starts_with("sys1_utt_3-"), "{rewritten}");
        assert_eq!(rewritten.len(), "sys1_utt_3-".len() + 8);
        assert_ne!(file_stem_for("a/b"), file_stem_for("a_b"));
        assert_ne!(file_stem_for("a/b"), file_stem_for("a:b"));
        assert!(file_stem_for("..").starts_with("..-"));
    }

    #[test]
    fn histogram_row_layout() {
        let track = PitchTrack::from_estimates(&[Some(440.0), None], 0.02).unwrap();
        let hist = pitch::compute_histogram(&track, HistogramNorm::Voiced);
        let row = histogram_csv_row("u1", &hist);
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells.len(), 122);
        assert_eq!(&cells[..3], &["u1", "1", "0"]);
        assert_eq!(cells[121], "0");
        assert_eq!(histogram_csv_header().split(',').count(), 122);

        let silent = PitchTrack::from_estimates(&[None], 0.02).unwrap();
        let row = histogram_csv_row(
            "u2",
            &pitch::compute_histogram(&silent, HistogramNorm::Voiced),
        );
        assert!(row.ends_with(",nan"));
    }

    #[test]
    fn predictions_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        let preds = vec![
            Prediction {
                utt_id: "a".into(),
                raw_score: 5.300000000000001,
                clamped_score: 5.0,
            },
            Prediction {
                utt_id: "b,c".into(),
                raw_score: 0.1 + 0.2,
                clamped_score: 1.0,
            },
        ];
        write_predictions(&preds, &p).unwrap();
        assert_eq!(read_predictions(&p).unwrap(), preds);
    }

    #[test]
    fn clamping() {
        assert_eq!(clamp_mos(0.3), 1.0);
        assert_eq!(clamp_mos(3.3), 3.3);
        assert_eq!(clamp_mos(7.0), 5.0);
    }
}

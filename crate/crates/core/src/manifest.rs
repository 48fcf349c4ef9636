//! Dataset manifests.
//!
//! A manifest is a CSV file with the header
//! `utt_id,system_id,wav_path,mos,emb_path,spec_path,pitch_path`. Empty cells
//! mean "absent". Relative paths are resolved against the manifest's directory.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::features::FeatureKind;

pub const HEADER: [&str; 7] = [
    "utt_id",
    "system_id",
    "wav_path",
    "mos",
    "emb_path",
    "spec_path",
    "pitch_path",
];

pub const MOS_MIN: f64 = 1.0;
pub const MOS_MAX: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub utt_id: String,
    pub system_id: String,
    pub wav_path: Option<PathBuf>,
    pub feature_paths: BTreeMap<FeatureKind, PathBuf>,
    pub mos_label: Option<f64>,
}

impl UtteranceRecord {
    pub fn feature_path(&self, kind: FeatureKind) -> Option<&Path> {
        self.feature_paths.get(&kind).map(PathBuf::as_path)
    }
}

fn column_for(kind: FeatureKind) -> &'static str {
    match kind {
        FeatureKind::Embedding => "emb_path",
        FeatureKind::Spectral => "spec_path",
        FeatureKind::Pitch => "pitch_path",
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<UtteranceRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    parse_manifest(&text, path, base)
}

fn parse_manifest(text: &str, path: &Path, base: &Path) -> Result<Vec<UtteranceRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::ManifestRow {
            path: path.to_path_buf(),
            row: 0,
            message: e.to_string(),
        })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(utt_col), Some(sys_col)) = (col("utt_id"), col("system_id")) else {
        return Err(Error::ManifestRow {
            path: path.to_path_buf(),
            row: 0,
            message: "header must contain utt_id and system_id".into(),
        });
    };
    let wav_col = col("wav_path");
    let mos_col = col("mos");
    let kind_cols: Vec<(FeatureKind, usize)> = [
        FeatureKind::Embedding,
        FeatureKind::Spectral,
        FeatureKind::Pitch,
    ]
    .into_iter()
    .filter_map(|k| col(column_for(k)).map(|c| (k, c)))
    .collect();

    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let bad = |message: String| Error::ManifestRow {
            path: path.to_path_buf(),
            row: row_no,
            message,
        };
        let row = row.map_err(|e| bad(e.to_string()))?;
        if row.len() != headers.len() {
            return Err(bad(format!(
                "{} fields, header has {}",
                row.len(),
                headers.len()
            )));
        }
        let cell = |c: Option<usize>| c.map(|c| &row[c]).filter(|s| !s.is_empty());

        let utt_id = row[utt_col].to_string();
        if utt_id.is_empty() {
            return Err(bad("empty utt_id".into()));
        }
        let system_id = row[sys_col].to_string();
        if system_id.is_empty() {
            return Err(bad("empty system_id".into()));
        }
        if !seen.insert(utt_id.clone()) {
            return Err(Error::DuplicateUttId {
                path: path.to_path_buf(),
                utt_id,
            });
        }
        let mos_label = match cell(mos_col) {
            None => None,
            Some(s) => {
                let v: f64 = s
                    .parse()
                    .map_err(|_| bad(format!("mos `{s}` is not a number")))?;
                if !(MOS_MIN..=MOS_MAX).contains(&v) {
                    return Err(Error::LabelOutOfRange {
                        path: path.to_path_buf(),
                        row: row_no,
                        value: v,
                    });
                }
                Some(v)
            }
        };
        let wav_path = cell(wav_col).map(|s| base.join(s));
        let feature_paths: BTreeMap<_, _> = kind_cols
            .iter()
            .filter_map(|&(k, c)| cell(Some(c)).map(|s| (k, base.join(s))))
            .collect();
        if wav_path.is_none() && feature_paths.is_empty() {
            return Err(bad(format!(
                "utterance `{utt_id}` has neither wav_path nor feature paths"
            )));
        }
        records.push(UtteranceRecord {
            utt_id,
            system_id,
            wav_path,
            feature_paths,
            mos_label,
        });
    }
    Ok(records)
}

/// `target` relative to `dir` when it lies below it, absolute otherwise.
pub(crate) fn portable_path(target: &Path, dir: &Path) -> PathBuf {
    let abs = |p: &Path| {
        std::fs::canonicalize(p)
            .or_else(|_| std::path::absolute(p))
            .unwrap_or_else(|_| p.to_path_buf())
    };
    let (t, d) = (abs(target), abs(dir));
    t.strip_prefix(&d).map(Path::to_path_buf).unwrap_or(t)
}

/// Writes records with the canonical header. Paths below the manifest's
/// directory are written relative to it, all others absolute.
pub fn write_manifest(records: &[UtteranceRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(HEADER).map_err(csv_err)?;
    let show = |p: Option<&Path>| {
        p.map(|p| portable_path(p, dir).display().to_string())
            .unwrap_or_default()
    };
    for r in records {
        w.write_record([
            r.utt_id.clone(),
            r.system_id.clone(),
            show(r.wav_path.as_deref()),
            r.mos_label.map(|v| v.to_string()).unwrap_or_default(),
            show(r.feature_path(FeatureKind::Embedding)),
            show(r.feature_path(FeatureKind::Spectral)),
            show(r.feature_path(FeatureKind::Pitch)),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

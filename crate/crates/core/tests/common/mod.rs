//! Synthetic singing corpus for end-to-end tests: sung tones whose tuning and
//! noise degrade with the MOS label, plus embeddings correlated with it.

#![allow(dead_code)]

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use singqa::features::{write_feature_file, FeatureKind, FeatureSequence};
use singqa::framing;

pub const SAMPLE_RATE: u32 = 16000;
pub const CLIP_SAMPLES: usize = 9600;
pub const EMB_DIM: usize = 8;
pub const NUM_SYSTEMS: usize = 6;

pub struct Corpus {
    pub train_manifest: PathBuf,
    pub val_manifest: PathBuf,
}

fn write_wav(path: &Path, samples: &[f64]) {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for &s in samples {
        w.write_sample((s * 32767.0).round().clamp(-32768.0, 32767.0) as i16)
            .unwrap();
    }
    w.finalize().unwrap();
}

/// Three notes on a semitone grid; detuning and noise grow as the label drops.
fn sing(label: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let detune = Normal::new(0.0, 8.0 + 20.0 * (5.0 - label)).unwrap();
    let per_note = CLIP_SAMPLES / 3;
    let mut out = Vec::with_capacity(CLIP_SAMPLES);
    let mut phase = 0.0;
    for _ in 0..3 {
        let semitone = rng.random_range(-5..7) as f64;
        let cents = 100.0 * semitone + detune.sample(rng);
        let f0 = 220.0 * 2f64.powf(cents / 1200.0);
        for _ in 0..per_note {
            phase += 2.0 * PI * f0 / SAMPLE_RATE as f64;
            let s = 0.3 * (phase.sin() + 0.5 * (2.0 * phase).sin() + 0.25 * (3.0 * phase).sin());
            let noise = 0.01 * (5.0 - label) * rng.random_range(-1.0..1.0);
            out.push(s + noise);
        }
    }
    out
}

fn embedding(label: f64, direction: &[f64], rng: &mut ChaCha8Rng) -> FeatureSequence {
    let frames = framing::frame_count(CLIP_SAMPLES, SAMPLE_RATE, 0.02);
    let noise = Normal::new(0.0, 0.3).unwrap();
    let rows: Vec<Vec<f32>> = (0..frames)
        .map(|_| {
            direction
                .iter()
                .map(|c| (label * c + noise.sample(rng)) as f32)
                .collect()
        })
        .collect();
    FeatureSequence::from_rows(&rows, 0.02, FeatureKind::Embedding).unwrap()
}

/// Writes wavs, embeddings and train/val manifests (relative paths) into `dir`.
pub fn build_corpus(
    dir: &Path,
    seed: u64,
    train_per_system: usize,
    val_per_system: usize,
) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let direction: Vec<f64> = (0..EMB_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
    let label_noise = Normal::new(0.0, 0.2).unwrap();
    fs::create_dir_all(dir.join("audio")).unwrap();
    let mut manifests = Vec::new();
    for (split, per_system) in [("train", train_per_system), ("val", val_per_system)] {
        let mut text =
            String::from("utt_id,system_id,wav_path,mos,emb_path,spec_path,pitch_path\n");
        for s in 0..NUM_SYSTEMS {
            let quality = 1.5 + 0.6 * s as f64;
            for u in 0..per_system {
                let id = format!("{split}_s{s}_u{u}");
                let label = (quality + label_noise.sample(&mut rng)).clamp(1.0, 5.0);
                let label = (label * 100.0).round() / 100.0;
                write_wav(&dir.join(format!("audio/{id}.wav")), &sing(label, &mut rng));
                write_feature_file(
                    &embedding(label, &direction, &mut rng),
                    dir.join(format!("audio/{id}.emb")),
                )
                .unwrap();
                let _ = writeln!(text, "{id},sys{s},audio/{id}.wav,{label},audio/{id}.emb,,");
            }
        }
        let path = dir.join(format!("{split}.csv"));
        fs::write(&path, text).unwrap();
        manifests.push(path);
    }
    let val_manifest = manifests.pop().unwrap();
    let train_manifest = manifests.pop().unwrap();
    Corpus {
        train_manifest,
        val_manifest,
    }
}

pub fn singqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_singqa"))
        .args(args)
        .env_remove("SINGQA_JOBS")
        .output()
        .expect("run singqa")
}

/// Runs the binary and panics with its stderr unless it exits 0.
pub fn singqa_ok(args: &[&str]) -> String {
    let out = singqa(args);
    assert!(
        out.status.success(),
        "singqa {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// extract → train ×4 → bias-correct → fuse → predict → evaluate into `out`.
pub fn run_pipeline(corpus: &Corpus, out: &Path, max_epochs: usize) {
    let epochs = max_epochs.to_string();
    for split in ["train", "val"] {
        let src = if split == "train" {
            &corpus.train_manifest
        } else {
            &corpus.val_manifest
        };
        let dir = out.join(split);
        let m = dir.join("manifest.csv");
        singqa_ok(&["extract-pitch", s(src), s(&dir), "--jobs", "2"]);
        singqa_ok(&[
            "extract-spectral",
            s(&m),
            s(&dir),
            "--fft-size",
            "1024",
            "--jobs",
            "3",
        ]);
    }
    let train = out.join("train/manifest.csv");
    let val = out.join("val/manifest.csv");
    let models = out.join("models");
    fs::create_dir_all(&models).unwrap();
    let mut heads = Vec::new();
    for variant in ["plain", "compressed_pitch", "pitch_histogram", "spectrum"] {
        let model = models.join(format!("{variant}.model"));
        singqa_ok(&[
            "train",
            s(&train),
            s(&val),
            "--variant",
            variant,
            "--max-epochs",
            &epochs,
            "--lr",
            "0.001",
            "--seed",
            "3",
            "--projection-dim",
            "8",
            "--out",
            s(&model),
        ]);
        heads.push(model);
    }
    let corrected = models.join("pitch_histogram_bc.model");
    singqa_ok(&[
        "bias-correct",
        s(&heads[2]),
        s(&train),
        s(&val),
        "--max-epochs",
        &epochs,
        "--lr",
        "0.001",
        "--out",
        s(&corrected),
        "--segments",
        s(&out.join("segments.csv")),
        "--segments-base",
        s(&out.join("segments_base.csv")),
    ]);
    let fused = out.join("fused.fusion");
    let mut args = vec![
        "fuse",
        s(&train),
        s(&val),
        "-k",
        "3",
        "--max-epochs",
        &epochs,
        "--out",
        s(&fused),
        "--models",
    ];
    args.extend(heads.iter().map(|p| s(p)));
    args.push(s(&corrected));
    singqa_ok(&args);
    let preds = out.join("predictions.csv");
    singqa_ok(&["predict", s(&fused), s(&val), "--out", s(&preds)]);
    singqa_ok(&[
        "evaluate",
        s(&preds),
        s(&val),
        "--out",
        s(&out.join("report.csv")),
    ]);
}

/// Every regular file below `dir`, relative path and contents, sorted.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use singqa::bias::{self, DEFAULT_ALPHA, DEFAULT_BETA};
use singqa::error::{Error, Result};
use singqa::features::FeatureKind;
use singqa::fusion::{self, DEFAULT_TOP_K};
use singqa::heads::{self, HeadVariant};
use singqa::manifest::{self, UtteranceRecord};
use singqa::metrics;
use singqa::model_file::{self, HeadModel};
use singqa::pipeline::{self, HeadOptions, PitchParams, Predictor};
use singqa::pitch::{self, HistogramNorm};
use singqa::training::{Dataset, TrainConfig, TrainingLog};

#[derive(Parser)]
#[command(name = "singqa", version, about = "Singing quality assessment toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track pitch for every wav in a manifest; write pitch files and histograms
    ExtractPitch(ExtractPitchArgs),
    /// Compute amplitude/phase spectra for every wav in a manifest
    ExtractSpectral(ExtractSpectralArgs),
    /// Pitch histograms and sharpness from existing pitch files
    Histogram(HistogramArgs),
    /// Train a predictor head
    Train(TrainArgs),
    /// Train a bias-correction branch on top of a trained head
    BiasCorrect(BiasArgs),
    /// Rank trained heads and fit a linear combiner over the top k
    Fuse(FuseArgs),
    /// Score a manifest with a head or fusion model
    Predict(PredictArgs),
    /// Compare predictions with manifest labels
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct Jobs {
    /// Worker threads for extraction (0 = all cores)
    #[arg(long, env = pipeline::JOBS_ENV, default_value_t = 0)]
    jobs: usize,
}

#[derive(Args)]
struct ExtractPitchArgs {
    manifest: PathBuf,
    out_dir: PathBuf,
    #[arg(long, default_value_t = pitch::DEFAULT_FRAME_SHIFT)]
    frame_shift: f64,
    #[arg(long, default_value_t = pitch::DEFAULT_F0_MIN)]
    f0_min: f64,
    #[arg(long, default_value_t = pitch::DEFAULT_F0_MAX)]
    f0_max: f64,
    #[arg(long, default_value = "voiced", value_parser = parse_norm)]
    norm: HistogramNorm,
    /// Updated manifest path [default: <out_dir>/manifest.csv]
    #[arg(long)]
    manifest_out: Option<PathBuf>,
    #[command(flatten)]
    jobs: Jobs,
}

#[derive(Args)]
struct ExtractSpectralArgs {
    manifest: PathBuf,
    out_dir: PathBuf,
    #[arg(long, default_value_t = pitch::DEFAULT_FRAME_SHIFT)]
    frame_shift: f64,
    #[arg(long, default_value_t = 1024)]
    fft_size: usize,
    /// Updated manifest path [default: <out_dir>/manifest.csv]
    #[arg(long)]
    manifest_out: Option<PathBuf>,
    #[command(flatten)]
    jobs: Jobs,
}

#[derive(Args)]
struct HistogramArgs {
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "voiced", value_parser = parse_norm)]
    norm: HistogramNorm,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 1000)]
    max_epochs: usize,
    #[arg(long, default_value_t = 15)]
    patience: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl TrainFlags {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            early_stop_patience: self.patience,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    train_manifest: PathBuf,
    val_manifest: PathBuf,
    #[arg(long, value_parser = parse_variant)]
    variant: HeadVariant,
    #[command(flatten)]
    train: TrainFlags,
    /// Projection width of the spectrum head
    #[arg(long, default_value_t = heads::DEFAULT_PROJECTION_DIM)]
    projection_dim: usize,
    /// Skip layer normalization in the pitch-histogram head
    #[arg(long)]
    no_layer_norm: bool,
    #[arg(long, default_value = "voiced", value_parser = parse_norm)]
    norm: HistogramNorm,
    #[arg(long)]
    out: PathBuf,
    /// Training log CSV [default: <out>.log.csv]
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct BiasArgs {
    model: PathBuf,
    train_manifest: PathBuf,
    val_manifest: PathBuf,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value_t = DEFAULT_BETA)]
    beta: f64,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    out: PathBuf,
    /// Training log CSV [default: <out>.log.csv]
    #[arg(long)]
    log: Option<PathBuf>,
    /// Per-segment validation MSE of the corrected scores
    #[arg(long)]
    segments: Option<PathBuf>,
    /// Per-segment validation MSE of the uncorrected scores
    #[arg(long)]
    segments_base: Option<PathBuf>,
}

#[derive(Args)]
struct FuseArgs {
    train_manifest: PathBuf,
    val_manifest: PathBuf,
    /// Trained head models; member ids are their file stems
    #[arg(long, num_args = 1.., required = true)]
    models: Vec<PathBuf>,
    #[arg(short, long, default_value_t = DEFAULT_TOP_K)]
    k: usize,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    out: PathBuf,
    /// Training log CSV [default: <out>.log.csv]
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    jobs: Jobs,
}

#[derive(Args)]
struct PredictArgs {
    model: PathBuf,
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    predictions: PathBuf,
    manifest: PathBuf,
    /// Report CSV
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluate clamped instead of raw scores
    #[arg(long)]
    clamped: bool,
}

fn parse_norm(s: &str) -> Result<HistogramNorm> {
    HistogramNorm::parse(s)
}

fn parse_variant(s: &str) -> Result<HeadVariant> {
    s.parse()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn log_path(explicit: &Option<PathBuf>, out: &Path) -> PathBuf {
    explicit.clone().unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".log.csv");
        PathBuf::from(s)
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes the manifest with `kind` paths updated for successful rows.
fn write_updated_manifest(
    records: &[UtteranceRecord],
    produced: &[Option<PathBuf>],
    kind: FeatureKind,
    path: &Path,
) -> Result<()> {
    let updated: Vec<UtteranceRecord> = records
        .iter()
        .zip(produced)
        .map(|(r, p)| {
            let mut r = r.clone();
            if let Some(p) = p {
                r.feature_paths.insert(kind, p.clone());
            }
            r
        })
        .collect();
    manifest::write_manifest(&updated, path)
}

fn extract_pitch(a: &ExtractPitchArgs) -> Result<bool> {
    let records = manifest::load_manifest(&a.manifest)?;
    create_dir(&a.out_dir)?;
    let params = PitchParams {
        frame_shift: a.frame_shift,
        f0_min: a.f0_min,
        f0_max: a.f0_max,
        norm: a.norm,
    };
    let outcomes = pipeline::parallel_map(&records, a.jobs.jobs, |r| {
        pipeline::extract_pitch_one(r, &a.out_dir, &params)
    })?;

    let mut csv = pipeline::histogram_csv_header();
    csv.push('\n');
    let mut produced = Vec::with_capacity(records.len());
    let mut ok = true;
    for (r, o) in records.iter().zip(outcomes) {
        match o {
            Ok(o) => {
                csv.push_str(&pipeline::histogram_csv_row(&r.utt_id, &o.histogram));
                csv.push('\n');
                produced.push(Some(o.path));
            }
            Err(e) => {
                log::error!("{e}");
                ok = false;
                produced.push(None);
            }
        }
    }
    write_text(&a.out_dir.join("histograms.csv"), &csv)?;
    let out = a
        .manifest_out
        .clone()
        .unwrap_or_else(|| a.out_dir.join("manifest.csv"));
    write_updated_manifest(&records, &produced, FeatureKind::Pitch, &out)?;
    Ok(ok)
}

fn extract_spectral(a: &ExtractSpectralArgs) -> Result<bool> {
    let records = manifest::load_manifest(&a.manifest)?;
    create_dir(&a.out_dir)?;
    let outcomes = pipeline::parallel_map(&records, a.jobs.jobs, |r| {
        pipeline::extract_spectral_one(r, &a.out_dir, a.frame_shift, a.fft_size)
    })?;
    let mut ok = true;
    let produced: Vec<Option<PathBuf>> = outcomes
        .into_iter()
        .map(|o| {
            o.map_err(|e| {
                log::error!("{e}");
                ok = false;
            })
            .ok()
        })
        .collect();
    let out = a
        .manifest_out
        .clone()
        .unwrap_or_else(|| a.out_dir.join("manifest.csv"));
    write_updated_manifest(&records, &produced, FeatureKind::Spectral, &out)?;
    Ok(ok)
}

fn histogram(a: &HistogramArgs) -> Result<bool> {
    let records = manifest::load_manifest(&a.manifest)?;
    let mut csv = pipeline::histogram_csv_header();
    csv.push('\n');
    let mut ok = true;
    for r in &records {
        let track = r
            .feature_path(FeatureKind::Pitch)
            .ok_or_else(|| Error::MissingInput("pitch_path".into()))
            .and_then(pipeline::read_pitch_track);
        match track {
            Ok(t) => {
                let h = pitch::compute_histogram(&t, a.norm);
                csv.push_str(&pipeline::histogram_csv_row(&r.utt_id, &h));
                csv.push('\n');
            }
            Err(e) => {
                log::error!("utterance `{}`: {e}", r.utt_id);
                ok = false;
            }
        }
    }
    write_text(&a.out, &csv)?;
    Ok(ok)
}

fn report_best(log: &TrainingLog) {
    let best = log.best();
    println!(
        "best epoch {}: val system SRCC {}, val L1 {}",
        best.epoch,
        metrics::format_value(best.val_srcc_system),
        metrics::format_value(best.val_l1)
    );
}

fn train(a: &TrainArgs) -> Result<bool> {
    let train_records = manifest::load_manifest(&a.train_manifest)?;
    let val_records = manifest::load_manifest(&a.val_manifest)?;
    let opts = HeadOptions {
        projection_dim: a.projection_dim,
        use_layer_norm: !a.no_layer_norm,
        histogram_norm: a.norm,
        seed: a.train.seed,
    };
    let config = pipeline::infer_config(a.variant, &train_records, &opts)?;
    let train = pipeline::labeled(
        &train_records,
        pipeline::load_inputs(&train_records, &config)?,
    )?;
    let val = pipeline::labeled(&val_records, pipeline::load_inputs(&val_records, &config)?)?;
    let (head, log) = heads::train_head(config, &train, &val, &a.train.config())?;
    model_file::write_head_model(&HeadModel::new(head, None)?, &a.out)?;
    write_text(&log_path(&a.log, &a.out), &log.to_csv())?;
    report_best(&log);
    Ok(true)
}

fn bias_correct(a: &BiasArgs) -> Result<bool> {
    let base = model_file::read_head_model(&a.model)?;
    let config = &base.head.config;
    let train_records = manifest::load_manifest(&a.train_manifest)?;
    let val_records = manifest::load_manifest(&a.val_manifest)?;
    let train = pipeline::labeled(
        &train_records,
        pipeline::load_inputs(&train_records, config)?,
    )?;
    let val = pipeline::labeled(&val_records, pipeline::load_inputs(&val_records, config)?)?;
    let (branch, log) =
        bias::train_bias_branch(&base.head, &train, &val, a.alpha, a.beta, &a.train.config())?;
    let corrected = HeadModel::new(base.head.clone(), Some(branch))?;
    model_file::write_head_model(&corrected, &a.out)?;
    write_text(&log_path(&a.log, &a.out), &log.to_csv())?;

    let score_all = |m: &HeadModel| {
        val.inputs
            .iter()
            .map(|x| m.score(x))
            .collect::<Result<Vec<_>>>()
    };
    let plain = HeadModel::new(base.head.clone(), None)?;
    for (path, model) in [(&a.segments, &corrected), (&a.segments_base, &plain)] {
        if let Some(path) = path {
            let segs = bias::segment_mse(&score_all(model)?, &val.labels)?;
            write_text(path, &bias::segments_to_csv(&segs))?;
        }
    }
    report_best(&log);
    Ok(true)
}

fn member_id(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .filter(|s| !s.is_empty() && !s.contains(char::is_whitespace))
        .map(str::to_string)
        .ok_or_else(|| {
            Error::InvalidConfig(format!("cannot derive a member id from {}", path.display()))
        })
}

/// Scores from every member, one row per record.
fn member_scores(
    members: &[HeadModel],
    records: &[UtteranceRecord],
    jobs: usize,
) -> Result<Vec<Vec<f64>>> {
    let per_record = pipeline::parallel_map(records, jobs, |r| {
        members
            .iter()
            .map(|m| Predictor::Head(m.clone()).score(r))
            .collect::<Result<Vec<f64>>>()
    })?;
    per_record.into_iter().collect()
}

fn fuse(a: &FuseArgs) -> Result<bool> {
    if a.k > a.models.len() {
        return Err(Error::NotEnoughPredictors {
            requested: a.k,
            available: a.models.len(),
        });
    }
    let ids = a
        .models
        .iter()
        .map(|p| member_id(p))
        .collect::<Result<Vec<_>>>()?;
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(Error::InvalidConfig(format!("duplicate member id `{dup}`")));
    }
    let models = a
        .models
        .iter()
        .map(|p| model_file::read_head_model(p))
        .collect::<Result<Vec<_>>>()?;
    let train_records = manifest::load_manifest(&a.train_manifest)?;
    let val_records = manifest::load_manifest(&a.val_manifest)?;
    let train_scores = member_scores(&models, &train_records, a.jobs.jobs)?;
    let val_scores = member_scores(&models, &val_records, a.jobs.jobs)?;
    let train_all = pipeline::labeled(&train_records, train_scores)?;
    let val_all = pipeline::labeled(&val_records, val_scores)?;

    let reports = ids
        .iter()
        .enumerate()
        .map(|(j, id)| {
            let pred: Vec<f64> = val_all.inputs.iter().map(|s| s[j]).collect();
            Ok((
                id.clone(),
                metrics::full_report(&pred, &val_all.labels, &val_all.systems)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let chosen = fusion::rank_predictors(&reports, a.k)?;
    let cols: Vec<usize> = chosen
        .iter()
        .map(|id| ids.iter().position(|i| i == id).expect("ranked id"))
        .collect();
    for id in &chosen {
        log::info!("selected member {id}");
    }
    let select = |d: &Dataset<Vec<f64>>| d.map(|s| cols.iter().map(|&j| s[j]).collect::<Vec<_>>());
    let (model, log) = fusion::train_combiner(
        chosen,
        &select(&train_all),
        &select(&val_all),
        &a.train.config(),
    )?;
    let paths: Vec<PathBuf> = cols.iter().map(|&j| a.models[j].clone()).collect();
    model_file::write_fusion_file(&model, &paths, &a.out)?;
    write_text(&log_path(&a.log, &a.out), &log.to_csv())?;
    report_best(&log);
    Ok(true)
}

fn predict(a: &PredictArgs) -> Result<bool> {
    let predictor = Predictor::load(&a.model)?;
    let records = manifest::load_manifest(&a.manifest)?;
    let predictions = pipeline::predict_records(&predictor, &records)?;
    pipeline::write_predictions(&predictions, &a.out)?;
    Ok(true)
}

fn evaluate(a: &EvaluateArgs) -> Result<bool> {
    let predictions = pipeline::read_predictions(&a.predictions)?;
    let records = manifest::load_manifest(&a.manifest)?;
    let report = pipeline::evaluate_predictions(&predictions, &records, a.clamped)?;
    print!("{report}");
    if let Some(out) = &a.out {
        write_text(out, &report.to_csv())?;
    }
    Ok(true)
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::ExtractPitch(a) => extract_pitch(a),
        Command::ExtractSpectral(a) => extract_spectral(a),
        Command::Histogram(a) => histogram(a),
        Command::Train(a) => train(a),
        Command::BiasCorrect(a) => bias_correct(a),
        Command::Fuse(a) => fuse(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

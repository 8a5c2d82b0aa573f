//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for runtime errors.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::corpus::{
    parse_conll, read_noise_mask, read_with_noise_mask, write_conll, write_noise_mask, ColumnSpec, CorpusError,
    Dataset, Sentence, Token,
};
use crate::dynamics::{
    compute_events, detect_noise, detection_metrics, histogram_first_learning, Aggregates, AnalysisReport,
    DetectorReport, DynamicsError, EventLedger,
};
use crate::encoder::{load_embeddings, EncoderError};
use crate::metrics::{entity_prf1, MetricsError};
use crate::perturb::{inject_noise, reduce_few_shot, PerturbError};
use crate::train::{
    predict_tags, run_training, write_curves_csv, write_history_csv, EncoderSetup, HeadKind, InferenceMode, TrainConfig,
    TrainError,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    File { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Corpus { path: PathBuf, source: CorpusError },
    #[error("{path}: {source}")]
    Embeddings { path: PathBuf, source: EncoderError },
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Parser)]
#[command(name = "protoseq", version, about = "Prototypical sequence labeling and training-dynamics toolkit")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Corrupt a fraction of token labels and write a noise-mask sidecar.
    InjectNoise(InjectNoiseArgs),
    /// Keep only some of the sentences containing a class.
    Reduce(ReduceArgs),
    /// Train a head and record the event ledger and metric history.
    Train(TrainArgs),
    /// Forgetting-event analytics and loss-threshold noise detection.
    Analyze(AnalyzeArgs),
    /// Entity-level scores of a predicted corpus against a gold corpus.
    Eval(EvalArgs),
}

#[derive(Debug, clap::Args)]
struct InjectNoiseArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Fraction of tokens to corrupt, in [0, 1].
    #[arg(long)]
    rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Mask sidecar path; defaults to `<out>.mask`.
    #[arg(long)]
    mask_out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct ReduceArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    class: String,
    #[arg(long)]
    keep: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Noise mask of the input; the reduced mask is written to `<out>.mask`.
    #[arg(long)]
    mask: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum HeadArg {
    Proto,
    Baseline,
}

#[derive(Debug, clap::Args)]
struct TrainArgs {
    /// TOML config; command-line flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: PathBuf,
    /// Validation corpus; defaults to the training corpus.
    #[arg(long)]
    eval: Option<PathBuf>,
    /// Noise mask of the training corpus.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, value_enum)]
    head: Option<HeadArg>,
    /// Precomputed vectors for the training corpus, replacing the built-in encoder.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Precomputed vectors for the validation corpus.
    #[arg(long)]
    eval_embeddings: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, clap::Args)]
struct AnalyzeArgs {
    /// Ledger CSV written by `train`.
    #[arg(long)]
    ledger: Option<PathBuf>,
    /// Per-example losses, one per line, instead of a ledger epoch.
    #[arg(long)]
    losses: Option<PathBuf>,
    /// Learning/forgetting aggregates.
    #[arg(long)]
    events: bool,
    /// Loss-threshold noise detection.
    #[arg(long)]
    detect_noise: bool,
    /// Distribution of first learning epochs.
    #[arg(long)]
    first_learning_histogram: bool,
    /// Ledger epoch whose losses feed the detector.
    #[arg(long, default_value_t = 4)]
    epoch: usize,
    /// Ground-truth noise mask for scoring the detector.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gold: PathBuf,
    /// Include per-class scores.
    #[arg(long)]
    per_class: bool,
    /// Report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|source| CliError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|source| CliError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn finish(path: &Path, mut w: BufWriter<File>) -> Result<(), CliError> {
    w.flush().map_err(|source| CliError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn corpus_err(path: &Path) -> impl FnOnce(CorpusError) -> CliError + '_ {
    move |source| CliError::Corpus {
        path: path.to_path_buf(),
        source,
    }
}

fn read_corpus(path: &Path, mask: Option<&Path>) -> Result<Dataset, CliError> {
    let spec = ColumnSpec::default();
    match mask {
        None => parse_conll(open(path)?, &spec).map_err(corpus_err(path)),
        Some(m) => read_with_noise_mask(open(path)?, open(m)?, &spec).map_err(corpus_err(m)),
    }
}

fn write_corpus(dataset: &Dataset, path: &Path) -> Result<(), CliError> {
    let mut w = create(path)?;
    write_conll(dataset, &mut w).map_err(corpus_err(path))?;
    finish(path, w)
}

fn write_mask(dataset: &Dataset, path: &Path) -> Result<(), CliError> {
    let mut w = create(path)?;
    write_noise_mask(dataset, &mut w).map_err(corpus_err(path))?;
    finish(path, w)
}

fn default_mask_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".mask");
    PathBuf::from(s)
}

fn emit_json<T: serde::Serialize>(value: &T, out: Option<&Path>) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => fs::write(p, text + "\n").map_err(|source| CliError::File {
            path: p.to_path_buf(),
            source,
        }),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn cmd_inject_noise(a: InjectNoiseArgs) -> Result<(), CliError> {
    let ds = read_corpus(&a.input, None)?;
    let noisy = inject_noise(&ds, a.rate, a.seed)?;
    write_corpus(&noisy, &a.out)?;
    write_mask(&noisy, &a.mask_out.unwrap_or_else(|| default_mask_path(&a.out)))
}

fn cmd_reduce(a: ReduceArgs) -> Result<(), CliError> {
    let ds = read_corpus(&a.input, a.mask.as_deref())?;
    let reduced = reduce_few_shot(&ds, &a.class, a.keep, a.seed)?;
    write_corpus(&reduced, &a.out)?;
    if a.mask.is_some() {
        write_mask(&reduced, &default_mask_path(&a.out))?;
    }
    Ok(())
}

fn load_vectors(path: &Path, dataset: &Dataset) -> Result<crate::encoder::PrecomputedEmbeddings, CliError> {
    load_embeddings(open(path)?, dataset).map_err(|source| CliError::Embeddings {
        path: path.to_path_buf(),
        source,
    })
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let mut config = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|source| CliError::File {
                path: p.clone(),
                source,
            })?;
            TrainConfig::from_toml(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(h) = a.head {
        config.head = match h {
            HeadArg::Proto => HeadKind::Proto,
            HeadArg::Baseline => HeadKind::Baseline,
        };
    }
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    config.validate()?;

    let train = read_corpus(&a.train, a.mask.as_deref())?;
    let eval = match &a.eval {
        Some(p) => read_corpus(p, None)?,
        None => train.clone(),
    };
    let mut eval_table = None;
    let setup = match (&a.embeddings, &a.eval_embeddings) {
        (None, None) => EncoderSetup::window(&config),
        (Some(t), e) => {
            let train_vecs = load_vectors(t, &train)?;
            let eval_vecs = match (e, &a.eval) {
                (Some(e), _) => load_vectors(e, &eval)?,
                (None, None) => train_vecs.clone(),
                (None, Some(_)) => {
                    return Err(CliError::Invalid(
                        "--eval-embeddings is required with --embeddings and --eval".into(),
                    ))
                }
            };
            eval_table = Some(eval_vecs.clone());
            EncoderSetup::precomputed(&config, train_vecs, eval_vecs)?
        }
        (None, Some(_)) => return Err(CliError::Invalid("--eval-embeddings requires --embeddings".into())),
    };

    let outcome = run_training(&config, &train, &eval, setup)?;
    fs::create_dir_all(&a.out).map_err(|source| CliError::File {
        path: a.out.clone(),
        source,
    })?;

    let p = a.out.join("checkpoint.json");
    let mut w = create(&p)?;
    outcome.checkpoint.write_json(&mut w)?;
    finish(&p, w)?;

    let p = a.out.join("ledger.csv");
    let mut w = create(&p)?;
    outcome.ledger.write_csv(&mut w)?;
    finish(&p, w)?;

    let p = a.out.join("history.csv");
    let mut w = create(&p)?;
    write_history_csv(&outcome.history, &mut w)?;
    finish(&p, w)?;

    let p = a.out.join("curves.csv");
    let mut w = create(&p)?;
    write_curves_csv(&outcome.history, &mut w)?;
    finish(&p, w)?;

    // Validation predictions of the selected checkpoint.
    let ckpt = &outcome.checkpoint;
    let use_running = config.inference == InferenceMode::Running;
    let tags = match (ckpt.window_encoder()?, eval_table) {
        (Some(enc), _) => predict_tags(&ckpt.head, &enc, &eval, use_running)?,
        (None, Some(table)) => predict_tags(&ckpt.head, &ckpt.restore_precomputed(table)?, &eval, use_running)?,
        (None, None) => unreachable!("precomputed checkpoints come from embedding files"),
    };
    let sentences = eval
        .sentences()
        .iter()
        .zip(&tags)
        .map(|(s, tags)| Sentence {
            tokens: s
                .tokens
                .iter()
                .zip(tags)
                .map(|(t, tag)| Token::clean(t.surface.clone(), tag.clone()))
                .collect(),
            doc_boundary: s.doc_boundary,
        })
        .collect();
    let predicted = Dataset::from_sentences(sentences).map_err(corpus_err(&a.out))?;
    write_corpus(&predicted, &a.out.join("predictions.conll"))
}

fn read_losses(path: &Path) -> Result<Vec<f64>, CliError> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|source| CliError::File {
            path: path.to_path_buf(),
            source,
        })?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        out.push(
            t.parse()
                .map_err(|_| CliError::Invalid(format!("{}:{}: not a number: {t}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<(), CliError> {
    if !(a.events || a.detect_noise || a.first_learning_histogram) {
        return Err(CliError::Invalid(
            "select at least one of --events, --detect-noise, --first-learning-histogram".into(),
        ));
    }
    let ledger = match &a.ledger {
        Some(p) => Some(EventLedger::read_csv(open(p)?)?),
        None => None,
    };
    let need_ledger = || CliError::Invalid("--ledger is required for event analytics".into());
    let mut report = AnalysisReport::default();
    if a.events || a.first_learning_histogram {
        let ledger = ledger.as_ref().ok_or_else(need_ledger)?;
        let summary = compute_events(ledger);
        if a.events {
            report.aggregates = Some(Aggregates::from(&summary));
        }
        if a.first_learning_histogram {
            let h = histogram_first_learning(&summary, ledger.records().len());
            report.histogram = Some(h.counts);
            report.never_learned = Some(h.never_learned);
        }
    }
    if a.detect_noise {
        let (losses, epoch) = match (&a.losses, &ledger) {
            (Some(p), _) => (read_losses(p)?, 0),
            (None, Some(l)) => {
                let losses = l
                    .losses_at(a.epoch)
                    .ok_or_else(|| CliError::Invalid(format!("epoch {} is not in the ledger", a.epoch)))?;
                (losses.to_vec(), a.epoch)
            }
            (None, None) => return Err(CliError::Invalid("--detect-noise needs --ledger or --losses".into())),
        };
        let result = detect_noise(&losses)?;
        let detection = match &a.mask {
            Some(p) => {
                let truth: Vec<bool> = read_noise_mask(open(p)?)
                    .map_err(corpus_err(p))?
                    .iter()
                    .map(Option::is_some)
                    .collect();
                Some(detection_metrics(&result.predicted_noisy, &truth)?)
            }
            None => None,
        };
        report.detector = Some(DetectorReport {
            epoch,
            threshold: result.threshold,
            mean_clean: result.mean_clean,
            mean_noisy: result.mean_noisy,
            objective: result.objective,
            degenerate: result.degenerate,
            flagged: result.predicted_noisy.iter().filter(|x| **x).count(),
            detection,
        });
    }
    emit_json(&report, a.out.as_deref())
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let spec = ColumnSpec::default();
    let pred = parse_conll(open(&a.pred)?, &spec).map_err(corpus_err(&a.pred))?;
    let gold = parse_conll(open(&a.gold)?, &spec).map_err(corpus_err(&a.gold))?;
    let p: Vec<_> = pred.sentences().iter().map(|s| s.observed_tags()).collect();
    let g: Vec<_> = gold.sentences().iter().map(|s| s.observed_tags()).collect();
    let report = entity_prf1(&p, &g)?;
    if a.per_class {
        emit_json(&report, a.out.as_deref())
    } else {
        emit_json(&report.prf1(), a.out.as_deref())
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::InjectNoise(a) => cmd_inject_noise(a),
        Command::Reduce(a) => cmd_reduce(a),
        Command::Train(a) => cmd_train(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

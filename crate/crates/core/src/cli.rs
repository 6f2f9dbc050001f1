//! Command-line front end. [`dispatch`] parses arguments, resolves settings
//! (flag, then `--config` file, then `CONVLENS_SEED` for the seed, then the
//! built-in default) and runs one subcommand.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use crate::artifact::{schema, Artifact, InputHash, Validate};
use crate::cluster::{cluster_filter_ngrams, FilterClusters};
use crate::corpus::{load_embeddings, parse_tsv_corpus, parse_tsv_rows, EmbeddingTable, LabeledCorpus, Split, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{deserialize_model, serialize_model, CnnModel, FilterSpec, ModelConfig};
use crate::negation::{find_negative_ngrams, FilterNegatives, DEFAULT_BOTTOM_K, DEFAULT_HAMMING};
use crate::numerics::SeededRng;
use crate::report::{explain_prediction, render_explanations_text, render_summary_text, summarize_model, FilterSummary, PredictionExplanation};
use crate::slots::{analyze_slots, NgramIndex};
use crate::synthetic::{generate, SyntheticConfig};
use crate::threshold::{
    build_threshold_dataset, derive_profiles, evaluate_thresholded, purity_sweep, FilterProfile, SweepPoint, ThresholdEvaluation,
    DEFAULT_PURITY,
};
use crate::train::{accuracy, train, TrainConfig};

pub const SEED_ENV: &str = "CONVLENS_SEED";

const CONFIG_KEYS: &[&str] = &[
    "seed", "epochs", "batch", "lr", "filters", "dim", "min-count", "fine-tune", "purity", "top-k", "hamming", "bottom-k",
    "sweep-step", "train-size", "dev-size", "test-size",
];

#[derive(Parser, Debug)]
#[command(name = "convlens", version, about = "Train a convolutional text classifier and explain its filters")]
struct Cli {
    /// Flat `key = value` file of settings; command-line flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on a labeled TSV corpus.
    Train(TrainArgs),
    /// Report accuracy with ReLU and, given profiles, with thresholds.
    Eval(EvalArgs),
    /// Per-filter analyses.
    #[command(subcommand)]
    Analyze(Analysis),
    /// Join the analyses into one report per filter.
    Summarize(SummarizeArgs),
    /// Explain the predictions for one or more documents.
    Explain(ExplainArgs),
    /// Write the bundled synthetic corpus.
    Synth(SynthArgs),
}

#[derive(Subcommand, Debug)]
enum Analysis {
    /// Derive per-filter thresholds.
    Thresholds(ThresholdArgs),
    /// Slot decomposition, top words and the natural/possible gap.
    Slots(SlotArgs),
    /// Cluster threshold-passing ngrams.
    Clusters(ClusterArgs),
    /// Find negative ngrams of the top cluster members.
    Negatives(NegativeArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_name = "TSV")]
    train: PathBuf,
    #[arg(long, value_name = "TSV")]
    dev: Option<PathBuf>,
    /// GloVe-format text file; words it lacks start random.
    #[arg(long, value_name = "FILE")]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Filter groups as `width:count,...`.
    #[arg(long)]
    filters: Option<FilterSpec>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    min_count: Option<usize>,
    /// Update word vectors during training.
    #[arg(long)]
    fine_tune: Option<bool>,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ModelCorpus {
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    #[arg(long, value_name = "TSV")]
    corpus: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    input: ModelCorpus,
    #[arg(long, value_name = "JSON")]
    profiles: Option<PathBuf>,
    /// Also sweep the purity target, fitting thresholds on `--fit-corpus`.
    #[arg(long)]
    sweep: bool,
    /// Corpus the sweep fits thresholds on (defaults to `--corpus`).
    #[arg(long, value_name = "TSV")]
    fit_corpus: Option<PathBuf>,
    #[arg(long)]
    sweep_step: Option<f64>,
    #[arg(long, value_name = "JSON")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ThresholdArgs {
    #[command(flatten)]
    input: ModelCorpus,
    #[arg(long)]
    purity: Option<f64>,
    #[arg(long, value_name = "JSON")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SlotArgs {
    #[command(flatten)]
    input: ModelCorpus,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long, value_name = "JSON")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ClusterArgs {
    #[command(flatten)]
    input: ModelCorpus,
    #[arg(long, value_name = "JSON")]
    profiles: PathBuf,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long, value_name = "JSON")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct NegativeArgs {
    #[command(flatten)]
    input: ModelCorpus,
    #[arg(long, value_name = "JSON")]
    profiles: PathBuf,
    #[arg(long, value_name = "JSON")]
    clusters: PathBuf,
    #[arg(long)]
    hamming: Option<usize>,
    #[arg(long)]
    bottom_k: Option<usize>,
    #[arg(long, value_name = "JSON")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Text,
}

#[derive(Args, Debug)]
struct SummarizeArgs {
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Recorded among the input hashes when given.
    #[arg(long, value_name = "TSV")]
    corpus: Option<PathBuf>,
    #[arg(long, value_name = "JSON")]
    profiles: PathBuf,
    #[arg(long, value_name = "JSON")]
    clusters: PathBuf,
    #[arg(long, value_name = "JSON")]
    negatives: PathBuf,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExplainArgs {
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    #[arg(long, value_name = "JSON")]
    profiles: PathBuf,
    #[arg(long, conflicts_with = "file", required_unless_present = "file")]
    text: Option<String>,
    /// Labeled TSV of documents.
    #[arg(long, value_name = "TSV")]
    file: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    dev_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(msg) => CliError::Usage(msg),
            other => CliError::Data(other),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Every setting a run used, after precedence resolution.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub command: String,
    pub settings: BTreeMap<String, String>,
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.command)?;
        for (k, v) in &self.settings {
            write!(f, " {k}={v}")?;
        }
        Ok(())
    }
}

/// Parses a flat `key = value` file. Blank lines and `#` comments are
/// skipped; keys must be known settings.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(n + 1, "expected key = value"))?;
        let key = k.trim().replace('_', "-");
        if !CONFIG_KEYS.contains(&key.as_str()) {
            return Err(Error::InvalidArgument(format!("unknown config key {key:?} on line {}", n + 1)));
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

struct Resolver {
    overlay: BTreeMap<String, String>,
    run: RunConfig,
}

impl Resolver {
    fn new(command: &str, config: Option<&Path>) -> CliResult<Self> {
        let overlay = match config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                parse_config(&text).map_err(|e| match e {
                    Error::InvalidArgument(_) => e,
                    other => other.in_file(p),
                })?
            }
            None => BTreeMap::new(),
        };
        Ok(Self {
            overlay,
            run: RunConfig { command: command.into(), ..Default::default() },
        })
    }

    fn overlay_value<T: FromStr>(&self, key: &str) -> CliResult<Option<T>>
    where
        T::Err: fmt::Display,
    {
        self.overlay
            .get(key)
            .map(|v| v.parse::<T>().map_err(|e| CliError::Usage(format!("config key {key}: {e}"))))
            .transpose()
    }

    fn get<T: FromStr + fmt::Display>(&mut self, key: &str, flag: Option<T>, default: T) -> CliResult<T>
    where
        T::Err: fmt::Display,
    {
        let value = match flag {
            Some(v) => v,
            None => self.overlay_value(key)?.unwrap_or(default),
        };
        self.run.settings.insert(key.into(), value.to_string());
        Ok(value)
    }

    fn seed(&mut self, flag: Option<u64>, default: u64) -> CliResult<u64> {
        let env = match std::env::var(SEED_ENV) {
            Ok(v) => Some(v.trim().parse::<u64>().map_err(|e| CliError::Usage(format!("{SEED_ENV}: {e}")))?),
            Err(_) => None,
        };
        let seed = match (flag, self.overlay_value::<u64>("seed")?, env) {
            (Some(s), _, _) | (None, Some(s), _) | (None, None, Some(s)) => s,
            (None, None, None) => default,
        };
        self.run.settings.insert("seed".into(), seed.to_string());
        Ok(seed)
    }

    fn path(&mut self, key: &str, p: &Path) {
        self.run.settings.insert(key.into(), p.display().to_string());
    }

    fn finish(&self) {
        info!("run config: {}", self.run);
    }
}

/// Runs the command line and returns the process exit code: 0 on success,
/// 1 on usage errors, 2 on data or parse errors.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Data(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Train(a) => cmd_train(a, config),
        Command::Eval(a) => cmd_eval(a, config),
        Command::Analyze(Analysis::Thresholds(a)) => cmd_thresholds(a, config),
        Command::Analyze(Analysis::Slots(a)) => cmd_slots(a, config),
        Command::Analyze(Analysis::Clusters(a)) => cmd_clusters(a, config),
        Command::Analyze(Analysis::Negatives(a)) => cmd_negatives(a, config),
        Command::Summarize(a) => cmd_summarize(a, config),
        Command::Explain(a) => cmd_explain(a, config),
        Command::Synth(a) => cmd_synth(a, config),
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_corpus(path: &Path, vocab: Option<&Vocabulary>, min_count: usize, split: Split) -> Result<(LabeledCorpus, Vocabulary, InputHash)> {
    let bytes = read_bytes(path)?;
    let body = String::from_utf8(bytes.clone()).map_err(|_| Error::parse(0, "corpus is not UTF-8").in_file(path))?;
    let (corpus, vocab) = parse_tsv_corpus(&body, vocab, min_count, split).map_err(|e| e.in_file(path))?;
    Ok((corpus, vocab, InputHash::of_bytes(role_of(split), &bytes)))
}

fn role_of(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Dev => "dev",
        Split::Test => "corpus",
    }
}

fn read_model(path: &Path) -> Result<(CnnModel, Vocabulary, InputHash)> {
    let bytes = read_bytes(path)?;
    let (model, vocab) = deserialize_model(&bytes).map_err(|e| e.in_file(path))?;
    Ok((model, vocab, InputHash::of_bytes("model", &bytes)))
}

fn read_artifact<T>(path: &Path, schema: &str, role: &str) -> Result<(T, InputHash)>
where
    T: Serialize + serde::de::DeserializeOwned + Validate,
{
    let art = Artifact::<T>::read(path, schema)?;
    Ok((art.payload, InputHash::of_file(role, path)?))
}

fn read_profiles(path: &Path, model: &CnnModel) -> Result<(Vec<FilterProfile>, InputHash)> {
    let (profiles, hash): (Vec<FilterProfile>, _) = read_artifact(path, schema::PROFILES, "profiles")?;
    if profiles.len() != model.filter_count() || profiles.iter().enumerate().any(|(j, p)| p.filter_id != j) {
        return Err(Error::Schema(format!("profiles do not cover the model's {} filters", model.filter_count())).in_file(path));
    }
    Ok((profiles, hash))
}

fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_train(a: TrainArgs, config: Option<&Path>) -> CliResult<()> {
    let mut r = Resolver::new("train", config)?;
    let defaults = TrainConfig::default();
    let model_defaults = ModelConfig::default();
    let train_cfg = TrainConfig {
        epochs: r.get("epochs", a.epochs, defaults.epochs)?,
        batch_size: r.get("batch", a.batch, defaults.batch_size)?,
        learning_rate: r.get("lr", a.lr, defaults.learning_rate)?,
        seed: r.seed(a.seed, defaults.seed)?,
        fine_tune_embeddings: r.get("fine-tune", a.fine_tune, defaults.fine_tune_embeddings)?,
        ..defaults
    };
    let filters: FilterSpec = r.get("filters", a.filters, model_defaults.filters.clone())?;
    let dim = r.get("dim", a.dim, model_defaults.embedding_dim)?;
    let min_count = r.get("min-count", a.min_count, 1)?;
    r.path("train", &a.train);
    if let Some(d) = &a.dev {
        r.path("dev", d);
    }
    if let Some(e) = &a.embeddings {
        r.path("embeddings", e);
    }
    r.path("out", &a.out);
    r.finish();
    train_cfg.validate()?;

    let (train_corpus, vocab, _) = read_corpus(&a.train, None, min_count, Split::Train)?;
    let dev = match &a.dev {
        Some(p) => Some(read_corpus(p, Some(&vocab), min_count, Split::Dev)?.0),
        None => None,
    };
    let mut rng = SeededRng::new(train_cfg.seed);
    let embeddings = match &a.embeddings {
        Some(p) => load_embeddings(p, &vocab, dim, &mut rng)?,
        None => EmbeddingTable::random(vocab.len(), dim, &mut rng),
    };
    let model_cfg = ModelConfig {
        embedding_dim: dim,
        filters,
        classes: train_corpus.class_count,
        ..model_defaults
    };
    info!("vocabulary {} tokens, {} training documents", vocab.len(), train_corpus.len());
    let mut model = CnnModel::initialize(model_cfg, embeddings, &mut rng)?;
    let metrics = train(&mut model, &train_corpus, dev.as_ref(), &train_cfg)?;
    for (epoch, (loss, acc)) in metrics.train_loss.iter().zip(&metrics.dev_accuracy).enumerate() {
        match acc {
            Some(acc) => info!("epoch {}: loss {loss:.4} dev accuracy {acc:.4}", epoch + 1),
            None => info!("epoch {}: loss {loss:.4}", epoch + 1),
        }
    }
    fs::write(&a.out, serialize_model(&model, &vocab)).map_err(|e| Error::io(&a.out, e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationReport {
    pub relu_accuracy: f64,
    pub thresholded: Option<ThresholdEvaluation>,
    pub sweep: Option<Vec<SweepPoint>>,
}

impl Validate for EvaluationReport {
    fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let ok = unit(self.relu_accuracy)
            && self.thresholded.as_ref().is_none_or(|t| unit(t.thresholded_accuracy) && unit(t.mean_coverage))
            && self.sweep.iter().flatten().all(|p| unit(p.accuracy) && unit(p.mean_coverage) && unit(p.purity));
        if ok {
            Ok(())
        } else {
            Err(Error::Schema("evaluation values outside [0,1]".into()))
        }
    }
}

fn cmd_eval(a: EvalArgs, config: Option<&Path>) -> CliResult<()> {
    let mut r = Resolver::new("eval", config)?;
    r.path("model", &a.input.model);
    r.path("corpus", &a.input.corpus);
    let step = if a.sweep { Some(r.get("sweep-step", a.sweep_step, 0.05)?) } else { None };
    r.finish();
    let (model, vocab, model_hash) = read_model(&a.input.model)?;
    let (corpus, _, corpus_hash) = read_corpus(&a.input.corpus, Some(&vocab), 1, Split::Test)?;
    let mut inputs = vec![model_hash, corpus_hash];
    let relu_accuracy = accuracy(&model, &corpus)?;
    let mut text = format!("relu accuracy         {relu_accuracy:.4}\n");
    let thresholded = match &a.profiles {
        Some(p) => {
            let (profiles, hash) = read_profiles(p, &model)?;
            inputs.push(hash);
            let e = evaluate_thresholded(&model, &profiles, &corpus)?;
            text.push_str(&format!(
                "thresholded accuracy  {:.4}\nmean coverage         {:.4}\n",
                e.thresholded_accuracy, e.mean_coverage
            ));
            Some(e)
        }
        None => None,
    };
    let sweep = match step {
        Some(step) => {
            let fit = match &a.fit_corpus {
                Some(p) => {
                    let (c, _, h) = read_corpus(p, Some(&vocab), 1, Split::Train)?;
                    inputs.push(h);
                    c
                }
                None => corpus.clone(),
            };
            let dataset = build_threshold_dataset(&model, &fit)?;
            let points = purity_sweep(&model, &dataset, &corpus, step)?;
            text.push_str("purity  accuracy  coverage\n");
            for p in &points {
                text.push_str(&format!("{:.2}    {:.4}    {:.4}\n", p.purity, p.accuracy, p.mean_coverage));
            }
            Some(points)
        }
        None => None,
    };
    print!("{text}");
    if let Some(out) = &a.out {
        let report = EvaluationReport { relu_accuracy, thresholded, sweep };
        Artifact::new(schema::EVALUATION, inputs, report).write(out)?;
    }
    Ok(())
}

fn cmd_thresholds(a: ThresholdArgs, config: Option<&Path>) -> CliResult<()> {
    let mut r = Resolver::new("analyze thresholds", config)?;
    let purity = r.get("purity", a.purity, DEFAULT_PURITY)?;
    r.path("model", &a.input.model);
    r.path("corpus", &a.input.corpus);
    r.path("out", &a.out);
    r.finish();
    if !(0.0..=1.0).contains(&purity) {
        return Err(CliError::Usage(format!("purity must lie in [0, 1], got {purity}")));
    }
    let (model, vocab, model_hash) = read_model(&a.input.model)?;
    let (corpus, _, corpus_hash) = read_corpus(&a.input.corpus, Some(&vocab), 1, Split::Test)?;
    let dataset = build_threshold_dataset(&model, &corpus)?;
    let profiles = derive_profiles(&model, &dataset, purity);
    let informative = profiles.iter().filter(|p| p.is_informative()).count();
    info!("{informative} of {} filters have a threshold", profiles.len());
    Artifact::new(schema::PROFILES, vec![model_hash, corpus_hash], profiles).write(&a.out)?;
    Ok(())
}

fn cmd_slots(a: SlotArgs, config: Option<&Path>) -> CliResult<()> {
    let mut r = Resolver::new("analyze slots", config)?;
    let k = r.get("top-k", a.top_k, 10)?;
    r.path("model", &a.input.model);
    r.path("corpus", &a.input.corpus);
    r.path("out", &a.out);
    r.finish();
    let (model, vocab, model_hash) = read_model(&a.input.model)?;
    let (corpus, _, corpus_hash) = read_corpus(&a.input.corpus, Some(&vocab), 1, Split::Test)?;
    let index = NgramIndex::for_model(&model, &corpus);
    let report = analyze_slots(&model, &index, &vocab, k)?;
    if let Some(g) = report.gap.mean_gap {
        info!("top natural ngrams score {:.1}% below the top possible ngrams", 100.0 * g);
    }
    Artifact::new(schema::SLOTS, vec![model_hash, corpus_hash], report).write(&a.out)?;
    Ok(())
}

fn cmd_clusters(a: ClusterArgs, config: Option<&Path>) -> CliResult<()> {
    let mut r = Resolver::new("analyze clusters", config)?;
    let k = r.get("top-k", a.top_k, 5)?;
    r.path("model", &a.input.model);
    r.path("corpus", &a.input.corpus);
    r.path("profiles", &a.profiles);
    r.path("out", &a.out);
    r.finish();
    let (model, vocab, model_hash) = read_model(&a.input.model)?;
    let (corpus, _, corpus_hash) = read_corpus(&a.input.corpus, Some(&vocab), 1, Split::Test)?;
    let (profiles, profile_hash) = read_profiles(&a.profiles, &model)?;
    let index = NgramIndex::for_model(&model, &corpus);
    let clusters = model
        .filters
        .iter()
        .zip(&profiles)
        .map(|(f, p)| {
            if p.is_informative() {
                cluster_filter_ngrams(f, &model.embeddings, &index, p, &vocab, k)
            } else {
                Ok(FilterClusters {
                    filter_id: f.filter_id,
                    threshold: p.threshold,
                    points: Vec::new(),
                    result: None,
                    clusters: Vec::new(),
                })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    for c in &clusters {
        info!("filter {}: {} ngrams in {} clusters", c.filter_id, c.points.len(), c.clusters.len());
    }
    Artifact::new(schema::CLUSTERS, vec![model_hash, corpus_hash, profile_hash], clusters).write(&a.out)?;
    Ok(())
}

fn cmd_negatives(a: NegativeArgs, config: Option<&Path>) -> CliResult<()> {
    let mut r = Resolver::new("analyze negatives", config)?;
    let hamming = r.get("hamming", a.hamming, DEFAULT_HAMMING)?;
    let bottom_k = r.get("bottom-k", a.bottom_k, DEFAULT_BOTTOM_K)?;
    r.path("model", &a.input.model);
    r.path("corpus", &a.input.corpus);
    r.path("profiles", &a.profiles);
    r.path("clusters", &a.clusters);
    r.path("out", &a.out);
    r.finish();
    if hamming == 0 {
        return Err(CliError::Usage("hamming distance must be at least 1".into()));
    }
    let (model, vocab, model_hash) = read_model(&a.input.model)?;
    let (corpus, _, corpus_hash) = read_corpus(&a.input.corpus, Some(&vocab), 1, Split::Test)?;
    let (profiles, profile_hash) = read_profiles(&a.profiles, &model)?;
    let (clusters, cluster_hash): (Vec<FilterClusters>, _) = read_artifact(&a.clusters, schema::CLUSTERS, "clusters")?;
    if clusters.len() != model.filter_count() {
        return Err(Error::Schema("clusters do not cover every filter".into()).in_file(&a.clusters).into());
    }
    let index = NgramIndex::for_model(&model, &corpus);
    let negatives = model
        .filters
        .iter()
        .zip(profiles.iter().zip(&clusters))
        .map(|(f, (p, c))| {
            let negatives = if p.is_informative() {
                let bases: Vec<_> = c
                    .clusters
                    .iter()
                    .flat_map(|cl| cl.top_ngrams.iter().map(|n| n.slots.token_ids.clone()))
                    .collect();
                find_negative_ngrams(f, &model.embeddings, p, &index, &bases, &vocab, hamming, bottom_k)?
            } else {
                Vec::new()
            };
            Ok(FilterNegatives {
                filter_id: f.filter_id,
                threshold: p.threshold,
                bias: f.bias,
                max_hamming: hamming,
                negatives,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Artifact::new(schema::NEGATIVES, vec![model_hash, corpus_hash, profile_hash, cluster_hash], negatives).write(&a.out)?;
    Ok(())
}

fn cmd_summarize(a: SummarizeArgs, config: Option<&Path>) -> CliResult<()> {
    let mut r = Resolver::new("summarize", config)?;
    r.path("model", &a.model);
    r.path("profiles", &a.profiles);
    r.path("clusters", &a.clusters);
    r.path("negatives", &a.negatives);
    r.run.settings.insert("format".into(), format!("{:?}", a.format).to_lowercase());
    r.finish();
    let (model, _, model_hash) = read_model(&a.model)?;
    let mut inputs = vec![model_hash];
    if let Some(c) = &a.corpus {
        inputs.push(InputHash::of_file("corpus", c)?);
    }
    let (profiles, h1) = read_profiles(&a.profiles, &model)?;
    let (clusters, h2): (Vec<FilterClusters>, _) = read_artifact(&a.clusters, schema::CLUSTERS, "clusters")?;
    let (negatives, h3): (Vec<FilterNegatives>, _) = read_artifact(&a.negatives, schema::NEGATIVES, "negatives")?;
    inputs.extend([h1, h2, h3]);
    let summaries: Vec<FilterSummary> = summarize_model(&model, &profiles, &clusters, &negatives)?;
    let text = match a.format {
        Format::Json => Artifact::new(schema::SUMMARY, inputs, summaries).to_json()?,
        Format::Text => render_summary_text(&summaries),
    };
    write_text(a.out.as_deref(), &text)?;
    Ok(())
}

fn cmd_explain(a: ExplainArgs, config: Option<&Path>) -> CliResult<()> {
    let mut r = Resolver::new("explain", config)?;
    r.path("model", &a.model);
    r.path("profiles", &a.profiles);
    if let Some(f) = &a.file {
        r.path("file", f);
    }
    r.run.settings.insert("format".into(), format!("{:?}", a.format).to_lowercase());
    r.finish();
    let (model, vocab, model_hash) = read_model(&a.model)?;
    let (profiles, profile_hash) = read_profiles(&a.profiles, &model)?;
    let mut inputs = vec![model_hash, profile_hash];
    let docs: Vec<(Option<usize>, String)> = match (&a.text, &a.file) {
        (Some(t), _) => vec![(None, t.clone())],
        (None, Some(p)) => {
            let bytes = read_bytes(p)?;
            inputs.push(InputHash::of_bytes("documents", &bytes));
            let body = String::from_utf8(bytes).map_err(|_| Error::parse(0, "not UTF-8").in_file(p))?;
            parse_tsv_rows(&body)
                .map_err(|e| e.in_file(p))?
                .into_iter()
                .map(|(l, t)| (Some(l), t))
                .collect()
        }
        (None, None) => return Err(CliError::Usage("one of --text or --file is required".into())),
    };
    let explanations = docs
        .iter()
        .map(|(label, text)| {
            let ids = vocab.encode(text);
            if ids.is_empty() {
                return Err(Error::Empty("document has no tokens"));
            }
            explain_prediction(&ids, *label, &model, &profiles, &vocab)
        })
        .collect::<Result<Vec<PredictionExplanation>>>()?;
    let text = match a.format {
        Format::Json => Artifact::new(schema::EXPLANATIONS, inputs, explanations).to_json()?,
        Format::Text => render_explanations_text(&explanations),
    };
    write_text(a.out.as_deref(), &text)?;
    Ok(())
}

fn cmd_synth(a: SynthArgs, config: Option<&Path>) -> CliResult<()> {
    let mut r = Resolver::new("synth", config)?;
    let d = SyntheticConfig::default();
    let cfg = SyntheticConfig {
        train_size: r.get("train-size", a.train_size, d.train_size)?,
        dev_size: r.get("dev-size", a.dev_size, d.dev_size)?,
        test_size: r.get("test-size", a.test_size, d.test_size)?,
        seed: r.seed(a.seed, d.seed)?,
    };
    r.path("out-dir", &a.out_dir);
    r.finish();
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let data = generate(&cfg);
    for (name, body) in [("train.tsv", &data.train), ("dev.tsv", &data.dev), ("test.tsv", &data.test)] {
        let p = a.out_dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn help_and_usage_exit_codes() {
        assert_eq!(dispatch(["convlens", "train", "--help"]), 0);
        assert_eq!(dispatch(["convlens", "frobnicate"]), 1);
        assert_eq!(dispatch(["convlens", "train", "--bogus"]), 1);
        assert_eq!(dispatch(["convlens", "train", "--train", "x.tsv"]), 1);
    }

    #[test]
    fn missing_input_is_a_data_error() {
        assert_eq!(dispatch(["convlens", "train", "--train", "/nonexistent/x.tsv", "--out", "/tmp/never.bin"]), 2);
    }

    #[test]
    fn config_parsing() {
        let cfg = parse_config("# comment\nepochs = 3\n\nlr=0.01\nmin_count = 2\n").unwrap();
        assert_eq!(cfg["epochs"], "3");
        assert_eq!(cfg["lr"], "0.01");
        assert_eq!(cfg["min-count"], "2");
        assert!(matches!(parse_config("epochs 3"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_config("colour = red"), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn flags_override_config() {
        let mut r = Resolver {
            overlay: parse_config("epochs = 3\nbatch = 7").unwrap(),
            run: RunConfig::default(),
        };
        assert_eq!(r.get("epochs", Some(5usize), 10).unwrap(), 5);
        assert_eq!(r.get("batch", None::<usize>, 50).unwrap(), 7);
        assert_eq!(r.get("dim", None::<usize>, 50).unwrap(), 50);
        assert_eq!(r.run.settings["epochs"], "5");
        r.overlay.insert("lr".into(), "fast".into());
        assert!(matches!(r.get("lr", None::<f64>, 0.1), Err(CliError::Usage(_))));
    }

    #[test]
    fn seed_precedence() {
        // the only test touching the variable
        std::env::set_var(SEED_ENV, "41");
        let mut r = Resolver { overlay: BTreeMap::new(), run: RunConfig::default() };
        assert_eq!(r.seed(None, 0).unwrap(), 41);
        r.overlay.insert("seed".into(), "9".into());
        assert_eq!(r.seed(None, 0).unwrap(), 9);
        assert_eq!(r.seed(Some(3), 0).unwrap(), 3);
        std::env::remove_var(SEED_ENV);
        r.overlay.clear();
        assert_eq!(r.seed(None, 0).unwrap(), 0);
    }
}

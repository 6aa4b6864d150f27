//! `knowtag` command line: ingest, train, tag, baseline, enumerate-returns, report.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, split_demo_bank, Split, TaggingDataset};
use crate::embedding::{
    default_grid, grid_search_baseline, predict_all, score_pool, BaselineConfig, GridSearchResult, SimilarityMode,
};
use crate::embedding::{Embedder, EmbeddingBackend, EmbeddingCache, HashEmbedder, HttpEmbedder, HttpEmbedderConfig};
use crate::episode::{enumerate_returns, EpisodePair, PreparedBank, RetrieverVariantConfig, Variant};
use crate::error::{Error, Result};
use crate::eval::{knowledge_accuracy_vs_demos, render_comparison, AccuracyDemoAnalysis, MetricReport, PairOutcome};
use crate::judge::{
    CachedJudge, Decoding, HttpJudge, HttpJudgeConfig, JudgeBackend, JudgeSession, ResponseCache, SimulatedJudge,
    SimulatedJudgeSpec,
};
use crate::pipeline::{demo_pairs, eval_pairs, nearest_demo_spec, prepare_banks};
use crate::seeds::sha256_hex;
use crate::tagging::{evaluate, PromptPgTagger, RandomShotTagger, RetrieverTagger, Tagger, ZeroShotTagger};
use crate::trainer::{train, TrainOptions, TrainedModel, TrainingConfig, TrainingEnv};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;
pub const EXIT_DATA: i32 = 4;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_USAGE,
        Error::BackendUnavailable { .. } => EXIT_BACKEND,
        Error::Io { .. } | Error::Parse { .. } | Error::DuplicateKey { .. } | Error::Domain(_) | Error::Format(_) => {
            EXIT_DATA
        }
        Error::Contract(_) | Error::NonFinite(_) => EXIT_INTERNAL,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum JudgeKind {
    #[default]
    Simulated,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    #[default]
    Hash,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JudgeConfig {
    pub backend: JudgeKind,
    pub model: String,
    pub decoding: Decoding,
    pub concurrency: usize,
    pub cache_dir: Option<PathBuf>,
    /// Simulated judge behavior file; derived from the data when absent.
    pub spec: Option<PathBuf>,
    pub base_correct_rate: f64,
    pub http: HttpJudgeConfig,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        JudgeConfig {
            backend: JudgeKind::Simulated,
            model: "gpt-3.5-turbo".into(),
            decoding: Decoding::default(),
            concurrency: 1,
            cache_dir: None,
            spec: None,
            base_correct_rate: 0.5,
            http: HttpJudgeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub backend: EmbeddingKind,
    pub model: String,
    pub dim: usize,
    pub seed: u64,
    pub cache_dir: Option<PathBuf>,
    pub http: HttpEmbedderConfig,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            backend: EmbeddingKind::Hash,
            model: "hash-64".into(),
            dim: 64,
            seed: 0,
            cache_dir: None,
            http: HttpEmbedderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub per_label: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { per_label: 5 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineGrid {
    pub etas: Option<Vec<f64>>,
    pub ks: Option<Vec<usize>>,
}

impl BaselineGrid {
    pub fn configs(&self) -> Vec<BaselineConfig> {
        if self.etas.is_none() && self.ks.is_none() {
            return default_grid();
        }
        let mut out: Vec<BaselineConfig> = self
            .etas
            .iter()
            .flatten()
            .map(|&eta| BaselineConfig::Threshold { eta })
            .collect();
        out.extend(self.ks.iter().flatten().map(|&k| BaselineConfig::TopK { k }));
        out
    }
}

/// Everything a command may read from `--config`. Its `training.seed` is
/// the root seed for every command.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub training: TrainingConfig,
    pub judge: JudgeConfig,
    pub embedding: EmbeddingConfig,
    pub split: SplitConfig,
    pub baseline: BaselineGrid,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.training.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.to_toml_string().as_bytes())
    }

    fn seed(&self) -> u64 {
        self.training.seed
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    pub command_line: Vec<String>,
    pub config_digest: Option<String>,
    pub dataset_digest: Option<String>,
    pub seeds: BTreeMap<String, u64>,
    pub started_at_unix: u64,
    pub finished_at_unix: u64,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

#[derive(Parser, Debug)]
#[command(name = "knowtag", version, about = "Knowledge concept tagging with an LLM judge and a learned demo retriever")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Root seed (overrides `training.seed`).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct JudgeArgs {
    #[arg(long, value_enum)]
    pub judge: Option<JudgeKind>,
    /// Maximum judge calls in flight.
    #[arg(long)]
    pub judge_concurrency: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TagMode {
    ZeroShot,
    KShot,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate a dataset and split it into demonstration banks and an eval set.
    Ingest {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// Demos per label per knowledge id.
        #[arg(long)]
        per_label: Option<usize>,
    },
    /// Train a retriever on an ingested dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        judge: JudgeArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        /// Episode length limit (shot count for promptpg).
        #[arg(long)]
        max_shots: Option<usize>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Write every rollout to rollouts.jsonl.
        #[arg(long)]
        log_rollouts: bool,
    },
    /// Tag the eval split and score it.
    Tag {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        judge: JudgeArgs,
        #[arg(long)]
        dataset: PathBuf,
        /// Trained model file.
        #[arg(long, conflicts_with = "mode")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<TagMode>,
        /// Shots for k-shot mode, episode limit for a checkpoint.
        #[arg(long)]
        max_shots: Option<usize>,
    },
    /// Embedding-similarity baselines with grid search on the eval split.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Tabulate returns of every correctness pattern.
    EnumerateReturns {
        #[arg(long)]
        out: PathBuf,
        /// Episode length T.
        #[arg(long = "max-shots", alias = "t", default_value_t = 2)]
        max_shots: usize,
        /// Comma-separated discount factors.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])]
        gammas: Vec<f64>,
        /// Stop-bonus weight; the variant's default when omitted.
        #[arg(long)]
        omega: Option<f64>,
        #[arg(long, default_value = "flexsdr")]
        variant: Variant,
    },
    /// Compare metric reports, with the knowledge-level case study when
    /// both a zero-shot and a retriever report are given.
    Report {
        #[arg(long)]
        out: PathBuf,
        /// report.json files to compare.
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        zero_shot: Option<PathBuf>,
        #[arg(long)]
        retriever: Option<PathBuf>,
    },
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let line: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli.command, line) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

struct Manifest {
    command: &'static str,
    line: Vec<String>,
    started: u64,
    config_digest: Option<String>,
    dataset_digest: Option<String>,
    seeds: BTreeMap<String, u64>,
}

impl Manifest {
    fn new(command: &'static str, line: Vec<String>) -> Self {
        Manifest {
            command,
            line,
            started: now(),
            config_digest: None,
            dataset_digest: None,
            seeds: BTreeMap::new(),
        }
    }

    fn write(self, out: &Path) -> Result<()> {
        let m = RunManifest {
            tool: "knowtag".into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: self.command.into(),
            command_line: self.line,
            config_digest: self.config_digest,
            dataset_digest: self.dataset_digest,
            seeds: self.seeds,
            started_at_unix: self.started,
            finished_at_unix: now(),
        };
        write_text(&out.join("manifest.json"), &serde_json::to_string_pretty(&m).expect("manifest serializes"))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.training.seed = s;
    }
    Ok(cfg)
}

fn apply_judge_args(cfg: &mut RunConfig, args: &JudgeArgs) -> Result<()> {
    if let Some(j) = args.judge {
        cfg.judge.backend = j;
    }
    if let Some(n) = args.judge_concurrency {
        if n == 0 {
            return Err(Error::Config("--judge-concurrency must be at least 1".into()));
        }
        cfg.judge.concurrency = n;
    }
    cfg.training.threads = cfg.judge.concurrency;
    Ok(())
}

fn build_embedder(cfg: &EmbeddingConfig) -> Result<Embedder> {
    let backend: Box<dyn EmbeddingBackend> = match cfg.backend {
        EmbeddingKind::Hash => {
            if cfg.dim == 0 {
                return Err(Error::Config("embedding.dim must be positive".into()));
            }
            Box::new(HashEmbedder::new(cfg.model.clone(), cfg.dim, cfg.seed))
        }
        EmbeddingKind::Http => Box::new(HttpEmbedder::new(cfg.http.clone())?),
    };
    Ok(Embedder::new(backend, cfg.cache_dir.as_ref().map(EmbeddingCache::new)))
}

fn build_judge(cfg: &RunConfig, banks: &BTreeMap<String, PreparedBank>, pairs: &[EpisodePair]) -> Result<Box<dyn JudgeBackend>> {
    let inner: Box<dyn JudgeBackend> = match cfg.judge.backend {
        JudgeKind::Simulated => {
            let spec = match &cfg.judge.spec {
                Some(p) => SimulatedJudgeSpec::load(p)?,
                None => nearest_demo_spec(banks, pairs, cfg.seed(), cfg.judge.base_correct_rate)?,
            };
            Box::new(SimulatedJudge::new(spec)?)
        }
        JudgeKind::Http => Box::new(HttpJudge::new(cfg.judge.http.clone())?),
    };
    Ok(match &cfg.judge.cache_dir {
        Some(dir) => Box::new(CachedJudge::new(inner, ResponseCache::new(dir))),
        None => inner,
    })
}

struct Prepared {
    dataset: TaggingDataset,
    banks: BTreeMap<String, PreparedBank>,
    eval: Vec<EpisodePair>,
    demo: Vec<EpisodePair>,
}

fn prepare(path: &Path, cfg: &RunConfig) -> Result<Prepared> {
    let dataset = load_dataset(path)?;
    if !dataset.splits().contains(&Split::Demo) {
        return Err(Error::Domain(format!(
            "{} has no demo split; run `knowtag ingest` first",
            path.display()
        )));
    }
    let embedder = build_embedder(&cfg.embedding)?;
    let banks = prepare_banks(&dataset, &embedder)?;
    let eval = eval_pairs(&dataset, &embedder)?;
    let demo = demo_pairs(&banks);
    Ok(Prepared {
        dataset,
        banks,
        eval,
        demo,
    })
}

fn dispatch(command: Command, line: Vec<String>) -> Result<i32> {
    match command {
        Command::Ingest {
            common,
            dataset,
            per_label,
        } => cmd_ingest(&common, &dataset, per_label, line),
        Command::Train {
            common,
            judge,
            dataset,
            variant,
            max_shots,
            resume,
            log_rollouts,
        } => {
            let mut cfg = load_config(&common)?;
            apply_judge_args(&mut cfg, &judge)?;
            if let Some(v) = variant {
                cfg.training.variant = v;
            }
            if let Some(t) = max_shots {
                cfg.training.t_max = t;
            }
            cfg.training.validate()?;
            cmd_train(&common.out, &cfg, &dataset, resume, log_rollouts, line)
        }
        Command::Tag {
            common,
            judge,
            dataset,
            checkpoint,
            mode,
            max_shots,
        } => {
            let mut cfg = match (&common.config, checkpoint.as_deref().and_then(sibling_config)) {
                (None, Some(saved)) => {
                    let mut cfg = RunConfig::load(Some(&saved))?;
                    if let Some(s) = common.seed {
                        cfg.training.seed = s;
                    }
                    cfg
                }
                _ => load_config(&common)?,
            };
            apply_judge_args(&mut cfg, &judge)?;
            cmd_tag(&common.out, cfg, &dataset, checkpoint.as_deref(), mode, max_shots, line)
        }
        Command::Baseline { common, dataset } => {
            let cfg = load_config(&common)?;
            cmd_baseline(&common.out, &cfg, &dataset, line)
        }
        Command::EnumerateReturns {
            out,
            max_shots,
            gammas,
            omega,
            variant,
        } => cmd_enumerate_returns(&out, max_shots, &gammas, omega, variant, line),
        Command::Report {
            out,
            inputs,
            zero_shot,
            retriever,
        } => cmd_report(&out, &inputs, zero_shot.as_deref(), retriever.as_deref(), line),
    }
}

#[derive(Serialize)]
struct SplitSummary {
    dataset_digest: String,
    split_digest: String,
    per_label: usize,
    seed: u64,
    knowledge_ids: usize,
    eval_pairs: usize,
    banks: BTreeMap<String, Vec<String>>,
    warnings: Vec<String>,
}

fn cmd_ingest(common: &Common, dataset_path: &Path, per_label: Option<usize>, line: Vec<String>) -> Result<i32> {
    let mut cfg = load_config(common)?;
    if let Some(n) = per_label {
        cfg.split.per_label = n;
    }
    let mut manifest = Manifest::new("ingest", line);
    let dataset = load_dataset(dataset_path)?;
    let split = split_demo_bank(&dataset, cfg.split.per_label, cfg.seed());
    for w in &split.warnings {
        eprintln!("warning: {w}");
    }
    let assigned = split.assigned_dataset(&dataset);
    ensure_dir(&common.out)?;
    let out_data = common.out.join("dataset.jsonl");
    let jsonl = assigned.to_jsonl();
    write_text(&out_data, &jsonl)?;
    let dataset_digest = file_digest(dataset_path)?;
    let summary = SplitSummary {
        dataset_digest: dataset_digest.clone(),
        split_digest: sha256_hex(jsonl.as_bytes()),
        per_label: cfg.split.per_label,
        seed: cfg.seed(),
        knowledge_ids: dataset.knowledge_ids().len(),
        eval_pairs: split.eval.len(),
        banks: split
            .banks
            .iter()
            .map(|(k, b)| (k.clone(), b.entries.iter().map(|e| e.question.id.clone()).collect()))
            .collect(),
        warnings: split.warnings.clone(),
    };
    write_text(
        &common.out.join("split.json"),
        &serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    println!(
        "{} knowledge ids, {} banks, {} eval pairs -> {}",
        summary.knowledge_ids,
        summary.banks.len(),
        summary.eval_pairs,
        out_data.display()
    );
    manifest.config_digest = Some(cfg.digest());
    manifest.dataset_digest = Some(dataset_digest);
    manifest.seeds.insert("split".into(), cfg.seed());
    manifest.write(&common.out)?;
    Ok(EXIT_OK)
}

fn cmd_train(out: &Path, cfg: &RunConfig, dataset_path: &Path, resume: bool, log_rollouts: bool, line: Vec<String>) -> Result<i32> {
    let mut manifest = Manifest::new("train", line);
    let p = prepare(dataset_path, cfg)?;
    if p.demo.is_empty() {
        return Err(Error::Domain("no bank has two or more demos to train on".into()));
    }
    let all: Vec<EpisodePair> = p.eval.iter().chain(&p.demo).cloned().collect();
    let backend = build_judge(cfg, &p.banks, &all)?;
    let session = JudgeSession::new(backend.as_ref(), &cfg.judge.model, cfg.judge.decoding);
    let env = TrainingEnv {
        banks: p.banks,
        train: p.demo,
        validation: Vec::new(),
    };
    ensure_dir(out)?;
    write_text(&out.join("config.toml"), &cfg.to_toml_string())?;
    let outcome = train(
        &cfg.training,
        &env,
        &session,
        out,
        &TrainOptions {
            resume,
            log_trajectories: log_rollouts,
        },
    )?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(last) = outcome.log.last() {
        println!(
            "{} iterations{}; last mean return {:.4}, mean demos {:.3}, best validation {:.4}",
            outcome.iterations_run,
            if outcome.stopped_early { " (early stop)" } else { "" },
            last.mean_return,
            last.mean_demos,
            outcome
                .log
                .iter()
                .map(|l| l.validation_return)
                .fold(f64::NEG_INFINITY, f64::max)
        );
    }
    manifest.config_digest = Some(cfg.digest());
    manifest.dataset_digest = Some(file_digest(dataset_path)?);
    manifest.seeds.insert("training".into(), cfg.training.seed);
    manifest.write(out)?;
    Ok(EXIT_OK)
}

/// Training configuration for a checkpoint: the `config.toml` written next
/// to it by `train`, else the current one. Must match the file's digest.
fn sibling_config(checkpoint: &Path) -> Option<PathBuf> {
    checkpoint.parent().map(|d| d.join("config.toml")).filter(|p| p.exists())
}

fn checkpoint_config(checkpoint: &Path, current: &RunConfig, digest: &str) -> Result<TrainingConfig> {
    let training = match sibling_config(checkpoint) {
        Some(p) => RunConfig::load(Some(&p))?.training,
        None => current.training.clone(),
    };
    if training.digest() != digest {
        return Err(Error::Config(format!(
            "{} was trained under a different configuration",
            checkpoint.display()
        )));
    }
    Ok(training)
}

fn cmd_tag(
    out: &Path,
    cfg: RunConfig,
    dataset_path: &Path,
    checkpoint: Option<&Path>,
    mode: Option<TagMode>,
    max_shots: Option<usize>,
    line: Vec<String>,
) -> Result<i32> {
    let mut manifest = Manifest::new("tag", line);
    let tagger: Box<dyn Tagger> = match (checkpoint, mode) {
        (Some(path), _) => {
            let (model, meta) = TrainedModel::load(path)?;
            let training = checkpoint_config(path, &cfg, &meta.config_digest)?;
            let t_max = max_shots.unwrap_or(training.t_max);
            match model {
                TrainedModel::Retriever(params) => {
                    if cfg.embedding.backend == EmbeddingKind::Hash && params.embedding_dim() != cfg.embedding.dim {
                        return Err(Error::Config(format!(
                            "{} expects {}-dim embeddings, the embedding config gives {}",
                            path.display(),
                            params.embedding_dim(),
                            cfg.embedding.dim
                        )));
                    }
                    let mut config = training.retriever()?;
                    config.t_max = t_max;
                    config.validate()?;
                    Box::new(RetrieverTagger {
                        label: training.variant.name().to_string(),
                        params,
                        config,
                    })
                }
                TrainedModel::PromptPg(params) => Box::new(PromptPgTagger { params, shots: t_max }),
            }
        }
        (None, Some(TagMode::ZeroShot)) => Box::new(ZeroShotTagger),
        (None, Some(TagMode::KShot)) => Box::new(RandomShotTagger {
            shots: max_shots.ok_or_else(|| Error::Config("--mode k-shot needs --max-shots".into()))?,
            seed: cfg.seed(),
        }),
        (None, None) => return Err(Error::Config("tag needs --checkpoint or --mode".into())),
    };
    let p = prepare(dataset_path, &cfg)?;
    let all: Vec<EpisodePair> = p.eval.iter().chain(&p.demo).cloned().collect();
    let backend = build_judge(&cfg, &p.banks, &all)?;
    let session = JudgeSession::new(backend.as_ref(), &cfg.judge.model, cfg.judge.decoding);
    let evaluation = evaluate(tagger.as_ref(), &p.eval, &p.banks, &session, cfg.judge.concurrency)?;
    ensure_dir(out)?;
    let mut audit = evaluation.audit.join("\n");
    audit.push('\n');
    write_text(&out.join("predictions.jsonl"), &audit)?;
    write_text(&out.join("report.json"), &evaluation.report.to_json())?;
    let table = evaluation.report.render_table();
    write_text(&out.join("report.txt"), &table)?;
    print!("{table}");
    manifest.config_digest = Some(cfg.digest());
    manifest.dataset_digest = Some(file_digest(dataset_path)?);
    manifest.seeds.insert("root".into(), cfg.seed());
    manifest.write(out)?;
    let _ = p.dataset;
    if evaluation.report.errored > 0 {
        eprintln!("error: {} pair(s) errored", evaluation.report.errored);
        return Ok(EXIT_BACKEND);
    }
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineModeResult {
    pub mode: SimilarityMode,
    pub best: BaselineConfig,
    pub report: MetricReport,
    pub grid: GridSearchResult,
}

fn cmd_baseline(out: &Path, cfg: &RunConfig, dataset_path: &Path, line: Vec<String>) -> Result<i32> {
    let mut manifest = Manifest::new("baseline", line);
    let dataset = load_dataset(dataset_path)?;
    let banks = dataset.banks_from_assignment();
    let eval: Vec<_> = dataset.in_split(Split::Eval).cloned().collect();
    let embedder = build_embedder(&cfg.embedding)?;
    let space = cfg.baseline.configs();
    let mut results = Vec::new();
    for (mode, label) in [
        (SimilarityMode::KnowledgeQuestion, "K/Q similarity"),
        (SimilarityMode::QuestionQuestion, "Q/Q similarity"),
    ] {
        let pool = score_pool(&eval, &banks, &embedder, mode)?;
        let grid = grid_search_baseline(&pool, &space)?;
        let outcomes: Vec<PairOutcome> = pool
            .iter()
            .zip(predict_all(&pool, grid.best))
            .map(|(p, pred)| PairOutcome {
                knowledge_id: p.knowledge_id.clone(),
                question_id: p.question_id.clone(),
                gold: p.gold,
                predicted: Some(pred),
                demos_used: 0,
            })
            .collect();
        results.push(BaselineModeResult {
            mode,
            best: grid.best,
            report: MetricReport::from_outcomes(label, &outcomes, 0),
            grid,
        });
    }
    ensure_dir(out)?;
    write_text(
        &out.join("baseline.json"),
        &serde_json::to_string_pretty(&results).expect("baseline serializes"),
    )?;
    let reports: Vec<MetricReport> = results.iter().map(|r| r.report.clone()).collect();
    let mut text = render_comparison(&reports);
    for r in &results {
        text.push_str(&format!("{}: best {:?}\n", r.report.name, r.best));
    }
    write_text(&out.join("baseline.txt"), &text)?;
    print!("{text}");
    manifest.config_digest = Some(cfg.digest());
    manifest.dataset_digest = Some(file_digest(dataset_path)?);
    manifest.write(out)?;
    Ok(EXIT_OK)
}

fn cmd_enumerate_returns(
    out: &Path,
    t: usize,
    gammas: &[f64],
    omega: Option<f64>,
    variant: Variant,
    line: Vec<String>,
) -> Result<i32> {
    let mut manifest = Manifest::new("enumerate-returns", line);
    let base = match variant {
        Variant::FlexSdr => RetrieverVariantConfig::flexsdr(t.max(1)),
        Variant::RetIcl => RetrieverVariantConfig::reticl(t.max(1)),
        Variant::FlexRetIcr => RetrieverVariantConfig::flexreticr(t.max(1)),
        Variant::PromptPg => return Err(Error::Config("promptpg has no per-step returns to enumerate".into())),
    };
    let table = enumerate_returns(t, gammas, omega.unwrap_or(base.omega), base.reward_mode, base.stop_enabled)?;
    ensure_dir(out)?;
    let text = table.render();
    write_text(&out.join("returns.txt"), &text)?;
    write_text(
        &out.join("returns.json"),
        &serde_json::to_string_pretty(&table).expect("table serializes"),
    )?;
    print!("{text}");
    manifest.seeds.clear();
    manifest.write(out)?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct Comparison {
    reports: Vec<MetricReport>,
    case_study: Option<AccuracyDemoAnalysis>,
}

fn read_report(path: &Path) -> Result<MetricReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn cmd_report(out: &Path, inputs: &[PathBuf], zero_shot: Option<&Path>, retriever: Option<&Path>, line: Vec<String>) -> Result<i32> {
    let manifest = Manifest::new("report", line);
    let reports = inputs.iter().map(|p| read_report(p)).collect::<Result<Vec<_>>>()?;
    let case_study = match (zero_shot, retriever) {
        (Some(z), Some(r)) => Some(knowledge_accuracy_vs_demos(&read_report(z)?, &read_report(r)?)),
        (None, None) => None,
        _ => return Err(Error::Config("--zero-shot and --retriever go together".into())),
    };
    let mut text = render_comparison(&reports);
    if let Some(cs) = &case_study {
        text.push_str("\nknowledge  zero-shot accuracy  mean demos\n");
        for p in &cs.points {
            text.push_str(&format!("{:<10} {:>18.4} {:>11.3}\n", p.knowledge_id, p.zero_shot_accuracy, p.mean_demos));
        }
        match cs.correlation {
            Some(r) => text.push_str(&format!(
                "pearson correlation {r:.4}{}\n",
                if cs.degenerate_variance { " (zero variance)" } else { "" }
            )),
            None => text.push_str("pearson correlation omitted (fewer than 3 knowledge ids)\n"),
        }
    }
    ensure_dir(out)?;
    write_text(&out.join("report.txt"), &text)?;
    write_text(
        &out.join("report.json"),
        &serde_json::to_string_pretty(&Comparison { reports, case_study }).expect("comparison serializes"),
    )?;
    print!("{text}");
    manifest.write(out)?;
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
        assert_eq!(
            exit_code(&Error::BackendUnavailable {
                attempts: 1,
                message: "x".into()
            }),
            EXIT_BACKEND
        );
        assert_eq!(exit_code(&Error::Domain("x".into())), EXIT_DATA);
    }

    #[test]
    fn unknown_variant_is_usage_error() {
        let code = run(["knowtag", "train", "--out", "/nonexistent", "--dataset", "x", "--variant", "nope"]);
        assert_eq!(code, EXIT_USAGE);
    }

    #[test]
    fn run_config_round_trips_and_rejects_unknown_keys() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        assert!(toml::from_str::<RunConfig>("[judge]\nbogus = 1\n").is_err());
    }
}

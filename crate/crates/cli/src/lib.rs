//! Command implementations behind the `accel` binary.
//!
//! `rank`, `insights` and `opportunities` call the same [`Engine`] methods as
//! the HTTP service and print the same JSON.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use accel_core::api::{Engine, InsightsRequest, OpportunitiesRequest, RankRequest, Variant};
use accel_core::attributes::{load_lexicon, AttributeLexicon};
use accel_core::bundle::save_bundle;
use accel_core::embedding::{Embedder, EmbeddingCache, ProviderSpec};
use accel_core::evaluation::{backend_table, EvalResult};
use accel_core::impact::BinThresholds;
use accel_core::ingest::{load_experiments, InputFormat, LoadSummary};
use accel_core::narration::{AttributeScoreProvider, PromptTemplates};
use accel_core::pipeline::{evaluate_transfer, leave_one_out, LambdaSetting, LooOptions, TrainConfig, DEFAULT_SEED};
use accel_core::projection::FitCorpus;
use accel_core::ranker::Weighting;
use accel_core::Error;
use accel_service::{EngineArgs, ServeArgs};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

mod table;

pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "accel", version, about = "Rank copy variants and explain the ranking with marketing attributes")]
pub struct Cli {
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Json)]
    pub format: OutputFormat,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Json,
    Table,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the ranker and the attribute model and write a bundle.
    Train(TrainArgs),
    /// Score and rank variants.
    Rank(RankArgs),
    /// Attribute contributions to the best-vs-worst gap of a finished test.
    Insights(RequestArgs),
    /// Under-used high-impact attributes for a set of drafts.
    Opportunities(RequestArgs),
    /// Transfer or leave-one-out evaluation.
    Eval(EvalArgs),
    /// Serve a bundle over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Hyperparams {
    #[arg(long, default_value_t = accel_core::pipeline::DEFAULT_Q)]
    pub q: usize,
    #[arg(long, default_value_t = accel_core::pipeline::DEFAULT_RIDGE)]
    pub ridge: f64,
    /// `cv`, `cv:K` or a fixed value.
    #[arg(long, default_value = "cv")]
    pub lambda: String,
    /// Fold count when `--lambda cv` is given without one.
    #[arg(long)]
    pub folds: Option<usize>,
    /// `training`, `target` or `pooled`.
    #[arg(long, default_value = "target")]
    pub fit_corpus: String,
    /// `uniform` or `impressions`.
    #[arg(long, default_value = "uniform")]
    pub weighting: String,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long)]
    pub bin_medium: Option<f64>,
    #[arg(long)]
    pub bin_strong: Option<f64>,
}

impl Hyperparams {
    pub fn config(&self) -> accel_core::Result<TrainConfig> {
        let mut lambda: LambdaSetting = self.lambda.parse()?;
        if let (LambdaSetting::Cv { .. }, Some(k)) = (lambda, self.folds) {
            if self.lambda == "cv" {
                lambda = LambdaSetting::Cv { folds: k };
            }
        }
        let defaults = BinThresholds::default();
        let cfg = TrainConfig {
            q: self.q,
            ridge: self.ridge,
            weighting: self.weighting.parse::<Weighting>()?,
            fit_corpus: self.fit_corpus.parse::<FitCorpus>()?,
            lambda,
            seed: self.seed,
            bin_thresholds: BinThresholds {
                medium: self.bin_medium.unwrap_or(defaults.medium),
                strong: self.bin_strong.unwrap_or(defaults.strong),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct ProviderArgs {
    /// Embedding provider: http(s) URL, `file:PATH` or `hash:DIM:SEED`.
    #[arg(long = "provider-url", alias = "provider", env = "ACCEL_PROVIDER_URL")]
    pub provider: String,
    #[arg(long, env = "ACCEL_PROVIDER_ID")]
    pub provider_id: Option<String>,
    #[arg(long, env = "ACCEL_EMBED_CACHE")]
    pub cache_dir: Option<PathBuf>,
}

impl ProviderArgs {
    fn spec(&self) -> accel_core::Result<ProviderSpec> {
        Ok(self.provider.parse::<ProviderSpec>()?.with_id(self.provider_id.clone()))
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Training experiments (`.csv` or `.jsonl`).
    #[arg(long)]
    pub experiments: PathBuf,
    /// Experiments whose texts the model will rank; they become the PCA corpus.
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Attribute lexicon JSON; the bundled sample lexicon when omitted.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Output bundle path.
    #[arg(long)]
    pub bundle: PathBuf,
    #[command(flatten)]
    pub provider: ProviderArgs,
    #[command(flatten)]
    pub hyper: Hyperparams,
}

#[derive(Debug, Clone, Args)]
pub struct RankArgs {
    #[command(flatten)]
    pub engine: EngineArgs,
    /// JSON request body (`-` for stdin), as sent to POST /rank.
    #[arg(long, conflicts_with = "texts")]
    pub input: Option<PathBuf>,
    /// Variant texts; ids are v1, v2, ...
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct RequestArgs {
    #[command(flatten)]
    pub engine: EngineArgs,
    /// JSON request body (`-` for stdin), as sent to the matching endpoint.
    #[arg(long)]
    pub input: PathBuf,
    /// Ask the chat client for narrated output.
    #[arg(long)]
    pub narrate: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Bundle for transfer evaluation on `--test`.
    #[arg(long, requires = "test")]
    pub bundle: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Leave-one-out over these experiments instead of transfer.
    #[arg(long, conflicts_with = "bundle")]
    pub loo: Option<PathBuf>,
    /// LOO backends: provider specs or `attribute-score`. Repeatable.
    #[arg(long = "backend")]
    pub backends: Vec<String>,
    /// Provider for transfer evaluation; defaults to the bundle's.
    #[arg(long = "provider-url", alias = "provider", env = "ACCEL_PROVIDER_URL")]
    pub provider: Option<String>,
    #[arg(long, env = "ACCEL_PROVIDER_ID")]
    pub provider_id: Option<String>,
    #[arg(long, env = "ACCEL_EMBED_CACHE")]
    pub cache_dir: Option<PathBuf>,
    /// Chat endpoint for the attribute-score backend.
    #[arg(long = "chat-url", env = "ACCEL_CHAT_URL")]
    pub chat: Option<String>,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Keep held-out experiments out of the PCA fit in LOO.
    #[arg(long)]
    pub strict_no_peek: bool,
    /// Bootstrap resamples for a 95% CI of mean ρ; 0 disables.
    #[arg(long, default_value_t = 0)]
    pub bootstrap: usize,
    /// Per-experiment ρ CSV (transfer mode).
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub hyper: Hyperparams,
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

/// 2 for anything the caller can fix by changing inputs or flags, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Stage { source, .. } => exit_code(source),
        Error::Config(_)
        | Error::Io(_)
        | Error::Json(_)
        | Error::Checksum
        | Error::UnsupportedVersion { .. }
        | Error::BundleFormat(_) => EXIT_USAGE,
        e if e.is_invalid_input() => EXIT_USAGE,
        _ => EXIT_INTERNAL,
    }
}

pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let format = cli.format;
    match cli.command {
        Command::Train(args) => {
            let report = cmd_train(&args)?;
            emit(out, format, &report, || table::train(&report))
        }
        Command::Rank(args) => {
            let engine = args.engine.engine()?;
            let req = match &args.input {
                Some(p) => read_json::<RankRequest>(p)?,
                None => RankRequest {
                    variants: args
                        .texts
                        .iter()
                        .enumerate()
                        .map(|(i, t)| Variant {
                            id: format!("v{}", i + 1),
                            text: t.clone(),
                        })
                        .collect(),
                },
            };
            let resp = cmd_rank(&engine, &req)?;
            emit(out, format, &resp, || table::rank(&resp))
        }
        Command::Insights(args) => {
            let engine = args.engine.engine()?;
            let mut req: InsightsRequest = read_json(&args.input)?;
            req.narrate |= args.narrate;
            req.k = args.engine.default_k.or(req.k);
            let resp = engine.insights(&req)?;
            warn_all(err, &resp.warnings)?;
            emit(out, format, &resp, || table::insights(&resp))
        }
        Command::Opportunities(args) => {
            let engine = args.engine.engine()?;
            let mut req: OpportunitiesRequest = read_json(&args.input)?;
            req.narrate |= args.narrate;
            req.k = args.engine.default_k.or(req.k);
            let resp = engine.opportunities(&req)?;
            warn_all(err, &resp.warnings)?;
            emit(out, format, &resp, || table::opportunities(&resp))
        }
        Command::Eval(args) => match cmd_eval(&args)? {
            EvalReport::Transfer(r) => {
                if let Some(path) = &args.csv {
                    std::fs::write(path, r.to_csv()?)?;
                }
                emit(out, format, &r, || r.to_table())
            }
            EvalReport::LeaveOneOut(rows) => emit(out, format, &rows, || backend_table(&rows)),
        },
        Command::Serve(args) => accel_service::run(&args).map_err(|e| match e {
            accel_service::RunError::Setup(e) => e.into(),
            accel_service::RunError::Io(e) => CliError {
                code: EXIT_INTERNAL,
                message: e.to_string(),
            },
        }),
    }
}

/// The library call behind both `accel rank` and POST /rank.
pub fn cmd_rank(engine: &Engine, req: &RankRequest) -> accel_core::Result<accel_core::api::RankResponse> {
    engine.rank(req)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub bundle: PathBuf,
    pub provider_id: String,
    pub p: usize,
    pub q: usize,
    pub m: usize,
    pub lambda: f64,
    pub config_hash: String,
    pub n_training_experiments: usize,
    pub n_training_arms: usize,
    pub nonzero_attributes: usize,
    pub load_summary: LoadSummaryReport,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LoadSummaryReport {
    pub rows_read: usize,
    pub rows_merged: usize,
    pub experiments_too_few_arms: usize,
    pub experiments_not_significant: usize,
}

impl From<&LoadSummary> for LoadSummaryReport {
    fn from(s: &LoadSummary) -> Self {
        Self {
            rows_read: s.rows_read,
            rows_merged: s.rows_merged,
            experiments_too_few_arms: s.experiments_too_few_arms,
            experiments_not_significant: s.experiments_not_significant,
        }
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainReport, CliError> {
    let config = args.hyper.config()?;
    let lexicon = match &args.lexicon {
        Some(p) => load_lexicon(p)?,
        None => AttributeLexicon::sample(),
    };
    let (training, summary) = load(&args.experiments)?;
    let target = match &args.target {
        Some(p) => Some(load(p)?.0.all_texts()),
        None => None,
    };
    let embedder = args.provider.spec()?.embedder(args.provider.cache_dir.as_deref())?;
    let bundle = accel_core::pipeline::train(&embedder, &training, target.as_deref(), &lexicon, &config)?;
    save_bundle(&bundle, &args.bundle)?;
    let stats = embedder.cache_stats();
    log::info!("embedding cache: {} hits, {} misses", stats.hits, stats.misses);
    Ok(TrainReport {
        bundle: args.bundle.clone(),
        provider_id: bundle.provider_id.clone(),
        p: bundle.p(),
        q: bundle.q(),
        m: bundle.m(),
        lambda: bundle.impact.lambda,
        config_hash: bundle.metadata.config_hash.clone(),
        n_training_experiments: bundle.metadata.n_training_experiments,
        n_training_arms: bundle.metadata.n_training_arms,
        nonzero_attributes: bundle.impact.beta_dprime.iter().filter(|b| **b != 0.0).count(),
        load_summary: (&summary).into(),
        notes: bundle.metadata.notes.clone(),
    })
}

pub enum EvalReport {
    Transfer(EvalResult),
    LeaveOneOut(Vec<accel_core::evaluation::BackendSummary>),
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport, CliError> {
    match (&args.bundle, &args.test, &args.loo) {
        (Some(bundle_path), Some(test_path), None) => {
            let bundle = accel_core::bundle::load_bundle(bundle_path)?;
            let spec = match &args.provider {
                Some(p) => p.parse::<ProviderSpec>()?.with_id(args.provider_id.clone()),
                None => accel_core::api::provider_from_id(&bundle.provider_id)?,
            };
            let embedder = spec.embedder(args.cache_dir.as_deref())?;
            let (test, _) = load(test_path)?;
            let mut result = evaluate_transfer(&bundle, &embedder, &test)?;
            if args.bootstrap > 0 {
                result = result.with_bootstrap(args.bootstrap, 0.95, args.hyper.seed)?;
            }
            Ok(EvalReport::Transfer(result))
        }
        (None, None, Some(corpus_path)) => {
            let config = args.hyper.config()?;
            let (corpus, _) = load(corpus_path)?;
            let specs = if args.backends.is_empty() {
                vec![args
                    .provider
                    .clone()
                    .ok_or_else(|| Error::Config("leave-one-out needs --backend or --provider-url".into()))?]
            } else {
                args.backends.clone()
            };
            let embedders = specs
                .iter()
                .map(|s| backend_embedder(s, args))
                .collect::<accel_core::Result<Vec<_>>>()?;
            let named: Vec<(String, &Embedder)> = specs.iter().cloned().zip(embedders.iter()).collect();
            let options = LooOptions {
                strict_no_peek: args.strict_no_peek,
            };
            Ok(EvalReport::LeaveOneOut(leave_one_out(&corpus, &named, &config, options)?))
        }
        _ => Err(Error::Config("use either --bundle with --test, or --loo".into()).into()),
    }
}

fn backend_embedder(spec: &str, args: &EvalArgs) -> accel_core::Result<Embedder> {
    if spec == "attribute-score" {
        let chat = args
            .chat
            .as_deref()
            .ok_or_else(|| Error::Config("the attribute-score backend needs --chat-url".into()))?
            .parse::<accel_core::api::ChatSpec>()?
            .build()?;
        let lexicon = match &args.lexicon {
            Some(p) => load_lexicon(p)?,
            None => AttributeLexicon::sample(),
        };
        let provider = AttributeScoreProvider::new(chat, lexicon, PromptTemplates::builtin());
        return Ok(Embedder::new(
            Arc::new(provider),
            EmbeddingCache::resolve(args.cache_dir.as_deref())?,
        ));
    }
    spec.parse::<ProviderSpec>()?.embedder(args.cache_dir.as_deref())
}

fn load(path: &Path) -> accel_core::Result<(accel_core::ingest::ExperimentSet, LoadSummary)> {
    let (set, summary) = load_experiments(path, InputFormat::from_path(path))?;
    if summary.has_skips() {
        log::warn!(
            "{}: skipped {} experiment(s) with fewer than 2 arms and {} not significant",
            path.display(),
            summary.experiments_too_few_arms,
            summary.experiments_not_significant
        );
    }
    Ok((set, summary))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> accel_core::Result<T> {
    let mut text = String::new();
    if path == Path::new("-") {
        std::io::stdin().read_to_string(&mut text)?;
    } else {
        text = std::fs::read_to_string(path)?;
    }
    serde_json::from_str(&text).map_err(|e| Error::Parse { line: e.line(), message: format!("{}: {e}", path.display()) })
}

fn warn_all(err: &mut dyn Write, warnings: &[String]) -> Result<(), CliError> {
    for w in warnings {
        writeln!(err, "warning: {w}")?;
    }
    Ok(())
}

fn emit<T: Serialize>(
    out: &mut dyn Write,
    format: OutputFormat,
    value: &T,
    table: impl FnOnce() -> String,
) -> Result<(), CliError> {
    match format {
        OutputFormat::Json => {
            let s = serde_json::to_string_pretty(value).map_err(Error::from)?;
            writeln!(out, "{s}")?;
        }
        OutputFormat::Table => write!(out, "{}", table())?,
    }
    Ok(())
}

//! Command-line interface: `extract`, `evaluate`, `cache`, and `convert`.
//!
//! Everything that affects outputs lives in flags (or the optional flat
//! `key = value` config file that supplies flag defaults); secrets come from
//! environment variables only. The resolved configuration is logged at
//! startup so any run is reproducible from its log header.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::backends::{HttpChatBackend, ScriptedMockBackend, SyntheticExtractorBackend};
use crate::corpus::AnnotatedCorpus;
use crate::ensemble::{CountMode, FilterRule};
use crate::gateway::{Gateway, ResponseCache};
use crate::pipeline::{
    extract_corpus, records_from_jsonl, records_to_jsonl, PipelineConfig, PipelineMode,
};
use crate::promptkit::PromptConfig;
use crate::retrieval::{Embedder, HashedBowBackend, HttpEmbeddingBackend};
use crate::scorer::{evaluate, Matcher};

/// Process exit codes: 1 usage, 2 data, 3 backend.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Backend(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Backend(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Backend(m) => m,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "oie", version, about = "Few-shot triplet extraction with uncertainty filtering")]
pub struct Cli {
    /// Flat `key = value` config file supplying flag defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the extraction pipeline over a test corpus.
    Extract(ExtractArgs),
    /// Score an extraction file against a gold corpus.
    Evaluate(EvaluateArgs),
    /// Inspect or clear the response cache directory.
    Cache(CacheArgs),
    /// Convert a benchmark TSV or JSONL corpus to canonical JSONL.
    Convert(ConvertArgs),
}

#[derive(Args, Debug, Default)]
pub struct ExtractArgs {
    /// Test corpus (.jsonl canonical or .tsv benchmark gold).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Training corpus supplying demonstrations.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// zero_shot | fixed_demo | selected_demo | selected_demo_uncertainty
    #[arg(long)]
    pub mode: Option<String>,
    /// http[:<base-url>] | mock:<fixture.jsonl> | synthetic
    #[arg(long)]
    pub backend: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub pool_size: Option<usize>,
    #[arg(long)]
    pub subset_size: Option<usize>,
    /// Ensemble size M.
    #[arg(long)]
    pub ensemble: Option<usize>,
    /// Uncertainty threshold k.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// concat | run_fraction
    #[arg(long)]
    pub count_mode: Option<String>,
    /// keep_confident (u <= k) | keep_uncertain (u >= k)
    #[arg(long)]
    pub filter_rule: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Output JSONL path (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_tokens: Option<u32>,
    #[arg(long)]
    pub demo_count: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Directory holding instruction.txt / fixed_demos.jsonl / quiz.jsonl
    /// overrides; built-in assets used when omitted.
    #[arg(long)]
    pub assets: Option<PathBuf>,
    /// Disable the error-correction quiz stage.
    #[arg(long)]
    pub no_quiz: bool,
    /// Disable the leakage guard (target sentence excluded from its pool).
    #[arg(long)]
    pub no_leakage_guard: bool,
    /// hashed | http:<base-url>
    #[arg(long)]
    pub embed_backend: Option<String>,
    #[arg(long)]
    pub embed_model: Option<String>,
    /// Gold-drop probability of the synthetic backend.
    #[arg(long)]
    pub p_drop: Option<f64>,
    /// Distractor-injection probability of the synthetic backend.
    #[arg(long)]
    pub p_noise: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Extraction JSONL produced by `extract`.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Gold corpus (.jsonl canonical or .tsv benchmark gold).
    #[arg(long)]
    pub gold: PathBuf,
    /// exact | lexical | tuple
    #[arg(long)]
    pub matcher: Option<String>,
    /// Report JSON output path (stdout table always printed).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CacheArgs {
    #[arg(long)]
    pub cache_dir: PathBuf,
    #[command(subcommand)]
    pub action: CacheAction,
}

#[derive(Subcommand, Debug)]
pub enum CacheAction {
    /// Print entry count and total bytes.
    Stats,
    /// Delete every cache entry. Requires --yes.
    Clear {
        #[arg(long)]
        yes: bool,
    },
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Flat `key = value` file; `#` starts a comment line.
pub fn load_config_file(path: &Path) -> Result<HashMap<String, String>, CliError> {
    let contents = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut map = HashMap::new();
    for (i, line) in contents.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("{}:{}: expected key = value", path.display(), i + 1))
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

struct Resolver {
    file: HashMap<String, String>,
}

impl Resolver {
    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.file.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|_| {
                CliError::Usage(format!("config key {key}: cannot parse {raw:?}"))
            }),
        }
    }
}

fn load_corpus(path: &Path) -> Result<AnnotatedCorpus, CliError> {
    let result = if path.extension().is_some_and(|e| e == "tsv") {
        AnnotatedCorpus::load_benchmark_tsv(path)
    } else {
        AnnotatedCorpus::load_jsonl(path)
    };
    result.map_err(|e| CliError::Data(e.to_string()))
}

fn parse_count_mode(s: &str) -> Result<CountMode, CliError> {
    match s {
        "concat" => Ok(CountMode::Concat),
        "run_fraction" => Ok(CountMode::RunFraction),
        other => Err(CliError::Usage(format!("unknown count mode {other:?}"))),
    }
}

fn parse_filter_rule(s: &str) -> Result<FilterRule, CliError> {
    match s {
        "keep_confident" => Ok(FilterRule::KeepConfident),
        "keep_uncertain" => Ok(FilterRule::KeepUncertain),
        other => Err(CliError::Usage(format!("unknown filter rule {other:?}"))),
    }
}

fn parse_matcher(s: &str) -> Result<Matcher, CliError> {
    match s {
        "exact" => Ok(Matcher::Exact),
        "lexical" => Ok(Matcher::Lexical),
        "tuple" => Ok(Matcher::Tuple),
        other => Err(CliError::Usage(format!("unknown matcher {other:?}"))),
    }
}

fn load_prompt_assets(dir: &Path, prompt: &mut PromptConfig) -> Result<(), CliError> {
    let instruction = dir.join("instruction.txt");
    if instruction.exists() {
        prompt.instruction_text = std::fs::read_to_string(&instruction)
            .map_err(|e| CliError::Data(format!("{}: {e}", instruction.display())))?
            .trim_end()
            .to_string();
    }
    let fixed = dir.join("fixed_demos.jsonl");
    if fixed.exists() {
        prompt.fixed_demos = load_corpus(&fixed)?.items;
    }
    let quiz = dir.join("quiz.jsonl");
    if quiz.exists() {
        prompt.quiz = load_corpus(&quiz)?.items;
    }
    Ok(())
}

#[derive(Debug)]
pub struct ExtractReport {
    pub sentences: usize,
    pub failures: usize,
    pub backend_calls: u64,
    pub embedding_calls: u64,
    pub output: String,
}

/// Run the extraction pipeline. Fails only on startup problems or when more
/// than half of the sentences fail.
pub fn cmd_extract(
    args: &ExtractArgs,
    file_config: HashMap<String, String>,
) -> Result<ExtractReport, CliError> {
    let resolver = Resolver { file: file_config };

    let dataset = args
        .dataset
        .clone()
        .or(resolver.get::<PathBuf>("dataset")?)
        .ok_or_else(|| CliError::Usage("--dataset is required".into()))?;
    let test = load_corpus(&dataset)?;
    let train = match args.train.clone().or(resolver.get::<PathBuf>("train")?) {
        Some(path) => Some(load_corpus(&path)?),
        None => None,
    };

    let mode_str = args
        .mode
        .clone()
        .or(resolver.get("mode")?)
        .unwrap_or_else(|| "zero_shot".to_string());
    let mode = PipelineMode::parse(&mode_str)
        .ok_or_else(|| CliError::Usage(format!("unknown mode {mode_str:?}")))?;

    let mut config = PipelineConfig::default();
    config.mode = mode;
    config.pool_size = args.pool_size.or(resolver.get("pool_size")?).unwrap_or(10);
    config.ensemble.subset_size = args.subset_size.or(resolver.get("subset_size")?).unwrap_or(3);
    config.ensemble.ensemble_size = args.ensemble.or(resolver.get("ensemble")?).unwrap_or(5);
    config.ensemble.threshold = args.threshold.or(resolver.get("threshold")?).unwrap_or(0.8);
    config.ensemble.seed = args.seed.or(resolver.get("seed")?).unwrap_or(0);
    if let Some(s) = args.count_mode.clone().or(resolver.get("count_mode")?) {
        config.ensemble.count_mode = parse_count_mode(&s)?;
    }
    if let Some(s) = args.filter_rule.clone().or(resolver.get("filter_rule")?) {
        config.ensemble.filter_rule = parse_filter_rule(&s)?;
    }
    config.params.model = args
        .model
        .clone()
        .or(resolver.get("model")?)
        .unwrap_or_else(|| "gpt-3.5-turbo".to_string());
    if let Some(t) = args.temperature.or(resolver.get("temperature")?) {
        config.params.temperature = t;
    }
    if let Some(m) = args.max_tokens.or(resolver.get("max_tokens")?) {
        config.params.max_tokens = m;
    }
    config.params.seed_hint = Some(config.ensemble.seed);
    config.prompt.demo_count = args.demo_count.or(resolver.get("demo_count")?).unwrap_or(3);
    config.workers = args.workers.or(resolver.get("workers")?).unwrap_or(4);
    config.leakage_guard = !args.no_leakage_guard;
    if let Some(dir) = args.assets.clone().or(resolver.get::<PathBuf>("assets")?) {
        load_prompt_assets(&dir, &mut config.prompt)?;
    }
    if args.no_quiz || resolver.get::<bool>("no_quiz")?.unwrap_or(false) {
        config.prompt.quiz.clear();
    }

    let backend_str = args
        .backend
        .clone()
        .or(resolver.get("backend")?)
        .unwrap_or_else(|| "synthetic".to_string());
    let cache = match args.cache_dir.clone().or(resolver.get::<PathBuf>("cache_dir")?) {
        Some(dir) => ResponseCache::disk(dir).map_err(|e| CliError::Data(e.to_string()))?,
        None => ResponseCache::memory(),
    };
    let p_drop = args.p_drop.or(resolver.get("p_drop")?).unwrap_or(0.0);
    let p_noise = args.p_noise.or(resolver.get("p_noise")?).unwrap_or(0.0);
    let backend: Box<dyn crate::gateway::ChatBackend> = if backend_str == "synthetic" {
        Box::new(SyntheticExtractorBackend::new(
            &test,
            config.ensemble.seed,
            p_drop,
            p_noise,
        ))
    } else if let Some(fixture) = backend_str.strip_prefix("mock:") {
        Box::new(
            ScriptedMockBackend::from_fixture(fixture)
                .map_err(|e| CliError::Data(format!("mock fixture {fixture}: {e}")))?,
        )
    } else if backend_str == "http" || backend_str.starts_with("http:") {
        let base = backend_str
            .strip_prefix("http:")
            .filter(|s| !s.is_empty())
            .unwrap_or("https://api.openai.com");
        let http = HttpChatBackend::new(base);
        if !http.has_credentials() {
            return Err(CliError::Backend(format!(
                "live backend needs the {} environment variable",
                crate::backends::API_KEY_ENV
            )));
        }
        Box::new(http)
    } else {
        return Err(CliError::Usage(format!("unknown backend {backend_str:?}")));
    };
    let gateway = Gateway::new(backend, cache);

    let embedder = if mode.needs_retrieval() {
        let embed_str = args
            .embed_backend
            .clone()
            .or(resolver.get("embed_backend")?)
            .unwrap_or_else(|| "hashed".to_string());
        let backend: Box<dyn crate::retrieval::EmbeddingBackend> = if embed_str == "hashed" {
            Box::new(HashedBowBackend)
        } else if let Some(base) = embed_str.strip_prefix("http:") {
            let model = args
                .embed_model
                .clone()
                .or(resolver.get("embed_model")?)
                .unwrap_or_else(|| "text-embedding-3-small".to_string());
            Box::new(HttpEmbeddingBackend::new(
                base,
                &model,
                std::env::var(crate::backends::API_KEY_ENV).ok(),
            ))
        } else {
            return Err(CliError::Usage(format!(
                "unknown embedding backend {embed_str:?}"
            )));
        };
        Some(Embedder::new(backend))
    } else {
        None
    };

    log::info!(
        "extract: dataset={} ({} sentences) train={:?} mode={} backend={} model={} \
         pool_size={} subset_size={} ensemble={} threshold={} count_mode={} seed={} \
         temperature={} max_tokens={} workers={} quiz={} leakage_guard={}",
        dataset.display(),
        test.len(),
        args.train,
        mode.as_str(),
        gateway.backend_id(),
        config.params.model,
        config.pool_size,
        config.ensemble.subset_size,
        config.ensemble.ensemble_size,
        config.ensemble.threshold,
        config.ensemble.count_mode.as_str(),
        config.ensemble.seed,
        config.params.temperature,
        config.params.max_tokens,
        config.workers,
        config.prompt.quiz.len(),
        config.leakage_guard,
    );

    let outcome = extract_corpus(&test, train.as_ref(), &config, &gateway, embedder.as_ref());
    let output = records_to_jsonl(&outcome.records);
    if let Some(out) = &args.out {
        std::fs::write(out, &output)
            .map_err(|e| CliError::Data(format!("cannot write {}: {e}", out.display())))?;
    }
    let report = ExtractReport {
        sentences: outcome.sentences,
        failures: outcome.failures,
        backend_calls: gateway.call_count(),
        embedding_calls: embedder.as_ref().map_or(0, |e| e.call_count()),
        output,
    };
    log::info!(
        "extract done: {} sentences, {} failures, {} backend calls, {} embedding calls",
        report.sentences,
        report.failures,
        report.backend_calls,
        report.embedding_calls
    );
    if report.failures * 2 > report.sentences {
        return Err(CliError::Backend(format!(
            "{} of {} sentences failed",
            report.failures, report.sentences
        )));
    }
    Ok(report)
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<String, CliError> {
    let gold = load_corpus(&args.gold)?;
    let contents = std::fs::read_to_string(&args.predictions).map_err(|e| {
        CliError::Data(format!("cannot read {}: {e}", args.predictions.display()))
    })?;
    let records = records_from_jsonl(&contents)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.predictions.display())))?;
    let predictions: Vec<(String, Vec<crate::ensemble::ScoredTriplet>)> = records
        .iter()
        .map(|r| {
            (
                r.id.clone(),
                r.triplets.iter().map(|t| t.to_scored()).collect(),
            )
        })
        .collect();
    let matcher = parse_matcher(args.matcher.as_deref().unwrap_or("exact"))?;
    let report =
        evaluate(&predictions, &gold, matcher, None).map_err(|e| CliError::Data(e.to_string()))?;

    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    if let Some(out) = &args.out {
        std::fs::write(out, &json)
            .map_err(|e| CliError::Data(format!("cannot write {}: {e}", out.display())))?;
    }
    let mut table = String::new();
    let _ = writeln!(table, "matcher         {}", report.matcher.as_str());
    let _ = writeln!(table, "precision       {:.4}", report.precision);
    let _ = writeln!(table, "recall          {:.4}", report.recall);
    let _ = writeln!(table, "f1 (max)        {:.4}", report.f1);
    let _ = writeln!(table, "best threshold  {:.4}", report.best_threshold);
    let _ = writeln!(
        table,
        "counts          {} pred / {} gold / {:.2} matched",
        report.counts.num_pred, report.counts.num_gold, report.counts.matched
    );
    Ok(table)
}

pub fn cmd_cache(args: &CacheArgs) -> Result<String, CliError> {
    let dir = &args.cache_dir;
    match &args.action {
        CacheAction::Stats => {
            let mut entries = 0usize;
            let mut bytes = 0u64;
            if dir.exists() {
                for entry in std::fs::read_dir(dir)
                    .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?
                {
                    let entry = entry.map_err(|e| CliError::Data(e.to_string()))?;
                    if entry.file_type().map(|t| t.is_file()).unwrap_or(false) {
                        entries += 1;
                        bytes += entry.metadata().map(|m| m.len()).unwrap_or(0);
                    }
                }
            }
            Ok(format!("{entries} entries, {bytes} bytes\n"))
        }
        CacheAction::Clear { yes } => {
            if !yes {
                return Err(CliError::Usage(
                    "cache clear is destructive; pass --yes to confirm".into(),
                ));
            }
            let mut removed = 0usize;
            if dir.exists() {
                for entry in std::fs::read_dir(dir)
                    .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?
                {
                    let entry = entry.map_err(|e| CliError::Data(e.to_string()))?;
                    if entry.file_type().map(|t| t.is_file()).unwrap_or(false) {
                        std::fs::remove_file(entry.path())
                            .map_err(|e| CliError::Data(e.to_string()))?;
                        removed += 1;
                    }
                }
            }
            Ok(format!("removed {removed} entries\n"))
        }
    }
}

pub fn cmd_convert(args: &ConvertArgs) -> Result<String, CliError> {
    let corpus = load_corpus(&args.input)?;
    std::fs::write(&args.out, corpus.to_jsonl())
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", args.out.display())))?;
    Ok(format!(
        "wrote {} sentences to {}\n",
        corpus.len(),
        args.out.display()
    ))
}

/// Dispatch a parsed command line. Returns the text to print on stdout.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let file_config = match &cli.config {
        Some(path) => load_config_file(path)?,
        None => HashMap::new(),
    };
    match &cli.command {
        Command::Extract(args) => {
            let report = cmd_extract(args, file_config)?;
            if args.out.is_some() {
                Ok(format!(
                    "{} sentences, {} failures, {} backend calls\n",
                    report.sentences, report.failures, report.backend_calls
                ))
            } else {
                Ok(report.output)
            }
        }
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Cache(args) => cmd_cache(args),
        Command::Convert(args) => cmd_convert(args),
    }
}

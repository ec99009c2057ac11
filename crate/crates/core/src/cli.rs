//! Command-line entry point.
//!
//! Every command reads one TOML run config (or a `run_manifest.json` from an
//! earlier run) and writes into a run directory. Relative paths in a config
//! are resolved against the config file's directory.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{load_corpus, sample_test_split, validate_pairs, Corpus, CorpusError, Label, TaskKind, DEFAULT_MAX_EDIT_RATIO};
use crate::digest::derive_seed;
use crate::embeddings::{embed_corpus, embed_examples, CacheStats, EmbeddingCache, EmbeddingError};
use crate::evaluation::{
    aggregate_grades, finalize_eval_log, read_eval_records, render_grade_report, render_report, run_icl_eval, run_induction,
    selection_seed, Decoding, EvalError, EvalJob, EvalLog, Grade, InstructionStore, ReportFormat, RunReport, EVAL_RECORDS_FILE,
    INSTRUCTION_RECORDS_FILE,
};
use crate::gateway::{
    CompletionProvider, EmbeddingProvider, GatewayError, MockProvider, MockRule, ProviderConfig, RemoteClient,
    DEFAULT_ICL_TEMPERATURE, DEFAULT_INDUCTION_MAX_TOKENS, DEFAULT_INDUCTION_TEMPERATURE, DEFAULT_LABEL_MAX_TOKENS,
};
use crate::prompting::{render_icl, PromptError, TemplateKind};
use crate::selection::{arrange, ArrangePolicy, PairScore, SelectionError, SelectionPool, Selector, StrategyKind, StrategySpec};

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const EMBEDDING_CACHE_FILE: &str = "embeddings.jsonl";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),
    #[error("{path}: {source}")]
    Corpus { path: PathBuf, source: CorpusError },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io { path: path.to_path_buf(), message: e.to_string() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Remote,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorporaConfig {
    /// Demonstration pool.
    pub pool: PathBuf,
    /// Test datasets in report column order; the first is usually in-domain.
    pub datasets: Vec<DatasetConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockConfig {
    #[serde(default)]
    pub lexicon: Option<BTreeMap<String, Label>>,
    #[serde(default)]
    pub default_label: Option<Label>,
    #[serde(default = "default_mock_dimension")]
    pub dimension: usize,
}

fn default_mock_dimension() -> usize {
    MockProvider::DEFAULT_DIMENSION
}

impl Default for MockConfig {
    fn default() -> Self {
        Self { lexicon: None, default_label: None, dimension: default_mock_dimension() }
    }
}

impl MockConfig {
    fn rule(&self, task: TaskKind) -> Result<MockRule, GatewayError> {
        let builtin = MockRule::builtin(task);
        MockRule::new(
            task,
            self.lexicon.clone().unwrap_or(builtin.lexicon),
            self.default_label.unwrap_or(builtin.default_label),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_icl_temperature")]
    pub temperature: f64,
    #[serde(default = "default_label_tokens")]
    pub max_tokens: u32,
}

fn default_icl_temperature() -> f64 {
    DEFAULT_ICL_TEMPERATURE
}
fn default_label_tokens() -> u32 {
    DEFAULT_LABEL_MAX_TOKENS
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { temperature: default_icl_temperature(), max_tokens: default_label_tokens() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InductionConfig {
    #[serde(default = "default_induction_strategies")]
    pub strategies: Vec<StrategyKind>,
    #[serde(default = "default_induction_k")]
    pub k: usize,
    #[serde(default = "default_induction_count")]
    pub count: usize,
    #[serde(default = "default_induction_temperature")]
    pub temperature: f64,
    #[serde(default = "default_induction_tokens")]
    pub max_tokens: u32,
}

fn default_induction_strategies() -> Vec<StrategyKind> {
    vec![StrategyKind::Random, StrategyKind::Nearest, StrategyKind::CdsRandom]
}
fn default_induction_k() -> usize {
    4
}
fn default_induction_count() -> usize {
    100
}
fn default_induction_temperature() -> f64 {
    DEFAULT_INDUCTION_TEMPERATURE
}
fn default_induction_tokens() -> u32 {
    DEFAULT_INDUCTION_MAX_TOKENS
}

impl Default for InductionConfig {
    fn default() -> Self {
        Self {
            strategies: default_induction_strategies(),
            k: default_induction_k(),
            count: default_induction_count(),
            temperature: default_induction_temperature(),
            max_tokens: default_induction_tokens(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskKind,
    #[serde(default)]
    pub seed: u64,
    pub test_size: usize,
    pub strategies: Vec<StrategyKind>,
    pub ks: Vec<usize>,
    #[serde(default = "default_max_edit_ratio")]
    pub max_edit_ratio: f64,
    #[serde(default)]
    pub arrangement: ArrangePolicy,
    #[serde(default)]
    pub pair_score: PairScore,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Defaults to `embeddings.jsonl` inside the run directory.
    #[serde(default)]
    pub embedding_cache: Option<PathBuf>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub backend: Option<Backend>,
    pub corpora: CorporaConfig,
    #[serde(default)]
    pub provider: Option<ProviderConfig>,
    #[serde(default)]
    pub mock: MockConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub induction: InductionConfig,
}

fn default_max_edit_ratio() -> f64 {
    DEFAULT_MAX_EDIT_RATIO
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}
fn default_workers() -> usize {
    1
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(vec![e.to_string()]))
    }

    /// Load a TOML config, or the config snapshot inside a run manifest.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        if path.extension().is_some_and(|e| e == "json") {
            let manifest: RunManifest =
                serde_json::from_str(&text).map_err(|e| CliError::Config(vec![format!("{}: {e}", path.display())]))?;
            return Ok(manifest.config);
        }
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.resolve_paths(base);
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut self.corpora.pool);
        for ds in &mut self.corpora.datasets {
            resolve(&mut ds.path);
        }
        resolve(&mut self.out_dir);
        if let Some(cache) = &mut self.embedding_cache {
            resolve(cache);
        }
        if let Some(log) = self.provider.as_mut().and_then(|p| p.request_log.as_mut()) {
            resolve(log);
        }
    }

    /// Every problem with the config.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.corpora.pool.is_file() {
            out.push(format!("pool corpus {} does not exist", self.corpora.pool.display()));
        }
        if self.corpora.datasets.is_empty() {
            out.push("at least one test dataset is required".into());
        }
        let mut names = HashSet::new();
        for ds in &self.corpora.datasets {
            if !names.insert(ds.name.as_str()) {
                out.push(format!("dataset name {:?} is used twice", ds.name));
            }
            if !ds.path.is_file() {
                out.push(format!("dataset {:?}: {} does not exist", ds.name, ds.path.display()));
            }
        }
        if self.test_size == 0 {
            out.push("test_size must be at least 1".into());
        }
        if self.strategies.is_empty() {
            out.push("strategies must not be empty".into());
        }
        let unique: HashSet<_> = self.strategies.iter().collect();
        if unique.len() != self.strategies.len() {
            out.push("strategies contains duplicates".into());
        }
        if self.ks.is_empty() {
            out.push("ks must not be empty".into());
        }
        for &k in &self.ks {
            for &kind in &self.strategies {
                if let Err(e) = StrategySpec::new(kind, k, 0) {
                    out.push(format!("k={k}: {e}"));
                }
            }
        }
        if !(self.max_edit_ratio > 0.0 && self.max_edit_ratio <= 1.0) {
            out.push(format!("max_edit_ratio must be in (0, 1], got {}", self.max_edit_ratio));
        }
        if self.workers == 0 {
            out.push("workers must be at least 1".into());
        }
        if let Some(provider) = &self.provider {
            out.extend(provider.problems().into_iter().map(|p| format!("provider: {p}")));
        }
        if let Err(e) = self.mock.rule(self.task) {
            out.push(format!("mock: {e}"));
        }
        if self.mock.dimension == 0 {
            out.push("mock.dimension must be at least 1".into());
        }
        if self.induction.count == 0 {
            out.push("induction.count must be at least 1".into());
        }
        for &kind in &self.induction.strategies {
            if let Err(e) = StrategySpec::new(kind, self.induction.k, 0) {
                out.push(format!("induction: {e}"));
            }
        }
        for (name, t) in [("eval", self.eval.temperature), ("induction", self.induction.temperature)] {
            if !(0.0..=2.0).contains(&t) {
                out.push(format!("{name}.temperature must be in [0, 2], got {t}"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(problems))
        }
    }

    pub fn cache_path(&self) -> PathBuf {
        self.embedding_cache.clone().unwrap_or_else(|| self.out_dir.join(EMBEDDING_CACHE_FILE))
    }

    fn completion_model(&self) -> String {
        self.provider.as_ref().map(|p| p.completion_model.clone()).unwrap_or_else(|| "mock".into())
    }

    fn needs_embeddings(&self) -> bool {
        self.strategies.iter().any(|s| s.uses_embeddings())
    }
}

/// Everything needed to replay a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub provider_identity: String,
    pub embedding_model: String,
    pub template_hashes: BTreeMap<String, String>,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn new(config: &RunConfig, providers: &Providers) -> Self {
        Self {
            seed: config.seed,
            provider_identity: providers.completion().identity(),
            embedding_model: providers.embedding().model_id().to_string(),
            template_hashes: TemplateKind::ALL.iter().map(|t| (t.as_str().to_string(), t.skeleton_hash())).collect(),
            config: config.clone(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(io_err(&path))?;
        Ok(path)
    }

    pub fn read(dir: &Path) -> Result<Option<Self>, CliError> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map(Some).map_err(|e| CliError::Io { path, message: e.to_string() })
    }
}

pub enum Providers {
    Mock(MockProvider),
    Remote(RemoteClient),
}

impl Providers {
    pub fn build(config: &RunConfig, backend: Backend) -> Result<Self, CliError> {
        match backend {
            Backend::Mock => Ok(Providers::Mock(MockProvider::with_dimension(config.mock.rule(config.task)?, config.mock.dimension))),
            Backend::Remote => {
                let provider = config
                    .provider
                    .clone()
                    .ok_or_else(|| CliError::Config(vec!["remote backend needs a [provider] section".into()]))?;
                Ok(Providers::Remote(RemoteClient::from_config(provider)?))
            }
        }
    }

    pub fn completion(&self) -> &dyn CompletionProvider {
        match self {
            Providers::Mock(m) => m,
            Providers::Remote(r) => r,
        }
    }

    pub fn embedding(&self) -> &dyn EmbeddingProvider {
        match self {
            Providers::Mock(m) => m,
            Providers::Remote(r) => r,
        }
    }
}

fn load(path: &Path, task: TaskKind) -> Result<Corpus, CliError> {
    load_corpus(path, task).map_err(|source| CliError::Corpus { path: path.to_path_buf(), source })
}

fn out_line(out: &mut dyn Write, line: impl AsRef<str>) -> Result<(), CliError> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| CliError::Io { path: PathBuf::from("<stdout>"), message: e.to_string() })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSummary {
    pub name: String,
    pub path: PathBuf,
    pub examples: usize,
    pub pairs: usize,
    pub violations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestSummary {
    pub corpora: Vec<CorpusSummary>,
}

impl IngestSummary {
    pub fn violation_count(&self) -> usize {
        self.corpora.iter().map(|c| c.violations.len()).sum()
    }
}

/// Load and validate every corpus named in the config.
pub fn cmd_ingest(config: &RunConfig, out: &mut dyn Write) -> Result<IngestSummary, CliError> {
    let mut sources = vec![("pool".to_string(), config.corpora.pool.clone())];
    sources.extend(config.corpora.datasets.iter().map(|d| (d.name.clone(), d.path.clone())));
    let mut corpora = Vec::new();
    for (name, path) in sources {
        let corpus = load(&path, config.task)?;
        let report = validate_pairs(&corpus, config.max_edit_ratio);
        let summary = CorpusSummary {
            name,
            examples: corpus.len(),
            pairs: corpus.pair_count(),
            violations: report.violations.iter().map(ToString::to_string).collect(),
            path,
        };
        out_line(
            out,
            format!(
                "{}: {} examples, {} pairs, {} violations ({})",
                summary.name,
                summary.examples,
                summary.pairs,
                summary.violations.len(),
                summary.path.display()
            ),
        )?;
        for v in &summary.violations {
            out_line(out, format!("  violation: {v}"))?;
        }
        corpora.push(summary);
    }
    Ok(IngestSummary { corpora })
}

/// Fill the embedding cache for the pool and every dataset.
pub fn cmd_embed(config: &RunConfig, providers: &Providers, out: &mut dyn Write) -> Result<CacheStats, CliError> {
    let mut cache = EmbeddingCache::<f64>::open(config.cache_path())?;
    let mut total = CacheStats::default();
    let mut sources = vec![("pool".to_string(), config.corpora.pool.clone())];
    sources.extend(config.corpora.datasets.iter().map(|d| (d.name.clone(), d.path.clone())));
    for (name, path) in sources {
        let corpus = load(&path, config.task)?;
        let (_, stats) = embed_corpus(&corpus, providers.embedding(), &mut cache)?;
        out_line(out, format!("{name}: {} hits, {} misses, {} provider calls", stats.hits, stats.misses, stats.provider_calls))?;
        total.hits += stats.hits;
        total.misses += stats.misses;
        total.provider_calls += stats.provider_calls;
    }
    out_line(out, format!("total: {} hits, {} misses", total.hits, total.misses))?;
    Ok(total)
}

/// Print the demonstrations and prompt a strategy would use for one test example.
pub fn cmd_select(
    config: &RunConfig,
    providers: &Providers,
    test_id: &str,
    kind: StrategyKind,
    k: usize,
    dataset: Option<&str>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let pool = load(&config.corpora.pool, config.task)?;
    let (dataset_name, source, exclude) = match dataset {
        Some(name) => {
            let ds = config
                .corpora
                .datasets
                .iter()
                .find(|d| d.name == name)
                .ok_or_else(|| CliError::Usage(format!("no dataset named {name:?}")))?;
            let corpus = load(&ds.path, config.task)?;
            let split = test_split(config, &ds.name, &corpus)?;
            (name.to_string(), corpus, split.ids)
        }
        None => ("pool".to_string(), pool.clone(), HashSet::from([test_id.to_string()])),
    };
    let test = source
        .get(test_id)
        .cloned()
        .ok_or_else(|| CliError::Usage(format!("no example {test_id:?} in {dataset_name}")))?;
    let spec = StrategySpec::new(kind, k, selection_seed(config.seed, &dataset_name, kind, k, test_id))?;

    let mut cache = EmbeddingCache::<f64>::open(config.cache_path())?;
    let (store, query) = if kind.uses_embeddings() {
        let (store, _) = embed_corpus(&pool, providers.embedding(), &mut cache)?;
        let (tests, _) = embed_examples([&test], providers.embedding(), &mut cache)?;
        (Some(store), tests.get(test_id).cloned())
    } else {
        (None, None)
    };
    let selector = Selector { pool: SelectionPool::new(&pool, &exclude), store: store.as_ref(), pair_score: config.pair_score };
    let set = arrange(&selector.select(&spec, &test, query.as_ref())?, config.arrangement);

    out_line(out, format!("strategy {kind}, k={k}, test {test_id} ({dataset_name})"))?;
    for (i, (demo, score)) in set.demos.iter().zip(&set.scores).enumerate() {
        let mut line = format!("  {}. {} [{}]", i + 1, demo.id, demo.label);
        if let Some(pair_id) = &demo.pair_id {
            line.push_str(&format!(" pair {pair_id} {}", serde_json::to_value(demo.cd_role).expect("role").as_str().unwrap_or("")));
        }
        if let Some(score) = score {
            line.push_str(&format!(" score {score:.6}"));
        }
        out_line(out, line)?;
    }
    let counts = set.label_counts();
    let labels: Vec<String> = config
        .task
        .labels()
        .iter()
        .filter_map(|l| counts.get(l).map(|n| format!("{l} {n}")))
        .collect();
    out_line(out, format!("labels: {}", labels.join(", ")))?;
    let prompt = render_icl(&set.demos, &test)?;
    out_line(out, "--- prompt ---")?;
    out_line(out, prompt.text)?;
    Ok(())
}

fn test_split(config: &RunConfig, dataset: &str, corpus: &Corpus) -> Result<crate::corpus::TestSplit, CliError> {
    let seed = derive_seed(config.seed, &["test-split", dataset]);
    sample_test_split(corpus, config.test_size, seed).map_err(|source| CliError::Corpus {
        path: PathBuf::from(dataset),
        source,
    })
}

/// Evaluate every (dataset, strategy, k, test) cell and write records, manifest and reports.
pub fn cmd_eval(config: &RunConfig, providers: &Providers, out: &mut dyn Write) -> Result<RunReport, CliError> {
    config.validate()?;
    let dir = &config.out_dir;
    RunManifest::new(config, providers).write(dir)?;
    let pool = load(&config.corpora.pool, config.task)?;
    let mut cache = EmbeddingCache::<f64>::open(config.cache_path())?;
    let pool_store = if config.needs_embeddings() {
        Some(embed_corpus(&pool, providers.embedding(), &mut cache)?.0)
    } else {
        None
    };
    let mut log = EvalLog::open(dir.join(EVAL_RECORDS_FILE))?;
    if log.completed() > 0 {
        out_line(out, format!("resuming: {} records already on disk", log.completed()))?;
    }
    let decoding = Decoding {
        model: config.completion_model(),
        temperature: config.eval.temperature,
        max_tokens: config.eval.max_tokens,
    };
    let mut records = Vec::new();
    for ds in &config.corpora.datasets {
        let corpus = if ds.path == config.corpora.pool { pool.clone() } else { load(&ds.path, config.task)? };
        let split = test_split(config, &ds.name, &corpus)?;
        let test_store = if config.needs_embeddings() {
            Some(embed_examples(&split.examples, providers.embedding(), &mut cache)?.0)
        } else {
            None
        };
        let job = EvalJob {
            dataset: ds.name.clone(),
            pool: SelectionPool::new(&pool, &split.ids),
            pool_store: pool_store.as_ref(),
            tests: &split.examples,
            test_store: test_store.as_ref(),
            strategies: config.strategies.clone(),
            ks: config.ks.clone(),
            seed: config.seed,
            arrange: config.arrangement,
            pair_score: config.pair_score,
            decoding: decoding.clone(),
            workers: config.workers,
        };
        let ds_records = run_icl_eval(&job, providers.completion(), &mut log)?;
        out_line(out, format!("{}: {} records", ds.name, ds_records.len()))?;
        records.extend(ds_records);
    }
    records.sort_by(|a, b| {
        (&a.dataset, a.strategy.kind, a.strategy.k, &a.test_id).cmp(&(&b.dataset, b.strategy.kind, b.strategy.k, &b.test_id))
    });
    finalize_eval_log(&log, &records)?;
    let datasets = config.corpora.datasets.iter().map(|d| d.name.clone()).collect();
    let report = RunReport::from_records(StrategyKind::Random, datasets, &records);
    write_reports(dir, "report", |f| render_report(&report, f), &[ReportFormat::Csv, ReportFormat::Markdown], out)?;
    Ok(report)
}

fn write_reports(
    dir: &Path,
    stem: &str,
    render: impl Fn(ReportFormat) -> String,
    formats: &[ReportFormat],
    out: &mut dyn Write,
) -> Result<Vec<PathBuf>, CliError> {
    let mut paths = Vec::new();
    for &format in formats {
        let path = dir.join(format!("{stem}.{}", format.extension()));
        fs::write(&path, render(format)).map_err(io_err(&path))?;
        out_line(out, format!("wrote {}", path.display()))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Generate instructions for each strategy (or just `strategy`).
pub fn cmd_induce(
    config: &RunConfig,
    providers: &Providers,
    strategy: Option<StrategyKind>,
    count: Option<usize>,
    out: &mut dyn Write,
) -> Result<Vec<crate::evaluation::InstructionRecord>, CliError> {
    let count = count.unwrap_or(config.induction.count);
    if count == 0 {
        return Err(CliError::Config(vec!["instruction count must be at least 1".into()]));
    }
    let strategies = strategy.map(|s| vec![s]).unwrap_or_else(|| config.induction.strategies.clone());
    let dir = &config.out_dir;
    RunManifest::new(config, providers).write(dir)?;
    let pool = load(&config.corpora.pool, config.task)?;
    let store = if strategies.iter().any(|s| s.uses_embeddings()) {
        let mut cache = EmbeddingCache::<f64>::open(config.cache_path())?;
        Some(embed_corpus(&pool, providers.embedding(), &mut cache)?.0)
    } else {
        None
    };
    let decoding = Decoding {
        model: config.completion_model(),
        temperature: config.induction.temperature,
        max_tokens: config.induction.max_tokens,
    };
    let mut records_store = InstructionStore::open(dir.join(INSTRUCTION_RECORDS_FILE))?;
    let mut all = Vec::new();
    for kind in strategies {
        let spec = StrategySpec::new(kind, config.induction.k, config.seed)?;
        let seed = derive_seed(config.seed, &["induction", kind.as_str()]);
        let records = run_induction(&pool, &spec, count, providers.completion(), seed, store.as_ref(), &decoding, &mut records_store)?;
        out_line(out, format!("{kind}: {} instructions", records.len()))?;
        all.extend(records);
    }
    Ok(all)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GradeSession {
    pub graded: usize,
    pub skipped: usize,
    pub remaining: usize,
}

/// Interactive grading: 1/2/3 assign a grade, `s` skips, `q` or end of input quits.
pub fn cmd_grade(run_dir: &Path, corpus: Option<&Corpus>, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<GradeSession, CliError> {
    let path = run_dir.join(INSTRUCTION_RECORDS_FILE);
    if !path.is_file() {
        return Err(CliError::Usage(format!("no instruction records at {}", path.display())));
    }
    let mut store = InstructionStore::open(&path)?;
    let pending: Vec<String> = store.records().iter().filter(|r| r.grade.is_none()).map(|r| r.id.clone()).collect();
    let mut session = GradeSession::default();
    out_line(out, "grades:")?;
    for grade in Grade::ALL {
        out_line(out, format!("  {} {}: {}", grade.key(), grade, grade.definition()))?;
    }
    out_line(out, "  s skip, q quit")?;
    'records: for id in &pending {
        let record = store.get(id).expect("pending id exists").clone();
        out_line(out, format!("\n[{}] strategy {}", record.id, record.strategy))?;
        for demo_id in &record.demo_ids {
            match corpus.and_then(|c| c.get(demo_id)) {
                Some(demo) => out_line(out, format!("  demo {demo_id}: {} => {}", demo.joined_text(), demo.label))?,
                None => out_line(out, format!("  demo {demo_id}"))?,
            }
        }
        out_line(out, format!("instruction: {}", record.instruction_text.trim()))?;
        loop {
            write!(out, "grade [1/2/3/s/q]: ").and_then(|_| out.flush()).map_err(io_err(Path::new("<stdout>")))?;
            let mut line = String::new();
            let read = input.read_line(&mut line).map_err(io_err(Path::new("<stdin>")))?;
            if read == 0 {
                break 'records;
            }
            match line.trim() {
                "q" => break 'records,
                "s" => {
                    session.skipped += 1;
                    continue 'records;
                }
                key => match Grade::ALL.into_iter().find(|g| key.len() == 1 && key.starts_with(g.key())) {
                    Some(grade) => {
                        store.record_grade(id, grade)?;
                        session.graded += 1;
                        continue 'records;
                    }
                    None => out_line(out, format!("unrecognised key {key:?}"))?,
                },
            }
        }
    }
    session.remaining = store.records().iter().filter(|r| r.grade.is_none()).count();
    out_line(out, format!("\ngraded {}, skipped {}, {} ungraded remain", session.graded, session.skipped, session.remaining))?;
    Ok(session)
}

/// Write eval reports, and with `grades` also the grade distribution.
pub fn cmd_report(run_dir: &Path, formats: &[ReportFormat], grades: bool, out: &mut dyn Write) -> Result<Vec<PathBuf>, CliError> {
    if !run_dir.is_dir() {
        return Err(CliError::Usage(format!("run directory {} does not exist", run_dir.display())));
    }
    let mut written = Vec::new();
    if grades {
        let path = run_dir.join(INSTRUCTION_RECORDS_FILE);
        if !path.is_file() {
            return Err(CliError::Usage(format!("no instruction records at {}", path.display())));
        }
        let store = InstructionStore::open(&path)?;
        let rows = aggregate_grades(store.records())?;
        written.extend(write_reports(run_dir, "grade_report", |f| render_grade_report(&rows, f), formats, out)?);
    } else {
        let path = run_dir.join(EVAL_RECORDS_FILE);
        let records = read_eval_records(&path)?;
        if records.is_empty() {
            return Err(CliError::Usage(format!("no evaluation records at {}", path.display())));
        }
        let datasets = match RunManifest::read(run_dir)? {
            Some(m) => m.config.corpora.datasets.iter().map(|d| d.name.clone()).collect(),
            None => Vec::new(),
        };
        let report = RunReport::from_records(StrategyKind::Random, datasets, &records);
        written.extend(write_reports(run_dir, "report", |f| render_report(&report, f), formats, out)?);
    }
    Ok(written)
}

#[derive(Debug, Parser)]
#[command(name = "cdicl", version, about = "Demonstration selection and evaluation for in-context learning")]
pub struct Cli {
    /// Run config (TOML) or a run_manifest.json to replay.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the config backend; defaults to mock.
    #[arg(long, global = true, value_enum)]
    pub provider: Option<Backend>,
    /// Run directory; overrides the config out_dir.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Markdown,
    Both,
}

impl FormatArg {
    fn formats(self) -> Vec<ReportFormat> {
        match self {
            FormatArg::Csv => vec![ReportFormat::Csv],
            FormatArg::Markdown => vec![ReportFormat::Markdown],
            FormatArg::Both => vec![ReportFormat::Csv, ReportFormat::Markdown],
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load and validate corpora; report pair violations.
    Ingest,
    /// Populate the embedding cache.
    Embed,
    /// Show the demonstrations and prompt for one test example.
    Select {
        #[arg(long)]
        test_id: String,
        #[arg(long)]
        strategy: StrategyKind,
        #[arg(long)]
        k: usize,
        /// Dataset holding the test example; defaults to the pool.
        #[arg(long)]
        dataset: Option<String>,
    },
    /// Run the evaluation grid.
    Eval,
    /// Generate instructions from demonstrations.
    Induce {
        #[arg(long)]
        strategy: Option<StrategyKind>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Grade induced instructions interactively.
    Grade,
    /// Write reports from records in the run directory.
    Report {
        #[arg(long, value_enum, default_value = "both")]
        format: FormatArg,
        /// Report the instruction grade distribution instead of accuracies.
        #[arg(long)]
        grades: bool,
    },
}

impl Cli {
    /// The config with command-line overrides applied.
    pub fn effective_config(&self) -> Result<Option<RunConfig>, CliError> {
        let Some(path) = &self.config else { return Ok(None) };
        let mut config = RunConfig::load(path)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(out) = &self.out {
            config.out_dir = out.clone();
        }
        if let Some(backend) = self.provider {
            config.backend = Some(backend);
        }
        Ok(Some(config))
    }

    fn require_config(&self) -> Result<RunConfig, CliError> {
        let config = self.effective_config()?.ok_or_else(|| CliError::Usage("--config is required".into()))?;
        config.validate()?;
        Ok(config)
    }

    fn run_dir(&self) -> Result<PathBuf, CliError> {
        match (&self.out, self.effective_config()?) {
            (Some(out), _) => Ok(out.clone()),
            (None, Some(config)) => Ok(config.out_dir),
            (None, None) => Err(CliError::Usage("--out or --config is required".into())),
        }
    }
}

/// Process exit status for a completed command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    /// Finished, but reported invariant violations.
    Violations,
}

pub fn run(cli: &Cli, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<Status, CliError> {
    match &cli.command {
        Command::Ingest => {
            let summary = cmd_ingest(&cli.require_config()?, out)?;
            Ok(if summary.violation_count() == 0 { Status::Ok } else { Status::Violations })
        }
        Command::Embed => {
            let config = cli.require_config()?;
            let providers = Providers::build(&config, config.backend.unwrap_or(Backend::Mock))?;
            cmd_embed(&config, &providers, out)?;
            Ok(Status::Ok)
        }
        Command::Select { test_id, strategy, k, dataset } => {
            let config = cli.require_config()?;
            let providers = Providers::build(&config, config.backend.unwrap_or(Backend::Mock))?;
            cmd_select(&config, &providers, test_id, *strategy, *k, dataset.as_deref(), out)?;
            Ok(Status::Ok)
        }
        Command::Eval => {
            let config = cli.require_config()?;
            let providers = Providers::build(&config, config.backend.unwrap_or(Backend::Mock))?;
            cmd_eval(&config, &providers, out)?;
            Ok(Status::Ok)
        }
        Command::Induce { strategy, count } => {
            let config = cli.require_config()?;
            let providers = Providers::build(&config, config.backend.unwrap_or(Backend::Mock))?;
            cmd_induce(&config, &providers, *strategy, *count, out)?;
            Ok(Status::Ok)
        }
        Command::Grade => {
            let dir = cli.run_dir()?;
            let corpus = match cli.effective_config()? {
                Some(config) => load(&config.corpora.pool, config.task).ok(),
                None => None,
            };
            cmd_grade(&dir, corpus.as_ref(), input, out)?;
            Ok(Status::Ok)
        }
        Command::Report { format, grades } => {
            cmd_report(&cli.run_dir()?, &format.formats(), *grades, out)?;
            Ok(Status::Ok)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
task = "sentiment"
test_size = 500
strategies = ["random", "nearest", "nearest-class", "cds-random", "cds-nearest"]
ks = [4, 8, 12]

[corpora]
pool = "pool.jsonl"
datasets = [{ name = "ID", path = "pool.jsonl" }]
"#;

    #[test]
    fn defaults_fill_in() {
        let config = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(config.max_edit_ratio, 0.5);
        assert_eq!(config.eval.temperature, 0.0);
        assert_eq!(config.eval.max_tokens, 8);
        assert_eq!(config.induction.count, 100);
        assert_eq!(config.induction.k, 4);
        assert_eq!(config.induction.temperature, 1.0);
        assert_eq!(config.arrangement, ArrangePolicy::SelectionOrder);
    }

    #[test]
    fn all_problems_reported_together() {
        let text = MINIMAL.replace("test_size = 500", "test_size = 0").replace("ks = [4, 8, 12]", "ks = [3]");
        let config = RunConfig::from_toml(&text).unwrap();
        let problems = config.problems();
        assert!(problems.iter().any(|p| p.contains("pool corpus")));
        assert!(problems.iter().any(|p| p.contains("test_size")));
        assert!(problems.iter().any(|p| p.contains("even k")));
        assert!(problems.len() >= 4, "{problems:?}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = format!("{MINIMAL}\nbogus = 1\n");
        assert!(matches!(RunConfig::from_toml(&text), Err(CliError::Config(_))));
    }

    #[test]
    fn relative_paths_follow_config_file() {
        let mut config = RunConfig::from_toml(MINIMAL).unwrap();
        config.resolve_paths(Path::new("/data/run"));
        assert_eq!(config.corpora.pool, Path::new("/data/run/pool.jsonl"));
        assert_eq!(config.cache_path(), Path::new("/data/run/runs/default/embeddings.jsonl"));
    }

    #[test]
    fn cli_parses_global_flags_after_subcommand() {
        let cli = Cli::try_parse_from(["cdicl", "select", "--test-id", "x", "--strategy", "cds-random", "--k", "4", "--seed", "3"]).unwrap();
        assert_eq!(cli.seed, Some(3));
        assert!(matches!(cli.command, Command::Select { strategy: StrategyKind::CdsRandom, k: 4, .. }));
        assert!(Cli::try_parse_from(["cdicl", "select", "--test-id", "x", "--strategy", "bogus", "--k", "4"]).is_err());
    }
}

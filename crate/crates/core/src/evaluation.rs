//! Evaluation runs: the ICL accuracy grid and instruction-induction sweeps.
//!
//! Records are appended to line-delimited JSON as they complete, so an
//! interrupted run can resume: work whose key (dataset, strategy, k, test id,
//! prompt hash) is already on disk is not sent to the provider again. The
//! finished log is rewritten in sorted order, which makes its bytes
//! independent of scheduling and of interruptions.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Example, Label};
use crate::digest::derive_seed;
use crate::embeddings::EmbeddingStore;
use crate::gateway::{CompletionProvider, CompletionRequest, GatewayError};
use crate::prompting::{parse_label, render_icl, render_induction, ParsedLabel, PromptError, Verbalizer};
use crate::rng::{stream, SeededRng};
use crate::scalar::Scalar;
use crate::selection::{arrange, ArrangePolicy, PairScore, SelectionError, SelectionPool, Selector, StrategyKind, StrategySpec};

pub const EVAL_RECORDS_FILE: &str = "eval_records.jsonl";
pub const INSTRUCTION_RECORDS_FILE: &str = "instruction_records.jsonl";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{context}: {source}")]
    Selection { context: String, source: SelectionError },
    #[error("{context}: {source}")]
    Provider { context: String, source: GatewayError },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("no query embedding for test example {0:?}")]
    MissingQueryEmbedding(String),
    #[error("invalid run: {0}")]
    Invalid(String),
    #[error("accuracy of an empty record set is undefined")]
    EmptyRecords,
    #[error("no instruction record {0:?}")]
    UnknownRecord(String),
    #[error("instruction record {0:?} is already graded")]
    AlreadyGraded(String),
    #[error("instruction record {0:?} is not graded yet")]
    Ungraded(String),
    #[error("provider returned an empty instruction for {0:?}")]
    EmptyInstruction(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

fn io_error(path: &Path) -> impl Fn(std::io::Error) -> EvalError + '_ {
    move |e| EvalError::Io { path: path.to_path_buf(), message: e.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub test_id: String,
    pub dataset: String,
    pub strategy: StrategySpec,
    pub predicted: ParsedLabel,
    pub gold: Label,
    pub correct: bool,
    pub prompt_hash: String,
}

impl EvalRecord {
    pub fn new(test_id: String, dataset: String, strategy: StrategySpec, predicted: ParsedLabel, gold: Label, prompt_hash: String) -> Self {
        let correct = predicted.label() == Some(gold);
        Self { test_id, dataset, strategy, predicted, gold, correct, prompt_hash }
    }

    fn resume_key(&self) -> ResumeKey {
        (self.dataset.clone(), self.strategy.kind, self.strategy.k, self.test_id.clone(), self.prompt_hash.clone())
    }

    fn sort_key(&self) -> (&str, StrategyKind, usize, &str) {
        (&self.dataset, self.strategy.kind, self.strategy.k, &self.test_id)
    }
}

type ResumeKey = (String, StrategyKind, usize, String, String);

fn read_jsonl<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>, EvalError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = File::open(path).map_err(io_error(path))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_error(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| EvalError::Io {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", idx + 1),
        });
        match value {
            Ok(v) => out.push(v),
            // a run killed mid-write can leave a torn final line
            Err(e) if idx + 1 == count_lines(path)? => log::warn!("dropping torn last line: {e}"),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

fn count_lines(path: &Path) -> Result<usize, EvalError> {
    let text = fs::read_to_string(path).map_err(io_error(path))?;
    Ok(text.lines().count())
}

/// Write `lines` to `path` atomically.
fn write_jsonl<S: Serialize>(path: &Path, items: &[S]) -> Result<(), EvalError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_error(dir))?;
    }
    let mut text = String::new();
    for item in items {
        text.push_str(&serde_json::to_string(item).expect("record serializes"));
        text.push('\n');
    }
    let tmp = path.with_extension("jsonl.tmp");
    fs::write(&tmp, text).map_err(io_error(&tmp))?;
    fs::rename(&tmp, path).map_err(io_error(path))
}

/// Append-as-you-go log of evaluation records.
#[derive(Debug, Default)]
pub struct EvalLog {
    path: Option<PathBuf>,
    done: HashMap<ResumeKey, EvalRecord>,
}

impl EvalLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Open a log, loading whatever an earlier run completed.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, EvalError> {
        let path = path.into();
        let done = read_jsonl::<EvalRecord>(&path)?.into_iter().map(|r| (r.resume_key(), r)).collect();
        Ok(Self { path: Some(path), done })
    }

    pub fn completed(&self) -> usize {
        self.done.len()
    }

    fn lookup(&self, key: &ResumeKey) -> Option<&EvalRecord> {
        self.done.get(key)
    }

    fn append(&mut self, record: &EvalRecord) -> Result<(), EvalError> {
        if let Some(path) = &self.path {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(io_error(dir))?;
            }
            let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(io_error(path))?;
            let line = serde_json::to_string(record).expect("record serializes");
            writeln!(file, "{line}").map_err(io_error(path))?;
        }
        self.done.insert(record.resume_key(), record.clone());
        Ok(())
    }

    /// Rewrite the log in canonical order.
    fn finalize(&self, records: &[EvalRecord]) -> Result<(), EvalError> {
        match &self.path {
            Some(path) => write_jsonl(path, records),
            None => Ok(()),
        }
    }
}

pub fn read_eval_records(path: &Path) -> Result<Vec<EvalRecord>, EvalError> {
    read_jsonl(path)
}

/// Generation parameters for one kind of request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

/// One dataset's slice of an evaluation grid.
#[derive(Debug, Clone)]
pub struct EvalJob<'a, T> {
    pub dataset: String,
    pub pool: SelectionPool<'a>,
    pub pool_store: Option<&'a EmbeddingStore<T>>,
    pub tests: &'a [Example],
    /// Query vectors for the test examples, keyed by test id.
    pub test_store: Option<&'a EmbeddingStore<T>>,
    pub strategies: Vec<StrategyKind>,
    pub ks: Vec<usize>,
    pub seed: u64,
    pub arrange: ArrangePolicy,
    pub pair_score: PairScore,
    pub decoding: Decoding,
    pub workers: usize,
}

/// Seed for one (dataset, strategy, k, test) selection.
pub fn selection_seed(run_seed: u64, dataset: &str, kind: StrategyKind, k: usize, test_id: &str) -> u64 {
    derive_seed(run_seed, &["select", dataset, kind.as_str(), &k.to_string(), test_id])
}

struct Task<'a> {
    spec: StrategySpec,
    test: &'a Example,
}

/// Run every (test, strategy, k) combination of `job` through
/// select, arrange, render, complete and parse.
pub fn run_icl_eval<T: Scalar>(
    job: &EvalJob<'_, T>,
    provider: &dyn CompletionProvider,
    log: &mut EvalLog,
) -> Result<Vec<EvalRecord>, EvalError> {
    let task_kind = job.pool.corpus().task_kind();
    if let Some(bad) = job.tests.iter().find(|t| t.task_kind() != task_kind) {
        return Err(EvalError::Invalid(format!("test {} is not a {task_kind} example", bad.id)));
    }
    let mut tasks = Vec::with_capacity(job.tests.len() * job.strategies.len() * job.ks.len());
    for &kind in &job.strategies {
        for &k in &job.ks {
            for test in job.tests {
                let seed = selection_seed(job.seed, &job.dataset, kind, k, &test.id);
                let spec = StrategySpec::new(kind, k, seed).map_err(|source| EvalError::Selection {
                    context: format!("{}/{kind}/k={k}", job.dataset),
                    source,
                })?;
                tasks.push(Task { spec, test });
            }
        }
    }

    let selector = Selector { pool: job.pool, store: job.pool_store, pair_score: job.pair_score };
    let verbalizer = Verbalizer::for_task(task_kind);
    let results: Vec<Mutex<Option<EvalRecord>>> = tasks.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let first_error: Mutex<Option<EvalError>> = Mutex::new(None);
    let shared_log = Mutex::new(&mut *log);

    let run_one = |task: &Task<'_>| -> Result<EvalRecord, EvalError> {
        let context = || format!("{}/{}/k={}/{}", job.dataset, task.spec.kind, task.spec.k, task.test.id);
        let query = match (task.spec.kind.uses_embeddings(), job.test_store) {
            (false, _) => None,
            (true, Some(store)) => {
                Some(store.get(&task.test.id).ok_or_else(|| EvalError::MissingQueryEmbedding(task.test.id.clone()))?)
            }
            (true, None) => return Err(EvalError::MissingQueryEmbedding(task.test.id.clone())),
        };
        let set = selector
            .select(&task.spec, task.test, query)
            .map_err(|source| EvalError::Selection { context: context(), source })?;
        let set = arrange(&set, job.arrange);
        let prompt = render_icl(&set.demos, task.test)?;
        let key = (job.dataset.clone(), task.spec.kind, task.spec.k, task.test.id.clone(), prompt.content_hash.clone());
        if let Some(done) = shared_log.lock().expect("log lock").lookup(&key) {
            return Ok(done.clone());
        }
        let request = CompletionRequest::new(
            job.decoding.model.clone(),
            prompt.text,
            job.decoding.temperature,
            job.decoding.max_tokens,
        )
        .map_err(|source| EvalError::Provider { context: context(), source })?;
        let completion = provider.complete(&request).map_err(|source| EvalError::Provider { context: context(), source })?;
        let record = EvalRecord::new(
            task.test.id.clone(),
            job.dataset.clone(),
            task.spec,
            parse_label(&completion, &verbalizer),
            task.test.label,
            prompt.content_hash,
        );
        shared_log.lock().expect("log lock").append(&record)?;
        Ok(record)
    };

    let worker = || loop {
        if failed.load(Ordering::SeqCst) {
            return;
        }
        let idx = next.fetch_add(1, Ordering::SeqCst);
        let Some(task) = tasks.get(idx) else { return };
        match run_one(task) {
            Ok(record) => *results[idx].lock().expect("result lock") = Some(record),
            Err(e) => {
                failed.store(true, Ordering::SeqCst);
                first_error.lock().expect("error lock").get_or_insert(e);
                return;
            }
        }
    };

    let workers = job.workers.clamp(1, tasks.len().max(1));
    if workers == 1 {
        worker();
    } else {
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(worker);
            }
        });
    }

    if let Some(e) = first_error.into_inner().expect("error lock") {
        return Err(e);
    }
    let mut records: Vec<EvalRecord> = results
        .into_iter()
        .map(|slot| slot.into_inner().expect("result lock").expect("every task finished"))
        .collect();
    records.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    Ok(records)
}

/// Persist the final, sorted record set of a completed run.
pub fn finalize_eval_log(log: &EvalLog, records: &[EvalRecord]) -> Result<(), EvalError> {
    log.finalize(records)
}

/// Fraction correct; unparseable predictions count as wrong.
pub fn accuracy<'r>(records: impl IntoIterator<Item = &'r EvalRecord>) -> Result<f64, EvalError> {
    let (correct, total) = records
        .into_iter()
        .fold((0usize, 0usize), |(c, t), r| (c + usize::from(r.correct), t + 1));
    if total == 0 {
        return Err(EvalError::EmptyRecords);
    }
    Ok(correct as f64 / total as f64)
}

/// Position of a cell relative to the baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    /// below the baseline
    Degraded,
    /// at most one point above
    Marginal,
    /// more than one point above
    Improved,
}

impl Band {
    pub fn of(delta: f64) -> Band {
        if delta < 0.0 {
            Band::Degraded
        } else if delta <= 1.0 {
            Band::Marginal
        } else {
            Band::Improved
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Band::Degraded => "degraded",
            Band::Marginal => "marginal",
            Band::Improved => "improved",
        }
    }

    pub fn marker(self) -> &'static str {
        match self {
            Band::Degraded => "▼",
            Band::Marginal => "≈",
            Band::Improved => "▲",
        }
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Difference in percentage points, rounded to one decimal, and its band.
pub fn delta_band(cell_acc: f64, baseline_acc: f64) -> (f64, Band) {
    let delta = ((cell_acc - baseline_acc) * 1000.0).round() / 10.0;
    // -0.0 would otherwise print as "-0.0"
    let delta = if delta == 0.0 { 0.0 } else { delta };
    (delta, Band::of(delta))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub strategy: StrategyKind,
    pub k: usize,
    pub dataset: String,
}

impl CellKey {
    pub fn new(strategy: StrategyKind, k: usize, dataset: impl Into<String>) -> Self {
        Self { strategy, k, dataset: dataset.into() }
    }
}

/// Accuracy grid with deltas and bands against a baseline strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub baseline: StrategyKind,
    /// Column order of datasets.
    pub datasets: Vec<String>,
    pub grid: BTreeMap<CellKey, f64>,
    pub deltas: BTreeMap<CellKey, f64>,
    pub bands: BTreeMap<CellKey, Band>,
}

impl RunReport {
    pub fn from_grid(baseline: StrategyKind, datasets: Vec<String>, grid: BTreeMap<CellKey, f64>) -> Self {
        let mut deltas = BTreeMap::new();
        let mut bands = BTreeMap::new();
        for (key, &acc) in &grid {
            if key.strategy == baseline {
                continue;
            }
            let base_key = CellKey { strategy: baseline, ..key.clone() };
            if let Some(&base) = grid.get(&base_key) {
                let (delta, band) = delta_band(acc, base);
                deltas.insert(key.clone(), delta);
                bands.insert(key.clone(), band);
            }
        }
        let mut datasets = datasets;
        for key in grid.keys() {
            if !datasets.contains(&key.dataset) {
                datasets.push(key.dataset.clone());
            }
        }
        Self { baseline, datasets, grid, deltas, bands }
    }

    /// Accuracy per (strategy, k, dataset) from evaluation records.
    pub fn from_records(baseline: StrategyKind, datasets: Vec<String>, records: &[EvalRecord]) -> Self {
        let mut groups: BTreeMap<CellKey, Vec<&EvalRecord>> = BTreeMap::new();
        for r in records {
            groups.entry(CellKey::new(r.strategy.kind, r.strategy.k, r.dataset.clone())).or_default().push(r);
        }
        let grid = groups
            .into_iter()
            .map(|(key, rs)| {
                let acc = accuracy(rs.iter().copied()).expect("group is non-empty");
                (key, acc)
            })
            .collect();
        Self::from_grid(baseline, datasets, grid)
    }

    fn strategies(&self) -> Vec<StrategyKind> {
        let mut out: Vec<StrategyKind> = self.grid.keys().map(|k| k.strategy).collect();
        out.sort();
        out.dedup();
        out
    }

    fn ks(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.grid.keys().map(|k| k.k).collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    fn columns(&self) -> Vec<(usize, String)> {
        let ks = self.ks();
        let mut cols = Vec::new();
        for k in ks {
            for d in &self.datasets {
                if self.grid.keys().any(|key| key.k == k && &key.dataset == d) {
                    cols.push((k, d.clone()));
                }
            }
        }
        cols
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Markdown => "md",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(format!("unknown report format {other:?} (expected csv or markdown)")),
        }
    }
}

fn csv_document(header: &[&str], rows: Vec<Vec<String>>) -> String {
    let mut writer = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    writer.write_record(header).expect("in-memory csv");
    for row in rows {
        writer.write_record(&row).expect("in-memory csv");
    }
    String::from_utf8(writer.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}

fn markdown_row(cells: &[String]) -> String {
    format!("| {} |\n", cells.join(" | "))
}

/// Render the grid: strategies as rows, (k, dataset) as columns.
pub fn render_report(report: &RunReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => {
            let mut rows = Vec::new();
            for strategy in report.strategies() {
                for (k, dataset) in report.columns() {
                    let key = CellKey::new(strategy, k, dataset.clone());
                    let Some(acc) = report.grid.get(&key) else { continue };
                    let delta = report.deltas.get(&key).map(|d| format!("{d:.1}")).unwrap_or_default();
                    let band = report.bands.get(&key).map(|b| b.as_str().to_string()).unwrap_or_default();
                    rows.push(vec![strategy.as_str().to_string(), k.to_string(), dataset, acc.to_string(), delta, band]);
                }
            }
            csv_document(&["strategy", "k", "dataset", "accuracy", "delta", "band"], rows)
        }
        ReportFormat::Markdown => {
            let columns = report.columns();
            let mut header = vec!["Strategy".to_string()];
            header.extend(columns.iter().map(|(k, d)| format!("{k}-shot {d}")));
            let mut out = markdown_row(&header);
            out.push_str(&markdown_row(&vec!["---".to_string(); header.len()]));
            for strategy in report.strategies() {
                let mut cells = vec![strategy.as_str().to_string()];
                for (k, dataset) in &columns {
                    let key = CellKey::new(strategy, *k, dataset.clone());
                    let cell = match (report.grid.get(&key), report.deltas.get(&key), report.bands.get(&key)) {
                        (Some(acc), Some(delta), Some(band)) => format!("{:.1} ({delta:+.1}% {})", acc * 100.0, band.marker()),
                        (Some(acc), _, _) => format!("{:.1}", acc * 100.0),
                        _ => "-".to_string(),
                    };
                    cells.push(cell);
                }
                out.push_str(&markdown_row(&cells));
            }
            out
        }
    }
}

/// Manual quality categories for induced instructions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grade {
    Satisfying,
    Acceptable,
    Invalid,
}

impl Grade {
    pub const ALL: [Grade; 3] = [Grade::Satisfying, Grade::Acceptable, Grade::Invalid];

    pub fn as_str(self) -> &'static str {
        match self {
            Grade::Satisfying => "satisfying",
            Grade::Acceptable => "acceptable",
            Grade::Invalid => "invalid",
        }
    }

    /// Guidance shown to the grader.
    pub fn definition(self) -> &'static str {
        match self {
            Grade::Satisfying => {
                "correct: someone could do the task from this instruction alone, on any dataset of the task"
            }
            Grade::Acceptable => {
                "usable but flawed: extra or overly specific wording; works zero-shot here, would not carry over to other datasets"
            }
            Grade::Invalid => "wrong: the instruction misses what the task is; nobody could do the task from it",
        }
    }

    pub fn key(self) -> char {
        match self {
            Grade::Satisfying => '1',
            Grade::Acceptable => '2',
            Grade::Invalid => '3',
        }
    }
}

impl fmt::Display for Grade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub id: String,
    pub strategy: String,
    pub demo_ids: Vec<String>,
    pub instruction_text: String,
    #[serde(default)]
    pub grade: Option<Grade>,
}

/// Instruction records backed by a JSONL file; every change is persisted.
#[derive(Debug, Default)]
pub struct InstructionStore {
    path: Option<PathBuf>,
    records: Vec<InstructionRecord>,
}

impl InstructionStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: impl Into<PathBuf>) -> Result<Self, EvalError> {
        let path = path.into();
        let records = read_jsonl(&path)?;
        Ok(Self { path: Some(path), records })
    }

    pub fn records(&self) -> &[InstructionRecord] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&InstructionRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn first_ungraded(&self) -> Option<&InstructionRecord> {
        self.records.iter().find(|r| r.grade.is_none())
    }

    fn save(&self) -> Result<(), EvalError> {
        match &self.path {
            Some(path) => write_jsonl(path, &self.records),
            None => Ok(()),
        }
    }

    fn push(&mut self, record: InstructionRecord) -> Result<(), EvalError> {
        self.records.push(record);
        self.save()
    }

    /// Assign a grade once; regrading is rejected.
    pub fn record_grade(&mut self, id: &str, grade: Grade) -> Result<&InstructionRecord, EvalError> {
        let idx = self.records.iter().position(|r| r.id == id).ok_or_else(|| EvalError::UnknownRecord(id.to_string()))?;
        if self.records[idx].grade.is_some() {
            return Err(EvalError::AlreadyGraded(id.to_string()));
        }
        self.records[idx].grade = Some(grade);
        self.save()?;
        Ok(&self.records[idx])
    }
}

pub fn record_grade<'s>(store: &'s mut InstructionStore, record_id: &str, grade: Grade) -> Result<&'s InstructionRecord, EvalError> {
    store.record_grade(record_id, grade)
}

/// Generate `count` instructions, each from an independent demonstration draw.
///
/// Similarity strategies anchor each draw on a distinct corpus example and
/// select demonstrations around it (the anchor itself is excluded). Records
/// already present in `store` are kept as they are.
#[allow(clippy::too_many_arguments)]
pub fn run_induction<T: Scalar>(
    corpus: &Corpus,
    spec: &StrategySpec,
    count: usize,
    provider: &dyn CompletionProvider,
    seed: u64,
    embeddings: Option<&EmbeddingStore<T>>,
    decoding: &Decoding,
    store: &mut InstructionStore,
) -> Result<Vec<InstructionRecord>, EvalError> {
    if count == 0 {
        return Err(EvalError::Invalid("instruction count must be at least 1".into()));
    }
    spec.validate().map_err(|source| EvalError::Selection { context: "induction".into(), source })?;
    if !matches!(spec.kind, StrategyKind::Random | StrategyKind::Nearest | StrategyKind::CdsRandom) {
        log::warn!("strategy {} is an extension for instruction induction", spec.kind);
    }
    let anchors: Vec<&Example> = if spec.kind.uses_embeddings() {
        if count > corpus.len() {
            return Err(EvalError::Invalid(format!("{count} distinct anchors requested from {} examples", corpus.len())));
        }
        let all: Vec<&Example> = corpus.examples().collect();
        SeededRng::new(seed, stream::INDUCTION_ANCHOR)
            .sample_indices(all.len(), count)
            .into_iter()
            .map(|i| all[i])
            .collect()
    } else {
        Vec::new()
    };

    let selector = Selector { pool: SelectionPool::whole(corpus), store: embeddings, pair_score: PairScore::Max };
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let id = format!("{}-{:04}", spec.kind, i + 1);
        if let Some(existing) = store.get(&id) {
            out.push(existing.clone());
            continue;
        }
        let draw = StrategySpec { seed: derive_seed(seed, &["induce", spec.kind.as_str(), &i.to_string()]), ..*spec };
        let context = || format!("induction {id}");
        let set = match anchors.get(i) {
            Some(anchor) => {
                let query = embeddings
                    .and_then(|s| s.get(&anchor.id))
                    .ok_or_else(|| EvalError::MissingQueryEmbedding(anchor.id.clone()))?;
                selector.select(&draw, anchor, Some(query))
            }
            None => {
                let placeholder = crate::corpus::Example { id: id.clone(), ..corpus.examples().next().cloned().ok_or_else(|| EvalError::Invalid("empty corpus".into()))? };
                selector.select(&draw, &placeholder, None)
            }
        }
        .map_err(|source| EvalError::Selection { context: context(), source })?;
        let prompt = render_induction(&set.demos)?;
        let request = CompletionRequest::new(decoding.model.clone(), prompt.text, decoding.temperature, decoding.max_tokens)
            .map_err(|source| EvalError::Provider { context: context(), source })?;
        let text = provider.complete(&request).map_err(|source| EvalError::Provider { context: context(), source })?;
        if text.trim().is_empty() {
            return Err(EvalError::EmptyInstruction(id));
        }
        let record = InstructionRecord {
            id,
            strategy: spec.kind.as_str().to_string(),
            demo_ids: prompt.demo_ids,
            instruction_text: text,
            grade: None,
        };
        store.push(record.clone())?;
        out.push(record);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradeDistribution {
    pub strategy: String,
    pub counts: BTreeMap<Grade, usize>,
    pub total: usize,
    pub percentages: BTreeMap<Grade, f64>,
}

/// Per-strategy counts and percentages of each grade.
pub fn aggregate_grades(records: &[InstructionRecord]) -> Result<Vec<GradeDistribution>, EvalError> {
    let mut by_strategy: BTreeMap<(usize, String), BTreeMap<Grade, usize>> = BTreeMap::new();
    for r in records {
        let grade = r.grade.ok_or_else(|| EvalError::Ungraded(r.id.clone()))?;
        let rank = r.strategy.parse::<StrategyKind>().map(|k| k as usize).unwrap_or(usize::MAX);
        let counts = by_strategy.entry((rank, r.strategy.clone())).or_insert_with(|| Grade::ALL.iter().map(|g| (*g, 0)).collect());
        *counts.get_mut(&grade).expect("all grades present") += 1;
    }
    Ok(by_strategy
        .into_iter()
        .map(|((_, strategy), counts)| {
            let total: usize = counts.values().sum();
            let percentages = counts.iter().map(|(g, &n)| (*g, n as f64 * 100.0 / total as f64)).collect();
            GradeDistribution { strategy, counts, total, percentages }
        })
        .collect())
}

pub fn render_grade_report(rows: &[GradeDistribution], format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => {
            let mut out = Vec::new();
            for row in rows {
                for grade in Grade::ALL {
                    out.push(vec![
                        row.strategy.clone(),
                        grade.as_str().to_string(),
                        row.counts[&grade].to_string(),
                        row.percentages[&grade].to_string(),
                    ]);
                }
            }
            csv_document(&["strategy", "grade", "count", "percentage"], out)
        }
        ReportFormat::Markdown => {
            let mut header = vec!["Strategy".to_string()];
            header.extend(Grade::ALL.iter().map(|g| g.as_str().to_string()));
            header.push("total".into());
            let mut out = markdown_row(&header);
            out.push_str(&markdown_row(&vec!["---".to_string(); header.len()]));
            for row in rows {
                let mut cells = vec![row.strategy.clone()];
                for grade in Grade::ALL {
                    cells.push(format!("{} ({:.1}%)", row.counts[&grade], row.percentages[&grade]));
                }
                cells.push(row.total.to_string());
                out.push_str(&markdown_row(&cells));
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(correct: bool) -> EvalRecord {
        let spec = StrategySpec::new(StrategyKind::Random, 4, 0).unwrap();
        let predicted = if correct { ParsedLabel::Label(Label::Positive) } else { ParsedLabel::Label(Label::Negative) };
        EvalRecord::new("t".into(), "d".into(), spec, predicted, Label::Positive, "h".into())
    }

    #[test]
    fn accuracy_counts() {
        let mut rs: Vec<EvalRecord> = (0..250).map(|_| record(true)).collect();
        rs.extend((0..250).map(|_| record(false)));
        assert_eq!(accuracy(&rs).unwrap(), 0.5);
        let all: Vec<EvalRecord> = (0..10).map(|_| record(true)).collect();
        assert_eq!(accuracy(&all).unwrap(), 1.0);
        let mut records: Vec<EvalRecord> = (0..467).map(|_| record(true)).collect();
        records.extend((0..33).map(|_| record(false)));
        assert_eq!(accuracy(&records).unwrap(), 0.934);
        assert!(matches!(accuracy(&[]), Err(EvalError::EmptyRecords)));
    }

    #[test]
    fn unparseable_is_incorrect() {
        let spec = StrategySpec::new(StrategyKind::Random, 4, 0).unwrap();
        let r = EvalRecord::new("t".into(), "d".into(), spec, ParsedLabel::Unparseable("?".into()), Label::Positive, "h".into());
        assert!(!r.correct);
    }

    #[test]
    fn delta_band_examples() {
        assert_eq!(delta_band(0.900, 0.868), (3.2, Band::Improved));
        assert_eq!(delta_band(0.904, 0.932), (-2.8, Band::Degraded));
        assert_eq!(delta_band(0.910, 0.910), (0.0, Band::Marginal));
        assert_eq!(delta_band(0.910, 0.910).0.to_string(), "0");
        assert_eq!(delta_band(0.960, 0.950), (1.0, Band::Marginal));
        assert_eq!(delta_band(0.9611, 0.950), (1.1, Band::Improved));
    }

    #[test]
    fn band_is_exhaustive() {
        for tenths in -1000..=1000 {
            let delta = tenths as f64 / 10.0;
            let band = Band::of(delta);
            let expected = if delta < 0.0 {
                Band::Degraded
            } else if delta > 1.0 {
                Band::Improved
            } else {
                Band::Marginal
            };
            assert_eq!(band, expected, "{delta}");
        }
    }

    #[test]
    fn empty_report_has_headers_only() {
        let report = RunReport::from_grid(StrategyKind::Random, vec![], BTreeMap::new());
        assert_eq!(render_report(&report, ReportFormat::Csv), "strategy,k,dataset,accuracy,delta,band\n");
        assert_eq!(render_report(&report, ReportFormat::Markdown), "| Strategy |\n| --- |\n");
    }

    #[test]
    fn small_report_layout() {
        let mut grid = BTreeMap::new();
        grid.insert(CellKey::new(StrategyKind::Random, 4, "ID"), 0.934);
        grid.insert(CellKey::new(StrategyKind::Nearest, 4, "ID"), 0.952);
        grid.insert(CellKey::new(StrategyKind::Random, 4, "yelp"), 0.932);
        grid.insert(CellKey::new(StrategyKind::Nearest, 4, "yelp"), 0.904);
        let report = RunReport::from_grid(StrategyKind::Random, vec!["ID".into(), "yelp".into()], grid);
        let md = render_report(&report, ReportFormat::Markdown);
        assert_eq!(
            md,
            "| Strategy | 4-shot ID | 4-shot yelp |\n\
             | --- | --- | --- |\n\
             | random | 93.4 | 93.2 |\n\
             | nearest | 95.2 (+1.8% ▲) | 90.4 (-2.8% ▼) |\n"
        );
        let csv = render_report(&report, ReportFormat::Csv);
        assert_eq!(
            csv,
            "strategy,k,dataset,accuracy,delta,band\n\
             random,4,ID,0.934,,\n\
             random,4,yelp,0.932,,\n\
             nearest,4,ID,0.952,1.8,improved\n\
             nearest,4,yelp,0.904,-2.8,degraded\n"
        );
        assert_eq!(render_report(&report, ReportFormat::Csv), csv);
    }

    fn instruction(id: &str, strategy: &str, grade: Option<Grade>) -> InstructionRecord {
        InstructionRecord {
            id: id.into(),
            strategy: strategy.into(),
            demo_ids: vec!["a".into()],
            instruction_text: "x".into(),
            grade,
        }
    }

    #[test]
    fn grading_once_only() {
        let mut store = InstructionStore::in_memory();
        store.push(instruction("r1", "random", None)).unwrap();
        assert_eq!(store.record_grade("r1", Grade::Satisfying).unwrap().grade, Some(Grade::Satisfying));
        assert!(matches!(store.record_grade("r1", Grade::Invalid), Err(EvalError::AlreadyGraded(_))));
        assert!(matches!(store.record_grade("nope", Grade::Invalid), Err(EvalError::UnknownRecord(_))));
    }

    #[test]
    fn grade_aggregation() {
        let mut records = Vec::new();
        for i in 0..100 {
            let g = if i < 60 { Grade::Satisfying } else if i < 90 { Grade::Acceptable } else { Grade::Invalid };
            records.push(instruction(&format!("a{i}"), "cds-random", Some(g)));
        }
        for i in 0..7 {
            records.push(instruction(&format!("b{i}"), "random", Some(Grade::Invalid)));
        }
        let agg = aggregate_grades(&records).unwrap();
        assert_eq!(agg.len(), 2);
        assert_eq!(agg[0].strategy, "random");
        assert_eq!(agg[0].total, 7);
        assert_eq!(agg[0].percentages[&Grade::Invalid], 100.0);
        let cds = &agg[1];
        assert_eq!(cds.total, 100);
        assert_eq!(
            Grade::ALL.map(|g| cds.percentages[&g]),
            [60.0, 30.0, 10.0]
        );

        records.push(instruction("c", "random", None));
        assert!(matches!(aggregate_grades(&records), Err(EvalError::Ungraded(_))));
    }

    #[test]
    fn thirds_sum_to_hundred() {
        let records: Vec<_> = (0..3)
            .map(|i| instruction(&i.to_string(), "nearest", Some(Grade::ALL[i])))
            .collect();
        let agg = aggregate_grades(&records).unwrap();
        let sum: f64 = agg[0].percentages.values().sum();
        assert!((sum - 100.0).abs() <= 0.1);
        let md = render_grade_report(&agg, ReportFormat::Markdown);
        assert!(md.contains("| nearest | 1 (33.3%) | 1 (33.3%) | 1 (33.3%) | 3 |"));
    }
}

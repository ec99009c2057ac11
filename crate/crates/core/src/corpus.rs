//! Labeled corpora and counterfactual pairs.
//!
//! A corpus file holds one JSON object per line:
//!
//! ```text
//! {"id": "p1-o", "text": "a great film", "label": "positive", "pair_id": "p1", "cd_role": "original"}
//! {"id": "n1", "premise": "...", "hypothesis": "...", "label": "neutral"}
//! ```
//!
//! Examples sharing a `pair_id` are assembled into a [`CadPair`]. Pair
//! conformance (label flip, edit size) is reported by [`validate_pairs`]
//! rather than rejected at load time, so broken pairs can be inspected.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{stream, SeededRng};

/// Pairs whose edit ratio exceeds this are not considered minimal edits.
pub const DEFAULT_MAX_EDIT_RATIO: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate example id {0:?}")]
    DuplicateId(String),
    #[error("record {id:?}: unknown label {label:?} for {task} task")]
    UnknownLabel { id: String, label: String, task: TaskKind },
    #[error("record {id:?}: content does not match {task} task")]
    ContentMismatch { id: String, task: TaskKind },
    #[error("record {id:?}: empty {field}")]
    EmptyText { id: String, field: &'static str },
    #[error("record {id:?}: pair_id and cd_role must be given together")]
    PairRoleMismatch { id: String },
    #[error("pair {0:?} has only one member")]
    DanglingPair(String),
    #[error("pair {pair_id:?}: {message}")]
    BadPair { pair_id: String, message: String },
    #[error("edit distance of two empty sequences is undefined")]
    EmptySequences,
    #[error("cannot sample {requested} examples from a corpus of {available}")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for CorpusError {
    fn from(err: std::io::Error) -> Self {
        CorpusError::Io(err.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Sentiment,
    Nli,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Sentiment => "sentiment",
            TaskKind::Nli => "nli",
        }
    }

    /// The task's label set in canonical order.
    pub fn labels(self) -> &'static [Label] {
        match self {
            TaskKind::Sentiment => &[Label::Positive, Label::Negative],
            TaskKind::Nli => &[Label::Entailment, Label::Neutral, Label::Contradiction],
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sentiment" => Ok(TaskKind::Sentiment),
            "nli" => Ok(TaskKind::Nli),
            other => Err(format!("unknown task kind {other:?} (expected sentiment or nli)")),
        }
    }
}

/// A task label. Only the five labels of the two supported tasks exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
    Entailment,
    Neutral,
    Contradiction,
}

impl Label {
    pub fn task_kind(self) -> TaskKind {
        match self {
            Label::Positive | Label::Negative => TaskKind::Sentiment,
            Label::Entailment | Label::Neutral | Label::Contradiction => TaskKind::Nli,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Positive => "positive",
            Label::Negative => "negative",
            Label::Entailment => "entailment",
            Label::Neutral => "neutral",
            Label::Contradiction => "contradiction",
        }
    }

    /// Parse a label string within a task's label set.
    pub fn parse_for(task: TaskKind, s: &str) -> Option<Label> {
        task.labels().iter().copied().find(|l| l.as_str() == s)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Content {
    Text { text: String },
    Pair { premise: String, hypothesis: String },
}

impl Content {
    pub fn task_kind(&self) -> TaskKind {
        match self {
            Content::Text { .. } => TaskKind::Sentiment,
            Content::Pair { .. } => TaskKind::Nli,
        }
    }

    /// Single-string form used for embedding and edit distance: the text
    /// itself, or premise and hypothesis joined by one space.
    pub fn joined(&self) -> String {
        match self {
            Content::Text { text } => text.clone(),
            Content::Pair { premise, hypothesis } => format!("{premise} {hypothesis}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CdRole {
    Original,
    Counterfactual,
    #[default]
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub content: Content,
    pub label: Label,
    pub source: String,
    pub pair_id: Option<String>,
    pub cd_role: CdRole,
}

impl Example {
    pub fn task_kind(&self) -> TaskKind {
        self.label.task_kind()
    }

    pub fn joined_text(&self) -> String {
        self.content.joined()
    }

    /// Check the per-example invariants.
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.content.task_kind() != self.label.task_kind() {
            return Err(CorpusError::ContentMismatch {
                id: self.id.clone(),
                task: self.label.task_kind(),
            });
        }
        let fields: Vec<(&'static str, &str)> = match &self.content {
            Content::Text { text } => vec![("text", text)],
            Content::Pair { premise, hypothesis } => {
                vec![("premise", premise), ("hypothesis", hypothesis)]
            }
        };
        for (field, value) in fields {
            if value.trim().is_empty() {
                return Err(CorpusError::EmptyText { id: self.id.clone(), field });
            }
        }
        if self.pair_id.is_some() != (self.cd_role != CdRole::None) {
            return Err(CorpusError::PairRoleMismatch { id: self.id.clone() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CadPair {
    pub pair_id: String,
    pub original: Example,
    pub counterfactual: Example,
    pub edit_ratio: f64,
}

impl CadPair {
    fn assemble(pair_id: &str, original: Example, counterfactual: Example) -> Result<Self, CorpusError> {
        let a = original.joined_text();
        let b = counterfactual.joined_text();
        let edit_ratio = normalized_edit_distance(&tokenize(&a), &tokenize(&b))?;
        Ok(Self {
            pair_id: pair_id.to_string(),
            original,
            counterfactual,
            edit_ratio,
        })
    }

    pub fn labels_flipped(&self) -> bool {
        self.original.label != self.counterfactual.label
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    task_kind: TaskKind,
    examples: IndexMap<String, Example>,
    pairs: IndexMap<String, CadPair>,
}

impl Corpus {
    /// Build a corpus from examples, checking every invariant and assembling pairs.
    pub fn from_examples(task_kind: TaskKind, examples: Vec<Example>) -> Result<Self, CorpusError> {
        let mut by_id = IndexMap::with_capacity(examples.len());
        let mut members: IndexMap<String, Vec<String>> = IndexMap::new();
        for ex in examples {
            ex.validate()?;
            if ex.task_kind() != task_kind {
                return Err(CorpusError::ContentMismatch { id: ex.id.clone(), task: task_kind });
            }
            if let Some(pid) = &ex.pair_id {
                members.entry(pid.clone()).or_default().push(ex.id.clone());
            }
            if by_id.contains_key(&ex.id) {
                return Err(CorpusError::DuplicateId(ex.id));
            }
            by_id.insert(ex.id.clone(), ex);
        }

        let mut pairs = IndexMap::with_capacity(members.len());
        for (pair_id, ids) in members {
            if ids.len() == 1 {
                return Err(CorpusError::DanglingPair(pair_id));
            }
            if ids.len() > 2 {
                return Err(CorpusError::BadPair {
                    pair_id,
                    message: format!("{} members, expected 2", ids.len()),
                });
            }
            let first = &by_id[&ids[0]];
            let second = &by_id[&ids[1]];
            let (original, counterfactual) = match (first.cd_role, second.cd_role) {
                (CdRole::Original, CdRole::Counterfactual) => (first, second),
                (CdRole::Counterfactual, CdRole::Original) => (second, first),
                _ => {
                    return Err(CorpusError::BadPair {
                        pair_id,
                        message: "needs exactly one original and one counterfactual".into(),
                    })
                }
            };
            let pair = CadPair::assemble(&pair_id, original.clone(), counterfactual.clone())?;
            pairs.insert(pair_id, pair);
        }

        Ok(Self { task_kind, examples: by_id, pairs })
    }

    pub fn task_kind(&self) -> TaskKind {
        self.task_kind
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.examples.get(id)
    }

    /// Examples in file order.
    pub fn examples(&self) -> impl Iterator<Item = &Example> {
        self.examples.values()
    }

    /// Pairs in order of first appearance.
    pub fn pairs(&self) -> impl Iterator<Item = &CadPair> {
        self.pairs.values()
    }

    pub fn pair(&self, pair_id: &str) -> Option<&CadPair> {
        self.pairs.get(pair_id)
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.len()
    }

    /// Serialize in the line-delimited record format accepted by [`parse_corpus`].
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for ex in self.examples.values() {
            let record = RawRecord::from_example(ex);
            out.push_str(&serde_json::to_string(&record).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

/// On-disk record. Unknown fields land in `extra` and are reported.
#[derive(Debug, Serialize, Deserialize)]
struct RawRecord {
    id: String,
    label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    premise: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hypothesis: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pair_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cd_role: Option<RawRole>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<String>,
    #[serde(flatten, skip_serializing)]
    extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum RawRole {
    Original,
    Counterfactual,
}

impl RawRecord {
    fn from_example(ex: &Example) -> Self {
        let (text, premise, hypothesis) = match &ex.content {
            Content::Text { text } => (Some(text.clone()), None, None),
            Content::Pair { premise, hypothesis } => (None, Some(premise.clone()), Some(hypothesis.clone())),
        };
        Self {
            id: ex.id.clone(),
            label: ex.label.as_str().to_string(),
            text,
            premise,
            hypothesis,
            pair_id: ex.pair_id.clone(),
            cd_role: match ex.cd_role {
                CdRole::Original => Some(RawRole::Original),
                CdRole::Counterfactual => Some(RawRole::Counterfactual),
                CdRole::None => None,
            },
            source: Some(ex.source.clone()),
            extra: BTreeMap::new(),
        }
    }

    fn into_example(self, task: TaskKind, default_source: &str) -> Result<Example, CorpusError> {
        let label = Label::parse_for(task, &self.label).ok_or_else(|| CorpusError::UnknownLabel {
            id: self.id.clone(),
            label: self.label.clone(),
            task,
        })?;
        let content = match (task, self.text, self.premise, self.hypothesis) {
            (TaskKind::Sentiment, Some(text), None, None) => Content::Text { text: normalize_text(&text) },
            (TaskKind::Nli, None, Some(p), Some(h)) => Content::Pair {
                premise: normalize_text(&p),
                hypothesis: normalize_text(&h),
            },
            _ => return Err(CorpusError::ContentMismatch { id: self.id, task }),
        };
        let cd_role = match self.cd_role {
            Some(RawRole::Original) => CdRole::Original,
            Some(RawRole::Counterfactual) => CdRole::Counterfactual,
            None => CdRole::None,
        };
        let ex = Example {
            id: self.id,
            content,
            label,
            source: self.source.unwrap_or_else(|| default_source.to_string()),
            pair_id: self.pair_id,
            cd_role,
        };
        ex.validate()?;
        Ok(ex)
    }
}

/// Replace every whitespace run containing a line break with a single space.
pub fn normalize_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut run = String::new();
    let mut run_has_break = false;
    for ch in text.chars() {
        if ch.is_whitespace() {
            run_has_break |= ch == '\n' || ch == '\r';
            run.push(ch);
            continue;
        }
        if !run.is_empty() {
            if run_has_break {
                out.push(' ');
            } else {
                out.push_str(&run);
            }
            run.clear();
            run_has_break = false;
        }
        out.push(ch);
    }
    if !run.is_empty() {
        if run_has_break {
            out.push(' ');
        } else {
            out.push_str(&run);
        }
    }
    out
}

/// Parse a corpus from line-delimited JSON records.
pub fn parse_corpus<R: Read>(reader: R, task_kind: TaskKind, source: &str) -> Result<Corpus, CorpusError> {
    let reader = BufReader::new(reader);
    let mut examples = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RawRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if !record.extra.is_empty() {
            let names: Vec<&str> = record.extra.keys().map(String::as_str).collect();
            log::warn!("{source}:{line_no}: ignoring unknown fields {names:?}");
        }
        let ex = record.into_example(task_kind, source)?;
        if !seen.insert(ex.id.clone()) {
            return Err(CorpusError::DuplicateId(ex.id));
        }
        examples.push(ex);
    }
    Corpus::from_examples(task_kind, examples)
}

pub fn load_corpus(path: &Path, task_kind: TaskKind) -> Result<Corpus, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::Io(format!("{}: {e}", path.display())))?;
    let source = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".to_string());
    parse_corpus(file, task_kind, &source)
}

/// Split on Unicode whitespace, no case folding.
pub fn tokenize(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// Token-level Levenshtein distance divided by the longer length.
pub fn normalized_edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> Result<f64, CorpusError> {
    let longest = a.len().max(b.len());
    if longest == 0 {
        return Err(CorpusError::EmptySequences);
    }
    Ok(levenshtein(a, b) as f64 / longest as f64)
}

fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let substitution = prev[j] + usize::from(x != y);
            cur[j + 1] = substitution.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PairViolation {
    LabelNotFlipped { pair_id: String, label: Label },
    EditRatioExceeded { pair_id: String, edit_ratio: f64, max_edit_ratio: f64 },
}

impl PairViolation {
    pub fn pair_id(&self) -> &str {
        match self {
            PairViolation::LabelNotFlipped { pair_id, .. } | PairViolation::EditRatioExceeded { pair_id, .. } => {
                pair_id
            }
        }
    }
}

impl fmt::Display for PairViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PairViolation::LabelNotFlipped { pair_id, label } => {
                write!(f, "pair {pair_id}: both members labeled {label}")
            }
            PairViolation::EditRatioExceeded { pair_id, edit_ratio, max_edit_ratio } => {
                write!(f, "pair {pair_id}: edit ratio {edit_ratio:.3} exceeds {max_edit_ratio}")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<PairViolation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Report every pair that does not flip its label or edits too much.
pub fn validate_pairs(corpus: &Corpus, max_edit_ratio: f64) -> ValidationReport {
    let mut violations = Vec::new();
    for pair in corpus.pairs() {
        if !pair.labels_flipped() {
            violations.push(PairViolation::LabelNotFlipped {
                pair_id: pair.pair_id.clone(),
                label: pair.original.label,
            });
        }
        if pair.edit_ratio > max_edit_ratio {
            violations.push(PairViolation::EditRatioExceeded {
                pair_id: pair.pair_id.clone(),
                edit_ratio: pair.edit_ratio,
                max_edit_ratio,
            });
        }
    }
    ValidationReport { violations }
}

/// A sampled test set and the ids selection must avoid.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSplit {
    pub examples: Vec<Example>,
    pub ids: HashSet<String>,
}

/// Draw `n` distinct examples without replacement.
pub fn sample_test_split(corpus: &Corpus, n: usize, seed: u64) -> Result<TestSplit, CorpusError> {
    if n > corpus.len() {
        return Err(CorpusError::SampleTooLarge { requested: n, available: corpus.len() });
    }
    let mut rng = SeededRng::new(seed, stream::TEST_SPLIT);
    let picks = rng.sample_indices(corpus.len(), n);
    let examples: Vec<Example> = picks
        .into_iter()
        .map(|i| corpus.examples.get_index(i).expect("index in range").1.clone())
        .collect();
    let ids = examples.iter().map(|e| e.id.clone()).collect();
    Ok(TestSplit { examples, ids })
}

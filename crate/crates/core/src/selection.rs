//! Demonstration selection strategies and demonstration ordering.
//!
//! | name            | picks                                                      |
//! |-----------------|------------------------------------------------------------|
//! | `random`        | k examples uniformly, no label constraint                  |
//! | `nearest`       | the k examples most similar to the test input              |
//! | `nearest-class` | the most similar examples of each label, split evenly      |
//! | `cds-random`    | k/2 counterfactual pairs uniformly                         |
//! | `cds-nearest`   | the k/2 pairs with the highest pair score                  |
//!
//! Pair strategies always emit each pair as adjacent (original,
//! counterfactual) demonstrations.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CadPair, CdRole, Corpus, Example, Label};
use crate::embeddings::{cosine_similarity, rank_order, top_k, Embedding, EmbeddingError, EmbeddingStore};
use crate::rng::{stream, SeededRng};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("invalid strategy: {0}")]
    InvalidSpec(String),
    #[error("need {needed} eligible examples, pool has {available}")]
    InsufficientPool { needed: usize, available: usize },
    #[error("need {needed} eligible pairs, pool has {available}")]
    InsufficientPairs { needed: usize, available: usize },
    #[error("label {label} needs {needed} candidates, pool has {available}")]
    ClassTooSmall { label: Label, needed: usize, available: usize },
    #[error("no embedding for example {0:?}")]
    MissingEmbedding(String),
    #[error("strategy {0} needs an embedding store and a query vector")]
    NeedsEmbeddings(StrategyKind),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StrategyKind {
    #[serde(rename = "random")]
    Random,
    #[serde(rename = "nearest")]
    Nearest,
    #[serde(rename = "nearest-class")]
    NearestClass,
    #[serde(rename = "cds-random")]
    CdsRandom,
    #[serde(rename = "cds-nearest")]
    CdsNearest,
}

impl StrategyKind {
    /// Report row order; `random` is the baseline.
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::Random,
        StrategyKind::Nearest,
        StrategyKind::NearestClass,
        StrategyKind::CdsRandom,
        StrategyKind::CdsNearest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Random => "random",
            StrategyKind::Nearest => "nearest",
            StrategyKind::NearestClass => "nearest-class",
            StrategyKind::CdsRandom => "cds-random",
            StrategyKind::CdsNearest => "cds-nearest",
        }
    }

    pub fn is_pair_based(self) -> bool {
        matches!(self, StrategyKind::CdsRandom | StrategyKind::CdsNearest)
    }

    pub fn uses_embeddings(self) -> bool {
        matches!(self, StrategyKind::Nearest | StrategyKind::NearestClass | StrategyKind::CdsNearest)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown strategy {s:?} (expected one of random, nearest, nearest-class, cds-random, cds-nearest)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    pub k: usize,
    pub seed: u64,
}

impl StrategySpec {
    pub fn new(kind: StrategyKind, k: usize, seed: u64) -> Result<Self, SelectionError> {
        let spec = Self { kind, k, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SelectionError> {
        if self.k == 0 {
            return Err(SelectionError::InvalidSpec("k must be at least 1".into()));
        }
        if self.kind.is_pair_based() && !self.k.is_multiple_of(2) {
            return Err(SelectionError::InvalidSpec(format!("{} needs an even k, got {}", self.kind, self.k)));
        }
        Ok(())
    }

    fn expect_kind(&self, kind: StrategyKind) -> Result<(), SelectionError> {
        self.validate()?;
        if self.kind != kind {
            return Err(SelectionError::InvalidSpec(format!("spec is {}, selector is {kind}", self.kind)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArrangePolicy {
    #[default]
    SelectionOrder,
    SeededShuffle,
}

/// How a counterfactual pair is scored against a test input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairScore {
    #[default]
    Max,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemonstrationSet {
    pub demos: Vec<Example>,
    /// Similarity to the test input, for strategies that compute one.
    pub scores: Vec<Option<f64>>,
    pub strategy: StrategySpec,
    pub test_id: String,
}

impl DemonstrationSet {
    pub fn ids(&self) -> Vec<&str> {
        self.demos.iter().map(|d| d.id.as_str()).collect()
    }

    pub fn label_counts(&self) -> HashMap<Label, usize> {
        let mut counts = HashMap::new();
        for d in &self.demos {
            *counts.entry(d.label).or_default() += 1;
        }
        counts
    }

    /// Check size, distinctness, test exclusion and pair adjacency.
    pub fn validate(&self) -> Result<(), String> {
        if self.demos.len() != self.strategy.k {
            return Err(format!("{} demos for k={}", self.demos.len(), self.strategy.k));
        }
        if self.scores.len() != self.demos.len() {
            return Err("score list length differs from demo count".into());
        }
        let mut seen = HashSet::new();
        for d in &self.demos {
            if !seen.insert(d.id.as_str()) {
                return Err(format!("duplicate demo {}", d.id));
            }
            if d.id == self.test_id {
                return Err(format!("test example {} selected as a demo", d.id));
            }
        }
        if self.strategy.kind.is_pair_based() {
            for chunk in self.demos.chunks(2) {
                let [a, b] = chunk else {
                    return Err("odd number of pair demos".into());
                };
                let paired = a.pair_id.is_some()
                    && a.pair_id == b.pair_id
                    && a.cd_role == CdRole::Original
                    && b.cd_role == CdRole::Counterfactual;
                if !paired {
                    return Err(format!("{} and {} are not an adjacent original/counterfactual pair", a.id, b.id));
                }
            }
        }
        Ok(())
    }
}

/// A corpus minus the ids selection must not use.
#[derive(Debug, Clone, Copy)]
pub struct SelectionPool<'a> {
    corpus: &'a Corpus,
    exclude: Option<&'a HashSet<String>>,
}

impl<'a> SelectionPool<'a> {
    pub fn new(corpus: &'a Corpus, exclude: &'a HashSet<String>) -> Self {
        Self { corpus, exclude: Some(exclude) }
    }

    pub fn whole(corpus: &'a Corpus) -> Self {
        Self { corpus, exclude: None }
    }

    pub fn corpus(&self) -> &'a Corpus {
        self.corpus
    }

    pub fn is_eligible(&self, id: &str, test_id: &str) -> bool {
        id != test_id && self.corpus.get(id).is_some() && !self.exclude.is_some_and(|ex| ex.contains(id))
    }

    pub fn eligible(&self, test_id: &'a str) -> impl Iterator<Item = &'a Example> + 'a {
        let pool = *self;
        self.corpus.examples().filter(move |e| pool.is_eligible(&e.id, test_id))
    }

    pub fn eligible_pairs(&self, test_id: &'a str) -> impl Iterator<Item = &'a CadPair> + 'a {
        let pool = *self;
        self.corpus
            .pairs()
            .filter(move |p| pool.is_eligible(&p.original.id, test_id) && pool.is_eligible(&p.counterfactual.id, test_id))
    }
}

fn pair_demos<'p>(pairs: impl IntoIterator<Item = (&'p CadPair, Option<f64>)>) -> (Vec<Example>, Vec<Option<f64>>) {
    let mut demos = Vec::new();
    let mut scores = Vec::new();
    for (pair, score) in pairs {
        demos.push(pair.original.clone());
        demos.push(pair.counterfactual.clone());
        scores.push(score);
        scores.push(score);
    }
    (demos, scores)
}

pub fn select_random(pool: SelectionPool<'_>, spec: &StrategySpec, test_id: &str) -> Result<DemonstrationSet, SelectionError> {
    spec.expect_kind(StrategyKind::Random)?;
    let eligible: Vec<&Example> = pool.eligible(test_id).collect();
    if eligible.len() < spec.k {
        return Err(SelectionError::InsufficientPool { needed: spec.k, available: eligible.len() });
    }
    let mut rng = SeededRng::new(spec.seed, stream::SELECTION);
    let demos: Vec<Example> = rng.sample_indices(eligible.len(), spec.k).into_iter().map(|i| eligible[i].clone()).collect();
    Ok(DemonstrationSet { scores: vec![None; demos.len()], demos, strategy: *spec, test_id: test_id.to_string() })
}

pub fn select_cds_random(pool: SelectionPool<'_>, spec: &StrategySpec, test_id: &str) -> Result<DemonstrationSet, SelectionError> {
    spec.expect_kind(StrategyKind::CdsRandom)?;
    let pairs: Vec<&CadPair> = pool.eligible_pairs(test_id).collect();
    let needed = spec.k / 2;
    if pairs.len() < needed {
        return Err(SelectionError::InsufficientPairs { needed, available: pairs.len() });
    }
    let mut rng = SeededRng::new(spec.seed, stream::SELECTION);
    let chosen = rng.sample_indices(pairs.len(), needed).into_iter().map(|i| (pairs[i], None));
    let (demos, scores) = pair_demos(chosen);
    Ok(DemonstrationSet { demos, scores, strategy: *spec, test_id: test_id.to_string() })
}

fn require_embedded<T: Scalar>(store: &EmbeddingStore<T>, id: &str) -> Result<(), SelectionError> {
    store.get(id).map(|_| ()).ok_or_else(|| SelectionError::MissingEmbedding(id.to_string()))
}

pub fn select_nearest<T: Scalar>(
    pool: SelectionPool<'_>,
    store: &EmbeddingStore<T>,
    test: &Example,
    query: &Embedding<T>,
    spec: &StrategySpec,
) -> Result<DemonstrationSet, SelectionError> {
    spec.expect_kind(StrategyKind::Nearest)?;
    let eligible: Vec<&Example> = pool.eligible(&test.id).collect();
    if eligible.len() < spec.k {
        return Err(SelectionError::InsufficientPool { needed: spec.k, available: eligible.len() });
    }
    for e in &eligible {
        require_embedded(store, &e.id)?;
    }
    let hits = top_k(store, query, spec.k, |id| pool.is_eligible(id, &test.id))?;
    let corpus = pool.corpus();
    Ok(DemonstrationSet {
        demos: hits.iter().map(|h| corpus.get(&h.id).expect("eligible id").clone()).collect(),
        scores: hits.iter().map(|h| Some(h.score.to_f64_lossy())).collect(),
        strategy: *spec,
        test_id: test.id.clone(),
    })
}

/// Per-label demo counts: `k / classes` each, remainder to the labels whose
/// nearest member is most similar to the test input.
pub fn class_allocation<T: Scalar>(k: usize, best_by_label: &[(Label, T)]) -> Vec<(Label, usize)> {
    let classes = best_by_label.len();
    let base = k / classes;
    let remainder = k % classes;
    let mut order: Vec<usize> = (0..classes).collect();
    order.sort_by(|&a, &b| {
        best_by_label[b]
            .1
            .partial_cmp(&best_by_label[a].1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut counts: Vec<(Label, usize)> = best_by_label.iter().map(|(l, _)| (*l, base)).collect();
    for &idx in order.iter().take(remainder) {
        counts[idx].1 += 1;
    }
    counts
}

pub fn select_nearest_class<T: Scalar>(
    pool: SelectionPool<'_>,
    store: &EmbeddingStore<T>,
    test: &Example,
    query: &Embedding<T>,
    spec: &StrategySpec,
) -> Result<DemonstrationSet, SelectionError> {
    spec.expect_kind(StrategyKind::NearestClass)?;
    let corpus = pool.corpus();
    let labels = corpus.task_kind().labels();
    let ceiling = spec.k.div_ceil(labels.len());

    let mut ranked_by_label = Vec::with_capacity(labels.len());
    for &label in labels {
        let members: Vec<&Example> = pool.eligible(&test.id).filter(|e| e.label == label).collect();
        if members.len() < ceiling {
            return Err(SelectionError::ClassTooSmall { label, needed: ceiling, available: members.len() });
        }
        for e in &members {
            require_embedded(store, &e.id)?;
        }
        let in_class = |id: &str| pool.is_eligible(id, &test.id) && corpus.get(id).is_some_and(|e| e.label == label);
        ranked_by_label.push((label, top_k(store, query, ceiling, in_class)?));
    }

    let best: Vec<(Label, T)> = ranked_by_label.iter().map(|(l, hits)| (*l, hits[0].score)).collect();
    let allocation = class_allocation(spec.k, &best);

    let mut picked = Vec::with_capacity(spec.k);
    for ((_, hits), (_, count)) in ranked_by_label.into_iter().zip(allocation) {
        picked.extend(hits.into_iter().take(count));
    }
    picked.sort_by(|a, b| rank_order(a.score, &a.id, b.score, &b.id));

    Ok(DemonstrationSet {
        demos: picked.iter().map(|h| corpus.get(&h.id).expect("eligible id").clone()).collect(),
        scores: picked.iter().map(|h| Some(h.score.to_f64_lossy())).collect(),
        strategy: *spec,
        test_id: test.id.clone(),
    })
}

pub fn pair_score<T: Scalar>(
    store: &EmbeddingStore<T>,
    query: &Embedding<T>,
    pair: &CadPair,
    scoring: PairScore,
) -> Result<T, SelectionError> {
    let vector = |id: &str| store.get(id).ok_or_else(|| SelectionError::MissingEmbedding(id.to_string()));
    let a = cosine_similarity(query, vector(&pair.original.id)?)?;
    let b = cosine_similarity(query, vector(&pair.counterfactual.id)?)?;
    Ok(match scoring {
        PairScore::Max => a.max(b),
        PairScore::Mean => (a + b) / (T::one() + T::one()),
    })
}

pub fn select_cds_nearest<T: Scalar>(
    pool: SelectionPool<'_>,
    store: &EmbeddingStore<T>,
    test: &Example,
    query: &Embedding<T>,
    spec: &StrategySpec,
    scoring: PairScore,
) -> Result<DemonstrationSet, SelectionError> {
    spec.expect_kind(StrategyKind::CdsNearest)?;
    let needed = spec.k / 2;
    let pairs: Vec<&CadPair> = pool.eligible_pairs(&test.id).collect();
    if pairs.len() < needed {
        return Err(SelectionError::InsufficientPairs { needed, available: pairs.len() });
    }
    let mut scored = Vec::with_capacity(pairs.len());
    for pair in pairs {
        scored.push((pair, pair_score(store, query, pair, scoring)?));
    }
    scored.sort_by(|a, b| rank_order(a.1, &a.0.pair_id, b.1, &b.0.pair_id));
    let chosen = scored.into_iter().take(needed).map(|(p, s)| (p, Some(s.to_f64_lossy())));
    let (demos, scores) = pair_demos(chosen);
    Ok(DemonstrationSet { demos, scores, strategy: *spec, test_id: test.id.clone() })
}

/// Everything a strategy may need besides the test input.
#[derive(Debug, Clone, Copy)]
pub struct Selector<'a, T> {
    pub pool: SelectionPool<'a>,
    pub store: Option<&'a EmbeddingStore<T>>,
    pub pair_score: PairScore,
}

impl<'a, T: Scalar> Selector<'a, T> {
    pub fn select(
        &self,
        spec: &StrategySpec,
        test: &Example,
        query: Option<&Embedding<T>>,
    ) -> Result<DemonstrationSet, SelectionError> {
        let embedded = || match (self.store, query) {
            (Some(store), Some(query)) => Ok((store, query)),
            _ => Err(SelectionError::NeedsEmbeddings(spec.kind)),
        };
        match spec.kind {
            StrategyKind::Random => select_random(self.pool, spec, &test.id),
            StrategyKind::CdsRandom => select_cds_random(self.pool, spec, &test.id),
            StrategyKind::Nearest => {
                let (store, query) = embedded()?;
                select_nearest(self.pool, store, test, query, spec)
            }
            StrategyKind::NearestClass => {
                let (store, query) = embedded()?;
                select_nearest_class(self.pool, store, test, query, spec)
            }
            StrategyKind::CdsNearest => {
                let (store, query) = embedded()?;
                select_cds_nearest(self.pool, store, test, query, spec, self.pair_score)
            }
        }
    }
}

/// Reorder demonstrations. Shuffling moves counterfactual pairs as units.
pub fn arrange(set: &DemonstrationSet, policy: ArrangePolicy) -> DemonstrationSet {
    match policy {
        ArrangePolicy::SelectionOrder => set.clone(),
        ArrangePolicy::SeededShuffle => {
            let unit = if set.strategy.kind.is_pair_based() { 2 } else { 1 };
            let mut units: Vec<(Vec<Example>, Vec<Option<f64>>)> = set
                .demos
                .chunks(unit)
                .zip(set.scores.chunks(unit))
                .map(|(d, s)| (d.to_vec(), s.to_vec()))
                .collect();
            SeededRng::new(set.strategy.seed, stream::ARRANGEMENT).shuffle(&mut units);
            let (demos, scores): (Vec<Vec<Example>>, Vec<Vec<Option<f64>>>) = units.into_iter().unzip();
            DemonstrationSet {
                demos: demos.concat(),
                scores: scores.concat(),
                strategy: set.strategy,
                test_id: set.test_id.clone(),
            }
        }
    }
}

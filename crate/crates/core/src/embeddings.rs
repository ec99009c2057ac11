//! Text embeddings: validated vectors, a content-addressed cache, and exact
//! cosine retrieval.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Example};
use crate::digest::sha256_parts;
use crate::gateway::{EmbeddingProvider, GatewayError};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("vector has a non-finite component")]
    NonFinite,
    #[error("empty vector")]
    Empty,
    #[error("model mismatch: store holds {store:?}, vector from {vector:?}")]
    ModelMismatch { store: String, vector: String },
    #[error("requested {requested} neighbours but only {available} candidates qualify")]
    InsufficientCandidates { requested: usize, available: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("cached vectors have dimension {cached} but the provider returned {fresh}")]
    DimensionDrift { cached: usize, fresh: usize },
    #[error("provider error: {0}")]
    Provider(#[from] GatewayError),
    #[error("cache file {path}: {message}")]
    Cache { path: PathBuf, message: String },
}

/// A finite, non-zero vector tagged with the model that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding<T> {
    values: Vec<T>,
    model_id: String,
}

impl<T: Scalar> Embedding<T> {
    pub fn new(values: Vec<T>, model_id: impl Into<String>) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::Empty);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        if values.iter().all(|v| v.is_zero()) {
            return Err(EmbeddingError::ZeroVector);
        }
        Ok(Self { values, model_id: model_id.into() })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    fn norm(&self) -> T {
        self.values.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt()
    }
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine_similarity<T: Scalar>(a: &Embedding<T>, b: &Embedding<T>) -> Result<T, EmbeddingError> {
    if a.dimension() != b.dimension() {
        return Err(EmbeddingError::DimensionMismatch { expected: a.dimension(), actual: b.dimension() });
    }
    let dot = a.values.iter().zip(&b.values).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
    let denom = a.norm() * b.norm();
    if denom.is_zero() {
        // only reachable through underflow of tiny components
        return Err(EmbeddingError::ZeroVector);
    }
    let one = T::one();
    Ok((dot / denom).max(-one).min(one))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingStore<T> {
    dimension: usize,
    model_id: String,
    entries: BTreeMap<String, Embedding<T>>,
}

impl<T: Scalar> EmbeddingStore<T> {
    pub fn new(dimension: usize, model_id: impl Into<String>) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self { dimension, model_id: model_id.into(), entries: BTreeMap::new() }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, id: impl Into<String>, vector: Embedding<T>) -> Result<(), EmbeddingError> {
        if vector.dimension() != self.dimension {
            return Err(EmbeddingError::DimensionMismatch { expected: self.dimension, actual: vector.dimension() });
        }
        if vector.model_id != self.model_id {
            return Err(EmbeddingError::ModelMismatch {
                store: self.model_id.clone(),
                vector: vector.model_id.clone(),
            });
        }
        self.entries.insert(id.into(), vector);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Embedding<T>> {
        self.entries.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Embedding<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// A retrieval hit.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored<T> {
    pub id: String,
    pub score: T,
}

/// Descending score, then ascending id.
pub(crate) fn rank_order<T: Scalar>(a_score: T, a_id: &str, b_score: T, b_id: &str) -> Ordering {
    b_score
        .partial_cmp(&a_score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a_id.cmp(b_id))
}

/// Exact top-k by cosine similarity over the candidates accepted by `filter`.
pub fn top_k<T: Scalar>(
    store: &EmbeddingStore<T>,
    query: &Embedding<T>,
    k: usize,
    filter: impl Fn(&str) -> bool,
) -> Result<Vec<Scored<T>>, EmbeddingError> {
    if k == 0 {
        return Err(EmbeddingError::ZeroK);
    }
    let mut scored = Vec::new();
    for (id, vector) in store.iter().filter(|(id, _)| filter(id)) {
        scored.push(Scored { id: id.to_string(), score: cosine_similarity(query, vector)? });
    }
    if scored.len() < k {
        return Err(EmbeddingError::InsufficientCandidates { requested: k, available: scored.len() });
    }
    scored.sort_by(|a, b| rank_order(a.score, &a.id, b.score, &b.id));
    scored.truncate(k);
    Ok(scored)
}

/// Cache key: hash of (model id, exact text).
pub fn content_hash(model_id: &str, text: &str) -> String {
    sha256_parts(&[model_id.as_bytes(), text.as_bytes()])
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheRecord<T> {
    content_hash: String,
    model_id: String,
    vector: Vec<T>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub hits: usize,
    pub misses: usize,
    pub provider_calls: usize,
}

/// Content-addressed vector cache, optionally backed by an append-only file.
#[derive(Debug)]
pub struct EmbeddingCache<T> {
    path: Option<PathBuf>,
    entries: HashMap<String, Vec<T>>,
}

impl<T: Scalar> EmbeddingCache<T> {
    pub fn in_memory() -> Self {
        Self { path: None, entries: HashMap::new() }
    }

    /// Open (or start) a cache file. Later records win over earlier ones.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, EmbeddingError> {
        let path = path.into();
        let mut entries = HashMap::new();
        if path.exists() {
            let cache_err = |message: String| EmbeddingError::Cache { path: path.clone(), message };
            let file = File::open(&path).map_err(|e| cache_err(e.to_string()))?;
            for (idx, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| cache_err(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: CacheRecord<T> =
                    serde_json::from_str(&line).map_err(|e| cache_err(format!("line {}: {e}", idx + 1)))?;
                entries.insert(record.content_hash, record.vector);
            }
        }
        Ok(Self { path: Some(path), entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, model_id: &str, text: &str) -> Option<&[T]> {
        self.entries.get(&content_hash(model_id, text)).map(Vec::as_slice)
    }

    fn insert_batch(&mut self, model_id: &str, batch: Vec<(String, Vec<T>)>) -> Result<(), EmbeddingError> {
        if let Some(path) = &self.path {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| EmbeddingError::Cache { path: path.clone(), message: e.to_string() })?;
            }
            let io_err = |e: std::io::Error| EmbeddingError::Cache { path: path.clone(), message: e.to_string() };
            let file = OpenOptions::new().create(true).append(true).open(path).map_err(io_err)?;
            let mut out = BufWriter::new(file);
            for (text, vector) in &batch {
                let record = CacheRecord {
                    content_hash: content_hash(model_id, text),
                    model_id: model_id.to_string(),
                    vector: vector.clone(),
                };
                let line = serde_json::to_string(&record).expect("cache record serializes");
                writeln!(out, "{line}").map_err(io_err)?;
            }
            out.flush().map_err(io_err)?;
        }
        for (text, vector) in batch {
            self.entries.insert(content_hash(model_id, &text), vector);
        }
        Ok(())
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }
}

/// Embed every example of `corpus`, consulting `cache` first.
///
/// Identical texts are sent to the provider once. NLI examples embed as
/// premise and hypothesis joined by a single space.
pub fn embed_corpus<T: Scalar>(
    corpus: &Corpus,
    provider: &dyn EmbeddingProvider,
    cache: &mut EmbeddingCache<T>,
) -> Result<(EmbeddingStore<T>, CacheStats), EmbeddingError> {
    embed_examples(corpus.examples(), provider, cache)
}

pub fn embed_examples<'a, T: Scalar>(
    examples: impl IntoIterator<Item = &'a Example>,
    provider: &dyn EmbeddingProvider,
    cache: &mut EmbeddingCache<T>,
) -> Result<(EmbeddingStore<T>, CacheStats), EmbeddingError> {
    let model_id = provider.model_id().to_string();
    let mut stats = CacheStats::default();
    let items: Vec<(String, String)> = examples.into_iter().map(|e| (e.id.clone(), e.joined_text())).collect();

    let mut missing: Vec<String> = Vec::new();
    let mut queued = std::collections::HashSet::new();
    for (_, text) in &items {
        if cache.get(&model_id, text).is_some() {
            stats.hits += 1;
        } else {
            stats.misses += 1;
            if queued.insert(text.clone()) {
                missing.push(text.clone());
            }
        }
    }

    let mut dimension = items
        .iter()
        .find_map(|(_, text)| cache.get(&model_id, text).map(<[T]>::len));

    let batch_size = provider.batch_size().max(1);
    for chunk in missing.chunks(batch_size) {
        let vectors = provider.embed(chunk)?;
        stats.provider_calls += 1;
        if vectors.len() != chunk.len() {
            return Err(GatewayError::CountMismatch { expected: chunk.len(), actual: vectors.len() }.into());
        }
        let mut batch = Vec::with_capacity(chunk.len());
        for (text, raw) in chunk.iter().zip(vectors) {
            match dimension {
                Some(d) if d != raw.len() => {
                    return Err(EmbeddingError::DimensionDrift { cached: d, fresh: raw.len() });
                }
                None => dimension = Some(raw.len()),
                _ => {}
            }
            batch.push((text.clone(), raw.into_iter().map(T::from_f64_lossy).collect()));
        }
        cache.insert_batch(&model_id, batch)?;
    }

    let dimension = match dimension {
        Some(d) => d,
        None => return Err(EmbeddingError::Empty),
    };
    let mut store = EmbeddingStore::new(dimension, model_id.clone());
    for (id, text) in items {
        let values = cache.get(&model_id, &text).expect("embedded above").to_vec();
        if values.len() != dimension {
            return Err(EmbeddingError::DimensionDrift { cached: values.len(), fresh: dimension });
        }
        store.insert(id, Embedding::new(values, model_id.clone())?)?;
    }
    Ok((store, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_corpus, TaskKind};
    use crate::gateway::HashEmbedder;
    use proptest::prelude::*;

    fn v(values: &[f64]) -> Embedding<f64> {
        Embedding::new(values.to_vec(), "m").unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&v(&[3.0, 0.0]), &v(&[3.0, 0.0])).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        // dot = 2 + 2 + 4 = 8, both norms 3
        let s = cosine_similarity(&v(&[1.0, 2.0, 2.0]), &v(&[2.0, 1.0, 2.0])).unwrap();
        assert!((s - 8.0 / 9.0).abs() < 1e-9);
        assert!((s - 0.888889).abs() < 1e-6);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine_similarity(&v(&[1.0]), &v(&[1.0, 0.0])),
            Err(EmbeddingError::DimensionMismatch { .. })
        ));
        assert!(matches!(Embedding::<f64>::new(vec![0.0, 0.0], "m"), Err(EmbeddingError::ZeroVector)));
        assert!(matches!(Embedding::<f64>::new(vec![f64::NAN], "m"), Err(EmbeddingError::NonFinite)));
    }

    #[test]
    fn works_for_f32() {
        let a = Embedding::<f32>::new(vec![1.0, 2.0, 2.0], "m").unwrap();
        let b = Embedding::<f32>::new(vec![2.0, 1.0, 2.0], "m").unwrap();
        assert!((cosine_similarity(&a, &b).unwrap() - 8.0 / 9.0).abs() < 1e-6);
    }

    fn abc_store() -> EmbeddingStore<f64> {
        let mut store = EmbeddingStore::new(2, "m");
        store.insert("a", v(&[1.0, 0.0])).unwrap();
        store.insert("b", v(&[0.0, 1.0])).unwrap();
        store.insert("c", v(&[0.7, 0.7])).unwrap();
        store
    }

    #[test]
    fn top_k_examples() {
        let store = abc_store();
        let hits = top_k(&store, &v(&[1.0, 0.0]), 2, |_| true).unwrap();
        let ids: Vec<_> = hits.iter().map(|h| h.id.as_str()).collect();
        assert_eq!(ids, ["a", "c"]);

        let all = top_k(&store, &v(&[1.0, 0.0]), 3, |_| true).unwrap();
        assert_eq!(all.len(), 3);
        assert_eq!(all[2].id, "b");

        let err = top_k(&store, &v(&[1.0, 0.0]), 3, |id| id != "a").unwrap_err();
        assert!(matches!(err, EmbeddingError::InsufficientCandidates { requested: 3, available: 2 }));
        assert!(matches!(top_k(&store, &v(&[1.0, 0.0]), 0, |_| true), Err(EmbeddingError::ZeroK)));
    }

    #[test]
    fn ties_break_by_id() {
        let mut store = EmbeddingStore::new(2, "m");
        store.insert("zeta", v(&[0.5, 0.5])).unwrap();
        store.insert("alpha", v(&[0.5, 0.5])).unwrap();
        let hits = top_k(&store, &v(&[1.0, 0.0]), 2, |_| true).unwrap();
        assert_eq!(hits[0].id, "alpha");
        assert_eq!(hits[1].id, "zeta");
    }

    #[test]
    fn store_rejects_foreign_vectors() {
        let mut store = EmbeddingStore::<f64>::new(2, "m");
        assert!(matches!(store.insert("x", v(&[1.0])), Err(EmbeddingError::DimensionMismatch { .. })));
        let other = Embedding::new(vec![1.0, 0.0], "other").unwrap();
        assert!(matches!(store.insert("x", other), Err(EmbeddingError::ModelMismatch { .. })));
    }

    const CORPUS: &str = r#"{"id":"a","text":"a great film","label":"positive"}
{"id":"b","text":"a dull film","label":"negative"}
{"id":"c","text":"an uneven film","label":"negative"}
{"id":"d","text":"a moving film","label":"positive"}
"#;

    #[test]
    fn cache_controls_provider_calls() {
        let corpus = parse_corpus(CORPUS.as_bytes(), TaskKind::Sentiment, "t").unwrap();
        let provider = HashEmbedder::new(16);
        let mut cache = EmbeddingCache::<f64>::in_memory();

        // warm three of four
        let partial: Vec<_> = corpus.examples().take(3).collect();
        embed_examples(partial, &provider, &mut cache).unwrap();
        provider.reset_calls();

        let (store, stats) = embed_corpus(&corpus, &provider, &mut cache).unwrap();
        assert_eq!(store.len(), 4);
        assert_eq!(stats.hits, 3);
        assert_eq!(stats.misses, 1);
        assert_eq!(provider.texts_embedded(), 1);

        provider.reset_calls();
        let (_, stats) = embed_corpus(&corpus, &provider, &mut cache).unwrap();
        assert_eq!(stats.misses, 0);
        assert_eq!(provider.texts_embedded(), 0);
    }

    #[test]
    fn duplicate_text_embeds_once() {
        let corpus = parse_corpus(
            "{\"id\":\"x\",\"text\":\"same words\",\"label\":\"positive\"}\n{\"id\":\"y\",\"text\":\"same words\",\"label\":\"negative\"}"
                .as_bytes(),
            TaskKind::Sentiment,
            "t",
        )
        .unwrap();
        let provider = HashEmbedder::new(8);
        let mut cache = EmbeddingCache::<f64>::in_memory();
        let (store, _) = embed_corpus(&corpus, &provider, &mut cache).unwrap();
        assert_eq!(provider.texts_embedded(), 1);
        assert_eq!(store.get("x"), store.get("y"));
    }

    /// Same model id, different width: simulates a provider changing underneath a cache.
    struct Fixed(usize);

    impl EmbeddingProvider for Fixed {
        fn model_id(&self) -> &str {
            "fixed"
        }

        fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
            Ok(texts.iter().map(|_| vec![1.0; self.0]).collect())
        }
    }

    #[test]
    fn dimension_drift_is_an_error() {
        let corpus = parse_corpus(CORPUS.as_bytes(), TaskKind::Sentiment, "t").unwrap();
        let mut cache = EmbeddingCache::<f64>::in_memory();
        let first: Vec<_> = corpus.examples().take(1).collect();
        embed_examples(first, &Fixed(8), &mut cache).unwrap();
        let err = embed_corpus(&corpus, &Fixed(16), &mut cache).unwrap_err();
        assert!(matches!(err, EmbeddingError::DimensionDrift { cached: 8, fresh: 16 }));
    }

    #[test]
    fn cache_file_round_trip_preserves_rankings() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let corpus = parse_corpus(CORPUS.as_bytes(), TaskKind::Sentiment, "t").unwrap();
        let provider = HashEmbedder::new(32);
        let (store, _) = embed_corpus(&corpus, &provider, &mut EmbeddingCache::<f64>::open(&path).unwrap()).unwrap();

        provider.reset_calls();
        let mut reopened = EmbeddingCache::<f64>::open(&path).unwrap();
        assert_eq!(reopened.len(), 4);
        let (again, stats) = embed_corpus(&corpus, &provider, &mut reopened).unwrap();
        assert_eq!(stats.provider_calls, 0);
        assert_eq!(store, again);
        for (_, query) in store.iter() {
            let x = top_k(&store, query, 4, |_| true).unwrap();
            let y = top_k(&again, query, 4, |_| true).unwrap();
            assert_eq!(x, y);
        }
    }

    fn nonzero_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, dim).prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3))
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_scale_invariant(a in nonzero_vec(6), b in nonzero_vec(6), s in 0.01f64..100.0) {
            let ea = Embedding::new(a.clone(), "m").unwrap();
            let eb = Embedding::new(b, "m").unwrap();
            let ab = cosine_similarity(&ea, &eb).unwrap();
            prop_assert_eq!(ab, cosine_similarity(&eb, &ea).unwrap());
            prop_assert!((-1.0..=1.0).contains(&ab));
            let scaled = Embedding::new(a.iter().map(|x| x * s).collect(), "m").unwrap();
            prop_assert!((cosine_similarity(&ea, &scaled).unwrap() - 1.0).abs() < 1e-12);
        }
    }
}

//! Transport-independent request handling for the retrieval service.
//!
//! Endpoints:
//!
//! - `GET /phrases?q=<prefix>` → `{"phrases": [...]}`
//! - `POST /retrieve` with `{"mode": "phrase"|"description"|"image", "query": ..., "top_k": n}`
//!   → `{"mode", "query", "results": [{"id", "score", "thumbnail_url"}], "source_ranks": [...]}`
//! - `GET /describe/<image_id>` → top-5 phrases with scores and the image's descriptions
//! - `GET /image/<image_id>` → PNG pixels
//!
//! Errors: 400 malformed request, 404 unknown id or route, 405 wrong method,
//! 503 when no store is loaded. The snapshot is shared read-only across
//! requests.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Cursor;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::corpus::{split_description, Corpus, TextureImage, Vocabulary};
use crate::joint_embedding::{squared_distance, EmbeddingStore, MetricModel};
use crate::metrics::rank_descending;
use crate::phrase_classifier::{score_description, score_phrase, Aggregation, ScoreMatrix};
use crate::{Error, Result, Scalar};

pub const MAX_TOP_K: usize = 100;
pub const DEFAULT_TOP_K: usize = 10;
pub const DESCRIBE_K: usize = 5;

/// Embeds free text into the joint space.
pub trait TextEmbedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

impl<T: Scalar> TextEmbedder for MetricModel<T> {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        self.embed_text(text)
    }
}

pub enum Backend {
    /// Per-image phrase probabilities from the classifier.
    Scores(ScoreMatrix),
    /// Joint-space image and phrase embeddings; scores are negative squared
    /// distances.
    Embeddings {
        images: EmbeddingStore,
        phrases: EmbeddingStore,
        text: Option<Arc<dyn TextEmbedder>>,
    },
}

impl Backend {
    fn image_ids(&self) -> &[String] {
        match self {
            Backend::Scores(m) => &m.image_ids,
            Backend::Embeddings { images, .. } => &images.ids,
        }
    }

    fn phrases(&self) -> &[String] {
        match self {
            Backend::Scores(m) => &m.phrases,
            Backend::Embeddings { phrases, .. } => &phrases.ids,
        }
    }
}

/// Immutable state behind the service.
pub struct Snapshot {
    backend: Backend,
    vocab: Vocabulary,
    index: BTreeMap<String, usize>,
    descriptions: BTreeMap<String, Vec<String>>,
    sources: BTreeMap<String, BTreeSet<String>>,
    pixels: BTreeMap<String, TextureImage>,
}

impl Snapshot {
    pub fn new(backend: Backend) -> Result<Self> {
        if let Backend::Embeddings { images, phrases, .. } = &backend {
            if images.dim != phrases.dim {
                return Err(Error::Shape(format!("image dim {} vs phrase dim {}", images.dim, phrases.dim)));
            }
        }
        let index = backend.image_ids().iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        let vocab = Vocabulary::from_phrases(backend.phrases());
        Ok(Snapshot {
            backend,
            vocab,
            index,
            descriptions: BTreeMap::new(),
            sources: BTreeMap::new(),
            pixels: BTreeMap::new(),
        })
    }

    /// Attaches ground-truth descriptions and pixels for the images the
    /// backend knows about.
    pub fn with_corpus(mut self, corpus: &Corpus) -> Self {
        for (i, im) in corpus.images().iter().enumerate() {
            if !self.index.contains_key(&im.id) {
                continue;
            }
            let texts: Vec<String> = corpus.descriptions_at(i).map(|d| d.canonical()).collect();
            for t in &texts {
                self.sources.entry(t.clone()).or_default().insert(im.id.clone());
            }
            self.descriptions.insert(im.id.clone(), texts);
            self.pixels.insert(im.id.clone(), im.clone());
        }
        self
    }

    pub fn num_images(&self) -> usize {
        self.index.len()
    }

    /// SHA-256 over every score, embedding and description held.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        let mut floats = |v: &[f64]| v.iter().for_each(|x| h.update(x.to_le_bytes()));
        match &self.backend {
            Backend::Scores(m) => floats(m.data()),
            Backend::Embeddings { images, phrases, .. } => {
                floats(&images.data);
                floats(&phrases.data);
            }
        }
        for id in self.backend.image_ids().iter().chain(self.backend.phrases()) {
            h.update(id.as_bytes());
            h.update([0]);
        }
        for (id, ds) in &self.descriptions {
            h.update(id.as_bytes());
            for d in ds {
                h.update(d.as_bytes());
                h.update([0]);
            }
        }
        hex::encode(h.finalize())
    }

    /// Per-image scores for a phrase query, higher is better.
    fn phrase_scores(&self, phrase: &str) -> std::result::Result<Vec<f64>, ApiError> {
        match &self.backend {
            Backend::Scores(m) => {
                let scored: Vec<_> = (0..m.rows()).map(|r| score_phrase(&self.vocab, m.row(r), phrase)).collect();
                if scored.first().is_some_and(|s| s.unmatched) {
                    return Err(ApiError::bad(format!("no part of {phrase:?} is in the vocabulary")));
                }
                Ok(scored.into_iter().map(|s| s.score).collect())
            }
            Backend::Embeddings { images, phrases, text } => {
                let canonical = crate::corpus::normalize_segment(phrase);
                let q = match (phrases.get(&canonical), text) {
                    (Some(v), _) => v.to_vec(),
                    (None, Some(t)) => t.embed(&canonical).map_err(ApiError::from)?,
                    (None, None) => {
                        return Err(ApiError::bad(format!("{phrase:?} is not in the vocabulary")));
                    }
                };
                Ok(neg_distances(images, &q))
            }
        }
    }

    fn description_scores(&self, text: &str) -> std::result::Result<Vec<f64>, ApiError> {
        match &self.backend {
            Backend::Scores(m) => Ok((0..m.rows())
                .map(|r| score_description(&self.vocab, m.row(r), text, Aggregation::Mean))
                .collect()),
            Backend::Embeddings { images, text: enc, .. } => {
                let enc = enc
                    .as_ref()
                    .ok_or_else(|| ApiError::new(503, "no text encoder loaded for description queries"))?;
                let q = enc.embed(text).map_err(ApiError::from)?;
                Ok(neg_distances(images, &q))
            }
        }
    }

    /// Negative squared distance between the query image and every image,
    /// in score space or joint space.
    fn image_scores(&self, row: usize) -> Vec<f64> {
        match &self.backend {
            Backend::Scores(m) => (0..m.rows()).map(|r| -squared_distance(m.row(row), m.row(r))).collect(),
            Backend::Embeddings { images, .. } => neg_distances(images, images.row(row)),
        }
    }

    /// Per-phrase scores of one image.
    fn image_phrase_scores(&self, row: usize) -> Vec<f64> {
        match &self.backend {
            Backend::Scores(m) => m.row(row).to_vec(),
            Backend::Embeddings { images, phrases, .. } => neg_distances(phrases, images.row(row)),
        }
    }
}

fn neg_distances(store: &EmbeddingStore, q: &[f64]) -> Vec<f64> {
    (0..store.len()).map(|i| -squared_distance(store.row(i), q)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApiResponse {
    pub status: u16,
    pub content_type: &'static str,
    pub body: Vec<u8>,
}

impl ApiResponse {
    fn json(status: u16, value: serde_json::Value) -> Self {
        ApiResponse {
            status,
            content_type: "application/json",
            body: serde_json::to_vec(&value).expect("json serializes"),
        }
    }

    pub fn json_body(&self) -> serde_json::Value {
        serde_json::from_slice(&self.body).unwrap_or(serde_json::Value::Null)
    }
}

#[derive(Debug)]
struct ApiError {
    status: u16,
    message: String,
}

impl ApiError {
    fn new(status: u16, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into() }
    }

    fn bad(message: impl Into<String>) -> Self {
        Self::new(400, message)
    }

    fn response(self) -> ApiResponse {
        ApiResponse::json(self.status, json!({ "error": self.message }))
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::UnknownId(_) => ApiError::new(404, e.to_string()),
            Error::Config(_) | Error::Empty(_) | Error::Shape(_) => ApiError::bad(e.to_string()),
            _ => ApiError::new(500, e.to_string()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    Phrase,
    Description,
    Image,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieveRequest {
    pub mode: QueryMode,
    pub query: String,
    #[serde(default)]
    pub top_k: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievedImage {
    pub id: String,
    pub score: f64,
    pub thumbnail_url: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceRank {
    pub id: String,
    /// 1-based rank in the full ordering.
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrieveResponse {
    pub mode: QueryMode,
    pub query: String,
    pub results: Vec<RetrievedImage>,
    /// Description queries matching a known description: where its source
    /// images landed.
    #[serde(default)]
    pub source_ranks: Vec<SourceRank>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPhrase {
    pub phrase: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescribeResponse {
    pub id: String,
    pub phrases: Vec<ScoredPhrase>,
    pub descriptions: Vec<String>,
}

pub fn thumbnail_url(id: &str) -> String {
    format!("/image/{}", percent_encoding::utf8_percent_encode(id, percent_encoding::NON_ALPHANUMERIC))
}

/// The service: an optional snapshot shared by all requests.
#[derive(Clone, Default)]
pub struct RetrievalApi {
    snapshot: Option<Arc<Snapshot>>,
}

impl RetrievalApi {
    /// A service with no store; every endpoint answers 503.
    pub fn unloaded() -> Self {
        RetrievalApi { snapshot: None }
    }

    pub fn new(snapshot: Snapshot) -> Self {
        RetrievalApi { snapshot: Some(Arc::new(snapshot)) }
    }

    pub fn snapshot(&self) -> Option<&Snapshot> {
        self.snapshot.as_deref()
    }

    /// Dispatches one request. `path` excludes the query string.
    pub fn handle(&self, method: &str, path: &str, query: Option<&str>, body: &[u8]) -> ApiResponse {
        let Some(snap) = self.snapshot.as_deref() else {
            return ApiError::new(503, "store not loaded").response();
        };
        let route = path.trim_end_matches('/');
        let result = if route == "/phrases" {
            expect_method(method, "GET").and_then(|_| phrases(snap, query))
        } else if route == "/retrieve" {
            expect_method(method, "POST").and_then(|_| retrieve(snap, body))
        } else if let Some(id) = route.strip_prefix("/describe/") {
            expect_method(method, "GET").and_then(|_| describe(snap, &decode(id)))
        } else if let Some(id) = route.strip_prefix("/image/") {
            expect_method(method, "GET").and_then(|_| image(snap, &decode(id)))
        } else {
            Err(ApiError::new(404, format!("no route {path}")))
        };
        result.unwrap_or_else(ApiError::response)
    }
}

fn decode(s: &str) -> String {
    percent_encoding::percent_decode_str(s).decode_utf8_lossy().into_owned()
}

fn expect_method(got: &str, want: &str) -> std::result::Result<(), ApiError> {
    if got.eq_ignore_ascii_case(want) {
        Ok(())
    } else {
        Err(ApiError::new(405, format!("use {want}")))
    }
}

fn phrases(snap: &Snapshot, query: Option<&str>) -> std::result::Result<ApiResponse, ApiError> {
    let mut prefix = None;
    for (k, v) in form_urlencoded::parse(query.unwrap_or("").as_bytes()) {
        if k == "q" {
            prefix = Some(v.into_owned());
        }
    }
    let prefix = prefix.ok_or_else(|| ApiError::bad("missing q parameter"))?;
    let list: Vec<&str> = if prefix.is_empty() { Vec::new() } else { snap.vocab.complete(&prefix) };
    Ok(ApiResponse::json(200, json!({ "phrases": list })))
}

fn retrieve(snap: &Snapshot, body: &[u8]) -> std::result::Result<ApiResponse, ApiError> {
    let req: RetrieveRequest =
        serde_json::from_slice(body).map_err(|e| ApiError::bad(format!("malformed request: {e}")))?;
    let query = req.query.trim();
    if query.is_empty() {
        return Err(ApiError::bad("empty query"));
    }
    let top_k = req.top_k.unwrap_or(DEFAULT_TOP_K);
    if !(1..=MAX_TOP_K).contains(&top_k) {
        return Err(ApiError::bad(format!("top_k must lie in 1..={MAX_TOP_K}")));
    }
    let scores = match req.mode {
        QueryMode::Phrase => snap.phrase_scores(query)?,
        QueryMode::Description => snap.description_scores(query)?,
        QueryMode::Image => {
            let row = *snap.index.get(query).ok_or_else(|| ApiError::new(404, format!("unknown image {query}")))?;
            snap.image_scores(row)
        }
    };
    let ids = snap.backend.image_ids();
    let scored: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
    let order = rank_rows(ids, &scored);
    let results = order
        .iter()
        .take(top_k)
        .map(|&r| RetrievedImage {
            id: ids[r].clone(),
            score: scores[r],
            thumbnail_url: thumbnail_url(&ids[r]),
        })
        .collect();
    let mut source_ranks = Vec::new();
    if req.mode == QueryMode::Description {
        let canonical = split_description(query)
            .iter()
            .map(|p| p.canonical.as_str())
            .collect::<Vec<_>>()
            .join(", ");
        if let Some(src) = snap.sources.get(&canonical) {
            for (rank, &r) in order.iter().enumerate() {
                if src.contains(&ids[r]) {
                    source_ranks.push(SourceRank { id: ids[r].clone(), rank: rank + 1 });
                }
            }
        }
    }
    let resp = RetrieveResponse {
        mode: req.mode,
        query: query.to_string(),
        results,
        source_ranks,
    };
    Ok(ApiResponse::json(200, serde_json::to_value(resp).expect("json serializes")))
}

/// Rows by descending score, ties by image id.
fn rank_rows(ids: &[String], scored: &[(usize, f64)]) -> Vec<usize> {
    let keyed: Vec<((&str, usize), f64)> = scored.iter().map(|&(r, s)| ((ids[r].as_str(), r), s)).collect();
    rank_descending(&keyed).into_iter().map(|(_, r)| r).collect()
}

fn describe(snap: &Snapshot, id: &str) -> std::result::Result<ApiResponse, ApiError> {
    let row = *snap.index.get(id).ok_or_else(|| ApiError::new(404, format!("unknown image {id}")))?;
    let scores = snap.image_phrase_scores(row);
    let phrases = snap.backend.phrases();
    let keyed: Vec<((&str, usize), f64)> =
        scores.iter().enumerate().map(|(i, &s)| ((phrases[i].as_str(), i), s)).collect();
    let top = rank_descending(&keyed)
        .into_iter()
        .take(DESCRIBE_K)
        .map(|(p, i)| ScoredPhrase { phrase: p.to_string(), score: scores[i] })
        .collect();
    let resp = DescribeResponse {
        id: id.to_string(),
        phrases: top,
        descriptions: snap.descriptions.get(id).cloned().unwrap_or_default(),
    };
    Ok(ApiResponse::json(200, serde_json::to_value(resp).expect("json serializes")))
}

fn image(snap: &Snapshot, id: &str) -> std::result::Result<ApiResponse, ApiError> {
    let im = snap
        .pixels
        .get(id)
        .ok_or_else(|| ApiError::new(404, format!("no pixels for image {id}")))?;
    let rgb = im.load_rgb().map_err(|e| ApiError::new(500, e.to_string()))?;
    let mut buf = Cursor::new(Vec::new());
    rgb.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| ApiError::new(500, e.to_string()))?;
    Ok(ApiResponse {
        status: 200,
        content_type: "image/png",
        body: buf.into_inner(),
    })
}

//! Embedding vectors, the provider boundary, and cosine similarity.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("embedding provider timed out")]
    ProviderTimeout,
    #[error("embedding provider returned an unusable response: {0}")]
    BadResponse(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("zero-norm vector")]
    ZeroVector,
    #[error("vector contains non-finite values")]
    NonFinite,
    #[error("no texts to embed")]
    EmptyInput,
}

impl EmbeddingError {
    fn is_transient(&self) -> bool {
        matches!(
            self,
            EmbeddingError::ProviderUnavailable(_) | EmbeddingError::ProviderTimeout
        )
    }
}

/// A finite, non-empty embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::DimensionMismatch { expected: 1, actual: 0 });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// The vector as stored in an index (32-bit floats).
    pub fn to_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&v| v as f32).collect()
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = EmbeddingError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

/// `dot(a, b) / (|a| |b|)`, accumulated in f64 in index order.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, EmbeddingError> {
    if a.len() != b.len() {
        return Err(EmbeddingError::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

pub trait EmbeddingProvider: Send + Sync {
    /// Identifies provider and model; recorded in index manifests.
    fn provider_tag(&self) -> String;
    fn dimension(&self) -> usize;
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError>;
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(250),
        }
    }
}

impl RetryPolicy {
    pub fn delay_before(&self, attempt: u32) -> Duration {
        // attempt is 1-based; no delay before the first
        self.base_delay * 2u32.saturating_pow(attempt.saturating_sub(2))
    }
}

/// Embeds `texts` in order, retrying transient provider failures.
pub fn embed_texts(provider: &dyn EmbeddingProvider, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
    embed_texts_with(provider, texts, &RetryPolicy::default())
}

pub fn embed_texts_with(
    provider: &dyn EmbeddingProvider,
    texts: &[String],
    policy: &RetryPolicy,
) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
    if texts.is_empty() {
        return Err(EmbeddingError::EmptyInput);
    }
    let mut attempt = 1;
    let vectors = loop {
        match provider.embed_batch(texts) {
            Ok(v) => break v,
            Err(e) if e.is_transient() && attempt < policy.max_attempts => {
                attempt += 1;
                tracing::warn!(error = %e, attempt, "retrying embedding request");
                std::thread::sleep(policy.delay_before(attempt));
            }
            Err(e) => return Err(e),
        }
    };
    if vectors.len() != texts.len() {
        return Err(EmbeddingError::BadResponse(format!(
            "expected {} vectors, got {}",
            texts.len(),
            vectors.len()
        )));
    }
    let dim = provider.dimension();
    if let Some(bad) = vectors.iter().find(|v| v.dimension() != dim) {
        return Err(EmbeddingError::DimensionMismatch {
            expected: dim,
            actual: bad.dimension(),
        });
    }
    Ok(vectors)
}

const STOPWORDS: &[&str] = &[
    "a", "about", "an", "and", "are", "as", "at", "be", "by", "can", "do", "does", "for", "from", "has", "have", "how",
    "i", "if", "in", "is", "it", "its", "me", "my", "of", "on", "or", "our", "should", "so", "that", "the", "their",
    "them", "there", "these", "they", "this", "to", "was", "we", "what", "when", "where", "which", "who", "will",
    "with", "would", "you", "your",
];

/// Lowercased alphanumeric tokens with common function words removed.
pub fn content_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
}

/// Deterministic offline embedder.
///
/// Every content token is hashed to a signed basis direction; a text's
/// vector is the normalized sum over its tokens. Texts sharing vocabulary
/// score high, texts with disjoint buckets are exactly orthogonal. A text
/// with no usable tokens gets a dense hash-seeded vector instead.
#[derive(Debug, Clone)]
pub struct StubEmbedder {
    dimension: usize,
}

impl StubEmbedder {
    pub const DEFAULT_DIMENSION: usize = 384;

    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "stub dimension must be positive");
        Self { dimension }
    }

    pub fn embed_one(&self, text: &str) -> EmbeddingVector {
        let mut values = vec![0.0f64; self.dimension];
        for token in content_tokens(text) {
            let digest = Sha256::digest(format!("tok:{token}").as_bytes());
            let bucket = (u64::from_le_bytes(digest[..8].try_into().unwrap()) % self.dimension as u64) as usize;
            let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
            values[bucket] += sign;
        }
        if values.iter().all(|&v| v == 0.0) {
            values = dense_from_hash(text, self.dimension);
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut values {
            *v /= norm;
        }
        EmbeddingVector(values)
    }
}

impl Default for StubEmbedder {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DIMENSION)
    }
}

fn dense_from_hash(text: &str, dimension: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dimension);
    let mut counter = 0u64;
    while out.len() < dimension {
        let mut hasher = Sha256::new();
        hasher.update(b"dense:");
        hasher.update(text.as_bytes());
        hasher.update(counter.to_le_bytes());
        let digest = hasher.finalize();
        for chunk in digest.chunks_exact(4) {
            if out.len() == dimension {
                break;
            }
            let x = u32::from_le_bytes(chunk.try_into().unwrap());
            out.push(x as f64 / u32::MAX as f64 * 2.0 - 1.0);
        }
        counter += 1;
    }
    if out.iter().all(|&v| v == 0.0) {
        out[0] = 1.0;
    }
    out
}

impl EmbeddingProvider for StubEmbedder {
    fn provider_tag(&self) -> String {
        format!("stub-hash-v1/d{}", self.dimension)
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Client for an OpenAI-compatible `/embeddings` endpoint.
pub struct HttpEmbedder {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: Option<String>,
    model: String,
    dimension: usize,
}

impl HttpEmbedder {
    pub fn new(
        endpoint: impl Into<String>,
        api_key: Option<String>,
        model: impl Into<String>,
        dimension: usize,
        timeout: Duration,
    ) -> Result<Self, EmbeddingError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| EmbeddingError::ProviderUnavailable(e.to_string()))?;
        Ok(Self {
            client,
            endpoint: endpoint.into().trim_end_matches('/').to_owned(),
            api_key,
            model: model.into(),
            dimension,
        })
    }
}

#[derive(Deserialize)]
struct EmbeddingsResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    index: usize,
    embedding: Vec<f64>,
}

impl EmbeddingProvider for HttpEmbedder {
    fn provider_tag(&self) -> String {
        format!("http:{}/d{}", self.model, self.dimension)
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        let mut request = self
            .client
            .post(format!("{}/embeddings", self.endpoint))
            .json(&serde_json::json!({ "model": self.model, "input": texts }));
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| {
            if e.is_timeout() {
                EmbeddingError::ProviderTimeout
            } else {
                EmbeddingError::ProviderUnavailable(e.to_string())
            }
        })?;
        let status = response.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(EmbeddingError::ProviderUnavailable(format!("status {status}")));
        }
        if !status.is_success() {
            return Err(EmbeddingError::BadResponse(format!("status {status}")));
        }
        let mut body: EmbeddingsResponse = response
            .json()
            .map_err(|e| EmbeddingError::BadResponse(e.to_string()))?;
        body.data.sort_by_key(|d| d.index);
        body.data
            .into_iter()
            .map(|d| EmbeddingVector::new(d.embedding))
            .collect()
    }
}

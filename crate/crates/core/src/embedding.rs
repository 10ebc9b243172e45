//! Label encoders and the exact cosine-similarity entity index.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::kg::{normalize_label, KnowledgeGraph};

pub const DEFAULT_TEST_DIM: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum EncodeError {
    #[error("encoder failed on `{label}`: {reason}")]
    Label { label: String, reason: String },
    #[error("encoder returned {got} vectors for {expected} labels")]
    CountMismatch { expected: usize, got: usize },
    #[error("vector for `{label}` has dimension {got}, expected {expected}")]
    Dimension {
        label: String,
        expected: usize,
        got: usize,
    },
    #[error("remote encoder: {0}")]
    Transport(String),
    #[error("cannot build an index over an empty graph")]
    EmptyGraph,
    #[error("embedding file: {0}")]
    File(String),
}

/// Maps a label to a unit-norm vector of fixed dimension.
///
/// Implementations must be deterministic. The empty label may map to the
/// zero vector; every other label must map to a vector of norm 1.
pub trait Encoder: Send + Sync {
    fn dim(&self) -> usize;

    fn encode_batch(&self, labels: &[String]) -> Result<Vec<Vec<f32>>, EncodeError>;

    fn encode(&self, label: &str) -> Result<Vec<f32>, EncodeError> {
        let mut out = self.encode_batch(&[label.to_string()])?;
        out.pop().ok_or(EncodeError::CountMismatch {
            expected: 1,
            got: 0,
        })
    }

    /// Identifies the encoder configuration, so a persisted index can be
    /// checked against the encoder that will query it.
    fn fingerprint(&self) -> String;
}

fn unit_normalize(mut v: Vec<f32>) -> Vec<f32> {
    let norm = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x = (f64::from(*x) / norm) as f32;
        }
    }
    v
}

fn check_vector(label: &str, v: &[f32], dim: usize) -> Result<(), EncodeError> {
    if v.len() != dim {
        return Err(EncodeError::Dimension {
            label: label.to_string(),
            expected: dim,
            got: v.len(),
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(EncodeError::Label {
            label: label.to_string(),
            reason: "non-finite component".into(),
        });
    }
    Ok(())
}

/// Deterministic encoder for tests and offline runs: the label (and seed)
/// are hashed into a ChaCha seed, `dim` standard-normal draws are taken and
/// the result is normalized. Similarity between distinct labels is
/// arbitrary but reproducible.
#[derive(Debug, Clone)]
pub struct HashEncoder {
    dim: usize,
    seed: u64,
}

impl HashEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "encoder dimension must be positive");
        Self { dim, seed }
    }

    fn vector(&self, label: &str) -> Vec<f32> {
        if label.is_empty() {
            return vec![0.0; self.dim];
        }
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(label.as_bytes());
        let digest: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        let raw: Vec<f32> = (0..self.dim)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                x as f32
            })
            .collect();
        unit_normalize(raw)
    }
}

impl Default for HashEncoder {
    fn default() -> Self {
        Self::new(DEFAULT_TEST_DIM, 0)
    }
}

impl Encoder for HashEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_batch(&self, labels: &[String]) -> Result<Vec<Vec<f32>>, EncodeError> {
        Ok(labels.iter().map(|l| self.vector(l)).collect())
    }

    fn fingerprint(&self) -> String {
        format!("hash:{}:{}", self.dim, self.seed)
    }
}

/// Precomputed vectors looked up by normalized label. Labels missing from
/// the table fall back to a [`HashEncoder`] of the same dimension.
#[derive(Debug, Clone)]
pub struct TableEncoder {
    dim: usize,
    table: HashMap<String, Vec<f32>>,
    fallback: HashEncoder,
    fingerprint: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct TableFile {
    dim: usize,
    vectors: std::collections::BTreeMap<String, Vec<f32>>,
}

impl TableEncoder {
    pub fn new(
        dim: usize,
        entries: impl IntoIterator<Item = (String, Vec<f32>)>,
    ) -> Result<Self, EncodeError> {
        let mut table = HashMap::new();
        let mut hasher = Sha256::new();
        let mut sorted: Vec<(String, Vec<f32>)> = entries
            .into_iter()
            .map(|(k, v)| (normalize_label(&k), v))
            .collect();
        sorted.sort_by(|a, b| a.0.cmp(&b.0));
        for (label, v) in sorted {
            check_vector(&label, &v, dim)?;
            hasher.update(label.as_bytes());
            for x in &v {
                hasher.update(x.to_le_bytes());
            }
            table.insert(label, unit_normalize(v));
        }
        let digest = hasher.finalize();
        let fingerprint = format!(
            "table:{dim}:{}",
            digest[..8].iter().map(|b| format!("{b:02x}")).collect::<String>()
        );
        Ok(Self {
            dim,
            table,
            fallback: HashEncoder::new(dim, 0),
            fingerprint,
        })
    }

    /// Loads `{"dim": d, "vectors": {"label": [..], ...}}`.
    pub fn from_json_path(path: &Path) -> Result<Self, EncodeError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EncodeError::File(format!("{}: {e}", path.display())))?;
        let file: TableFile = serde_json::from_str(&text)
            .map_err(|e| EncodeError::File(format!("{}: {e}", path.display())))?;
        Self::new(file.dim, file.vectors)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.table.contains_key(label)
    }
}

impl Encoder for TableEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_batch(&self, labels: &[String]) -> Result<Vec<Vec<f32>>, EncodeError> {
        Ok(labels
            .iter()
            .map(|l| match self.table.get(l) {
                Some(v) => v.clone(),
                None => self.fallback.vector(l),
            })
            .collect())
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }
}

/// Counting semaphore bounding in-flight remote requests.
#[derive(Debug)]
pub(crate) struct InFlight {
    permits: Mutex<usize>,
    released: Condvar,
}

pub(crate) struct InFlightGuard<'a>(&'a InFlight);

impl InFlight {
    pub(crate) fn new(limit: usize) -> Self {
        Self {
            permits: Mutex::new(limit.max(1)),
            released: Condvar::new(),
        }
    }

    pub(crate) fn acquire(&self) -> InFlightGuard<'_> {
        let mut permits = self.permits.lock().unwrap_or_else(|e| e.into_inner());
        while *permits == 0 {
            permits = self
                .released
                .wait(permits)
                .unwrap_or_else(|e| e.into_inner());
        }
        *permits -= 1;
        InFlightGuard(self)
    }
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut permits = self.0.permits.lock().unwrap_or_else(|e| e.into_inner());
        *permits += 1;
        self.0.released.notify_one();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteEncoderConfig {
    pub endpoint: String,
    pub dim: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_timeout_secs() -> u64 {
    30
}
fn default_retries() -> u32 {
    3
}
fn default_in_flight() -> usize {
    4
}
fn default_batch() -> usize {
    256
}

#[derive(Serialize)]
struct EncodeRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EncodeResponse {
    vectors: Vec<Vec<f32>>,
}

/// Client for an external embedding service speaking
/// `POST {texts: [..]} -> {vectors: [[..]]}`.
pub struct RemoteEncoder {
    config: RemoteEncoderConfig,
    agent: ureq::Agent,
    in_flight: InFlight,
}

impl RemoteEncoder {
    pub fn new(config: RemoteEncoderConfig) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build();
        let in_flight = InFlight::new(config.max_in_flight);
        Self {
            config,
            agent,
            in_flight,
        }
    }

    fn post_chunk(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EncodeError> {
        let _permit = self.in_flight.acquire();
        let mut attempt = 0;
        loop {
            let result = self
                .agent
                .post(&self.config.endpoint)
                .send_json(EncodeRequest { texts });
            let retryable = match result {
                Ok(resp) => {
                    let body: EncodeResponse = resp
                        .into_json()
                        .map_err(|e| EncodeError::Transport(format!("bad response body: {e}")))?;
                    return Ok(body.vectors);
                }
                Err(ureq::Error::Status(status, _)) => {
                    let err = EncodeError::Transport(format!("HTTP {status}"));
                    if !(status >= 500 || status == 429) {
                        return Err(err);
                    }
                    err
                }
                Err(e) => EncodeError::Transport(e.to_string()),
            };
            if attempt >= self.config.max_retries {
                return Err(retryable);
            }
            attempt += 1;
            std::thread::sleep(Duration::from_millis(100 * 2u64.pow(attempt.min(6))));
        }
    }
}

impl Encoder for RemoteEncoder {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn encode_batch(&self, labels: &[String]) -> Result<Vec<Vec<f32>>, EncodeError> {
        let mut out = Vec::with_capacity(labels.len());
        for chunk in labels.chunks(self.config.batch_size.max(1)) {
            let vectors = self.post_chunk(chunk)?;
            if vectors.len() != chunk.len() {
                return Err(EncodeError::CountMismatch {
                    expected: chunk.len(),
                    got: vectors.len(),
                });
            }
            for (label, v) in chunk.iter().zip(vectors) {
                check_vector(label, &v, self.config.dim)?;
                out.push(unit_normalize(v));
            }
        }
        Ok(out)
    }

    fn fingerprint(&self) -> String {
        format!("remote:{}:{}", self.config.dim, self.config.endpoint)
    }
}

/// A KG entity and its cosine similarity to a query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub label: String,
    pub score: f64,
}

/// Dense vectors for every entity of a graph, rows in lexicographic label
/// order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityIndex {
    dim: usize,
    labels: Vec<String>,
    vectors: Vec<f32>,
    encoder: String,
}

/// Cosine similarity of two unit vectors, accumulated in f64 and clamped
/// to [-1, 1].
pub fn cosine_unit(a: &[f32], b: &[f32]) -> f64 {
    let dot = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum::<f64>()
        .clamp(-1.0, 1.0);
    // `total_cmp` orders -0.0 below 0.0; fold them so zero ties fall
    // through to the label.
    dot + 0.0
}

/// Score descending, then label ascending.
pub fn neighbor_order(a: &Neighbor, b: &Neighbor) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.label.cmp(&b.label))
}

impl EntityIndex {
    pub fn build(kg: &KnowledgeGraph, encoder: &dyn Encoder) -> Result<Self, EncodeError> {
        if kg.entities().is_empty() {
            return Err(EncodeError::EmptyGraph);
        }
        let labels: Vec<String> = kg.entities().iter().cloned().collect();
        let dim = encoder.dim();
        let encoded = encoder.encode_batch(&labels)?;
        if encoded.len() != labels.len() {
            return Err(EncodeError::CountMismatch {
                expected: labels.len(),
                got: encoded.len(),
            });
        }
        let mut vectors = Vec::with_capacity(labels.len() * dim);
        for (label, v) in labels.iter().zip(encoded) {
            check_vector(label, &v, dim)?;
            vectors.extend_from_slice(&v);
        }
        Ok(Self {
            dim,
            labels,
            vectors,
            encoder: encoder.fingerprint(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn encoder_fingerprint(&self) -> &str {
        &self.encoder
    }

    pub fn vector(&self, row: usize) -> &[f32] {
        &self.vectors[row * self.dim..(row + 1) * self.dim]
    }

    pub fn position(&self, label: &str) -> Option<usize> {
        self.labels
            .binary_search_by(|probe| probe.as_str().cmp(label))
            .ok()
    }

    /// The `p` entities most similar to `query`, best first.
    ///
    /// The query is normalized first. If it names an indexed entity, that
    /// entity is excluded from the result. `p` larger than the candidate
    /// count returns every candidate. A zero-vector query yields an empty
    /// result.
    pub fn top_p_similar(
        &self,
        query: &str,
        encoder: &dyn Encoder,
        p: usize,
    ) -> Result<Vec<Neighbor>, EncodeError> {
        if p == 0 {
            return Ok(Vec::new());
        }
        let query = normalize_label(query);
        let q = encoder.encode(&query)?;
        check_vector(&query, &q, self.dim)?;
        if q.iter().all(|&x| x == 0.0) {
            tracing::warn!(query = %query, "zero query vector; no neighbors returned");
            return Ok(Vec::new());
        }
        let exclude = self.position(&query);

        let mut scored: Vec<Neighbor> = (0..self.labels.len())
            .filter(|&row| Some(row) != exclude)
            .map(|row| Neighbor {
                label: self.labels[row].clone(),
                score: cosine_unit(&q, self.vector(row)),
            })
            .collect();

        if p < scored.len() {
            scored.select_nth_unstable_by(p - 1, neighbor_order);
            scored.truncate(p);
        }
        scored.sort_by(neighbor_order);
        Ok(scored)
    }

    pub fn save_json(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string(self).map_err(std::io::Error::other)?;
        std::fs::write(path, text)
    }

    pub fn load_json(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }
}

//! Flat exact-scan vector index over guidebook segments.
//!
//! On disk an index is a directory with three files:
//!
//! - `manifest.json`: [`IndexManifest`], including SHA-256 checksums of the
//!   other two files
//! - `vectors.bin`: `u32` dimension, `u64` count, then `count * dimension`
//!   little-endian `f32` values, row-major
//! - `segments.jsonl`: one [`Segment`] per line, in row order

use std::collections::{BTreeSet, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embedding::{cosine_similarity, EmbeddingError, EmbeddingProvider, EmbeddingVector};
use crate::ingest::{Segment, SegmentId};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VECTORS_FILE: &str = "vectors.bin";
pub const SEGMENTS_FILE: &str = "segments.jsonl";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("index has no segments")]
    EmptyIndex,
    #[error("nothing to index")]
    EmptyInput,
    #[error("{segments} segments but {vectors} vectors")]
    LengthMismatch { segments: usize, vectors: usize },
    #[error("dimension mismatch: index has {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("index was built with provider `{index}`, query uses `{query}`")]
    ProviderTagMismatch { index: String, query: String },
    #[error("duplicate segment id {0}")]
    DuplicateSegment(SegmentId),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("corrupt index file {file}: {reason}")]
    CorruptIndexFile { file: String, reason: String },
    #[error("index i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IndexError + '_ {
    move |source| IndexError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub format_version: u32,
    pub index_id: String,
    pub book_ids: BTreeSet<String>,
    pub dimension: usize,
    pub segment_count: usize,
    pub provider_tag: String,
    pub created_at: DateTime<Utc>,
    pub vectors_sha256: String,
    pub segments_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub segment_id: SegmentId,
    pub score: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalPurpose {
    KnowledgeGap,
    CandidateContext,
    QuestionAnswerability,
}

/// One logged retrieval call. Anything shown to the patient with a citation
/// must cite a segment that appears in some record's hits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRecord {
    pub purpose: RetrievalPurpose,
    pub query: String,
    pub k: usize,
    pub hits: Vec<RetrievalHit>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    manifest: IndexManifest,
    segments: Vec<Segment>,
    /// Row-major, `segment_count * dimension` values.
    rows: Vec<f32>,
}

impl VectorIndex {
    /// Builds an index from segments and their embeddings (same order).
    pub fn build(
        segments: Vec<Segment>,
        vectors: &[EmbeddingVector],
        provider_tag: &str,
        created_at: DateTime<Utc>,
    ) -> Result<Self, IndexError> {
        if segments.len() != vectors.len() {
            return Err(IndexError::LengthMismatch {
                segments: segments.len(),
                vectors: vectors.len(),
            });
        }
        let first = vectors.first().ok_or(IndexError::EmptyInput)?;
        let dimension = first.dimension();
        let mut rows = Vec::with_capacity(vectors.len() * dimension);
        for v in vectors {
            if v.dimension() != dimension {
                return Err(IndexError::DimensionMismatch {
                    expected: dimension,
                    actual: v.dimension(),
                });
            }
            let row = v.to_f32();
            if row.iter().all(|&x| x == 0.0) {
                return Err(EmbeddingError::ZeroVector.into());
            }
            rows.extend(row);
        }
        Self::from_parts(segments, rows, dimension, provider_tag, created_at)
    }

    fn from_parts(
        segments: Vec<Segment>,
        rows: Vec<f32>,
        dimension: usize,
        provider_tag: &str,
        created_at: DateTime<Utc>,
    ) -> Result<Self, IndexError> {
        if segments.is_empty() {
            return Err(IndexError::EmptyInput);
        }
        let mut seen = HashSet::new();
        for s in &segments {
            if !seen.insert(&s.segment_id) {
                return Err(IndexError::DuplicateSegment(s.segment_id.clone()));
            }
        }
        let vectors_bytes = encode_vectors(dimension, segments.len(), &rows);
        let segments_bytes = encode_segments(&segments);
        let vectors_sha256 = hex::encode(Sha256::digest(&vectors_bytes));
        let segments_sha256 = hex::encode(Sha256::digest(&segments_bytes));

        let mut id_hasher = Sha256::new();
        id_hasher.update(provider_tag.as_bytes());
        id_hasher.update(vectors_sha256.as_bytes());
        id_hasher.update(segments_sha256.as_bytes());
        let index_id = hex::encode(&id_hasher.finalize()[..8]);

        let manifest = IndexManifest {
            format_version: FORMAT_VERSION,
            index_id,
            book_ids: segments.iter().map(|s| s.book_id.clone()).collect(),
            dimension,
            segment_count: segments.len(),
            provider_tag: provider_tag.to_owned(),
            created_at,
            vectors_sha256,
            segments_sha256,
        };
        Ok(Self {
            manifest,
            segments,
            rows,
        })
    }

    pub fn manifest(&self) -> &IndexManifest {
        &self.manifest
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.manifest.dimension
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.manifest.dimension;
        &self.rows[i * d..(i + 1) * d]
    }

    pub fn segment(&self, id: &SegmentId) -> Option<&Segment> {
        self.segments.iter().find(|s| &s.segment_id == id)
    }

    pub fn contains(&self, id: &SegmentId) -> bool {
        self.segment(id).is_some()
    }

    /// Embeds `query_text` with `provider` and returns the top `k` hits.
    pub fn retrieve(
        &self,
        query_text: &str,
        k: usize,
        provider: &dyn EmbeddingProvider,
    ) -> Result<Vec<RetrievalHit>, IndexError> {
        if self.is_empty() {
            return Err(IndexError::EmptyIndex);
        }
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        let tag = provider.provider_tag();
        if tag != self.manifest.provider_tag {
            return Err(IndexError::ProviderTagMismatch {
                index: self.manifest.provider_tag.clone(),
                query: tag,
            });
        }
        let mut vectors = crate::embedding::embed_texts(provider, &[query_text.to_owned()])?;
        let query = vectors.pop().ok_or(IndexError::EmptyInput)?;
        self.search(&query, k)
    }

    /// Exhaustive cosine ranking; ties broken by ascending segment id.
    pub fn search(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<RetrievalHit>, IndexError> {
        if self.is_empty() {
            return Err(IndexError::EmptyIndex);
        }
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        if query.dimension() != self.dimension() {
            return Err(IndexError::DimensionMismatch {
                expected: self.dimension(),
                actual: query.dimension(),
            });
        }
        // score in the same precision the rows are stored in
        let q: Vec<f64> = query.to_f32().into_iter().map(f64::from).collect();
        let mut row = vec![0.0f64; self.dimension()];
        let mut scored = Vec::with_capacity(self.len());
        for (i, segment) in self.segments.iter().enumerate() {
            for (dst, &src) in row.iter_mut().zip(self.row(i)) {
                *dst = f64::from(src);
            }
            let score = cosine_similarity(&q, &row)?;
            scored.push((score, &segment.segment_id));
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        Ok(scored
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(i, (score, id))| RetrievalHit {
                segment_id: id.clone(),
                score,
                rank: i + 1,
            })
            .collect())
    }

    /// A new index with every segment of `book_id` replaced by the given
    /// segments and vectors. Other books keep their stored rows.
    pub fn replace_book(
        current: Option<&VectorIndex>,
        book_id: &str,
        segments: Vec<Segment>,
        vectors: &[EmbeddingVector],
        provider_tag: &str,
        created_at: DateTime<Utc>,
    ) -> Result<VectorIndex, IndexError> {
        let incoming = VectorIndex::build(segments, vectors, provider_tag, created_at)?;
        let Some(current) = current else {
            return Ok(incoming);
        };
        if current.manifest.provider_tag != provider_tag {
            return Err(IndexError::ProviderTagMismatch {
                index: current.manifest.provider_tag.clone(),
                query: provider_tag.to_owned(),
            });
        }
        if current.dimension() != incoming.dimension() {
            return Err(IndexError::DimensionMismatch {
                expected: current.dimension(),
                actual: incoming.dimension(),
            });
        }
        let mut merged_segments = Vec::new();
        let mut merged_rows = Vec::new();
        for (i, s) in current.segments.iter().enumerate() {
            if s.book_id != book_id {
                merged_segments.push(s.clone());
                merged_rows.extend_from_slice(current.row(i));
            }
        }
        merged_segments.extend(incoming.segments);
        merged_rows.extend(incoming.rows);
        Self::from_parts(
            merged_segments,
            merged_rows,
            current.dimension(),
            provider_tag,
            created_at,
        )
    }
}

fn encode_vectors(dimension: usize, count: usize, rows: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + rows.len() * 4);
    out.extend_from_slice(&(dimension as u32).to_le_bytes());
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for v in rows {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn encode_segments(segments: &[Segment]) -> Vec<u8> {
    let mut out = Vec::new();
    for s in segments {
        serde_json::to_writer(&mut out, s).expect("segment serializes");
        out.push(b'\n');
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IndexError> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Writes the three index files into `dir`, creating it if needed.
pub fn save_index(index: &VectorIndex, dir: &Path) -> Result<(), IndexError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let m = &index.manifest;
    write_file(
        &dir.join(VECTORS_FILE),
        &encode_vectors(m.dimension, m.segment_count, &index.rows),
    )?;
    write_file(&dir.join(SEGMENTS_FILE), &encode_segments(&index.segments))?;
    let manifest = serde_json::to_vec_pretty(m).expect("manifest serializes");
    write_file(&dir.join(MANIFEST_FILE), &manifest)
}

fn corrupt(file: &str, reason: impl Into<String>) -> IndexError {
    IndexError::CorruptIndexFile {
        file: file.to_owned(),
        reason: reason.into(),
    }
}

pub fn load_index(dir: &Path) -> Result<VectorIndex, IndexError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest_bytes = fs::read(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: IndexManifest =
        serde_json::from_slice(&manifest_bytes).map_err(|e| corrupt(MANIFEST_FILE, e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(corrupt(
            MANIFEST_FILE,
            format!("unsupported format version {}", manifest.format_version),
        ));
    }

    let vectors_path = dir.join(VECTORS_FILE);
    let vectors_bytes = fs::read(&vectors_path).map_err(io_err(&vectors_path))?;
    if hex::encode(Sha256::digest(&vectors_bytes)) != manifest.vectors_sha256 {
        return Err(corrupt(VECTORS_FILE, "checksum mismatch"));
    }
    if vectors_bytes.len() < 12 {
        return Err(corrupt(VECTORS_FILE, "truncated header"));
    }
    let dimension = u32::from_le_bytes(vectors_bytes[0..4].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(vectors_bytes[4..12].try_into().unwrap()) as usize;
    if dimension != manifest.dimension || count != manifest.segment_count {
        return Err(corrupt(VECTORS_FILE, "header disagrees with manifest"));
    }
    let body = &vectors_bytes[12..];
    if body.len() != dimension * count * 4 {
        return Err(corrupt(VECTORS_FILE, "body length disagrees with header"));
    }
    let rows: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if rows.iter().any(|v| !v.is_finite()) {
        return Err(corrupt(VECTORS_FILE, "non-finite value"));
    }

    let segments_path = dir.join(SEGMENTS_FILE);
    let segments_bytes = fs::read(&segments_path).map_err(io_err(&segments_path))?;
    if hex::encode(Sha256::digest(&segments_bytes)) != manifest.segments_sha256 {
        return Err(corrupt(SEGMENTS_FILE, "checksum mismatch"));
    }
    let mut segments = Vec::with_capacity(count);
    for (n, line) in BufReader::new(segments_bytes.as_slice()).lines().enumerate() {
        let line = line.map_err(|e| corrupt(SEGMENTS_FILE, e.to_string()))?;
        let seg: Segment =
            serde_json::from_str(&line).map_err(|e| corrupt(SEGMENTS_FILE, format!("line {}: {e}", n + 1)))?;
        segments.push(seg);
    }
    if segments.len() != count {
        return Err(corrupt(SEGMENTS_FILE, "segment count disagrees with manifest"));
    }

    let rebuilt = VectorIndex::rebuild_checked(segments, rows, &manifest)?;
    Ok(rebuilt)
}

impl VectorIndex {
    fn rebuild_checked(segments: Vec<Segment>, rows: Vec<f32>, manifest: &IndexManifest) -> Result<Self, IndexError> {
        let index = Self::from_parts(
            segments,
            rows,
            manifest.dimension,
            &manifest.provider_tag,
            manifest.created_at,
        )?;
        if &index.manifest != manifest {
            return Err(corrupt(MANIFEST_FILE, "manifest does not describe the stored data"));
        }
        Ok(index)
    }
}

/// The index currently served to readers. Swapping is atomic: readers hold
/// an `Arc` to whichever version they picked up.
#[derive(Debug, Default)]
pub struct LiveIndex {
    current: RwLock<Option<Arc<VectorIndex>>>,
}

impl LiveIndex {
    pub fn new(index: Option<VectorIndex>) -> Self {
        Self {
            current: RwLock::new(index.map(Arc::new)),
        }
    }

    pub fn current(&self) -> Option<Arc<VectorIndex>> {
        self.current.read().expect("live index lock poisoned").clone()
    }

    pub fn swap(&self, index: VectorIndex) -> Option<Arc<VectorIndex>> {
        self.current
            .write()
            .expect("live index lock poisoned")
            .replace(Arc::new(index))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::StubEmbedder;
    use crate::ingest::CharSpan;
    use chrono::TimeZone;

    fn seg(book: &str, page: u32, text: &str) -> Segment {
        let span = CharSpan {
            start: 0,
            end: text.chars().count(),
        };
        Segment {
            segment_id: SegmentId::derive(book, page, span),
            book_id: book.into(),
            page_number: page,
            char_span: span,
            text: text.into(),
            token_estimate: 1,
        }
    }

    fn ts() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2026, 1, 2, 3, 4, 5).unwrap()
    }

    fn small_index() -> (VectorIndex, StubEmbedder) {
        let stub = StubEmbedder::default();
        let segs: Vec<Segment> = [
            "active surveillance monitoring",
            "surgery removes the prostate",
            "radiation therapy targets tumors",
        ]
        .iter()
        .enumerate()
        .map(|(i, t)| seg("b", i as u32 + 1, t))
        .collect();
        let texts: Vec<String> = segs.iter().map(|s| s.text.clone()).collect();
        let vectors = stub.embed_batch(&texts).unwrap();
        (
            VectorIndex::build(segs, &vectors, &stub.provider_tag(), ts()).unwrap(),
            stub,
        )
    }

    #[test]
    fn identity_retrieval_ranks_first() {
        let (index, stub) = small_index();
        let hits = index.retrieve("surgery removes the prostate", 2, &stub).unwrap();
        assert_eq!(hits[0].segment_id, index.segments()[1].segment_id);
        assert!((hits[0].score - 1.0).abs() <= 1e-9);
        assert_eq!(hits[0].rank, 1);
        assert_eq!(hits[1].rank, 2);
    }

    #[test]
    fn k_is_clamped_to_corpus() {
        let (index, stub) = small_index();
        let hits = index.retrieve("anything", 50, &stub).unwrap();
        assert_eq!(hits.len(), 3);
        assert!(hits.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn ties_break_by_segment_id() {
        let stub = StubEmbedder::default();
        let segs = vec![
            seg("b", 1, "same words"),
            seg("b", 2, "same words"),
            seg("b", 3, "same words"),
        ];
        let vectors = stub.embed_batch(&vec!["same words".to_string(); 3]).unwrap();
        let index = VectorIndex::build(segs, &vectors, &stub.provider_tag(), ts()).unwrap();
        let hits = index.retrieve("same words", 3, &stub).unwrap();
        let ids: Vec<_> = hits.iter().map(|h| h.segment_id.clone()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
    }

    #[test]
    fn provider_mismatch_rejected() {
        let (index, _) = small_index();
        let other = StubEmbedder::new(16);
        assert!(matches!(
            index.retrieve("x", 1, &other),
            Err(IndexError::ProviderTagMismatch { .. })
        ));
    }

    #[test]
    fn build_errors() {
        let stub = StubEmbedder::default();
        assert!(matches!(
            VectorIndex::build(vec![], &[], "t", ts()),
            Err(IndexError::EmptyInput)
        ));
        let a = stub.embed_one("a");
        let b = StubEmbedder::new(8).embed_one("b");
        assert!(matches!(
            VectorIndex::build(vec![seg("b", 1, "a"), seg("b", 2, "b")], &[a.clone(), b], "t", ts()),
            Err(IndexError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            VectorIndex::build(vec![seg("b", 1, "a")], &[a.clone(), a], "t", ts()),
            Err(IndexError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn save_load_round_trip_and_rebuild_is_byte_identical() {
        let (index, _) = small_index();
        let (again, _) = small_index();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        save_index(&index, d1.path()).unwrap();
        save_index(&again, d2.path()).unwrap();
        for f in [MANIFEST_FILE, VECTORS_FILE, SEGMENTS_FILE] {
            assert_eq!(
                fs::read(d1.path().join(f)).unwrap(),
                fs::read(d2.path().join(f)).unwrap()
            );
        }
        let loaded = load_index(d1.path()).unwrap();
        assert_eq!(loaded, index);
    }

    #[test]
    fn vector_file_layout() {
        let (index, _) = small_index();
        let dir = tempfile::tempdir().unwrap();
        save_index(&index, dir.path()).unwrap();
        let bytes = fs::read(dir.path().join(VECTORS_FILE)).unwrap();
        assert_eq!(
            u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize,
            index.dimension()
        );
        assert_eq!(u64::from_le_bytes(bytes[4..12].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 12 + 3 * index.dimension() * 4);
        let first = f32::from_le_bytes(bytes[12..16].try_into().unwrap());
        assert_eq!(first.to_bits(), index.row(0)[0].to_bits());
    }

    #[test]
    fn tampered_vectors_detected() {
        let (index, _) = small_index();
        let dir = tempfile::tempdir().unwrap();
        save_index(&index, dir.path()).unwrap();
        let path = dir.path().join(VECTORS_FILE);
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_index(dir.path()),
            Err(IndexError::CorruptIndexFile { .. })
        ));
    }

    #[test]
    fn replace_book_keeps_other_books() {
        let (index, stub) = small_index();
        let extra = vec![seg("c", 1, "nutrition guidance for patients")];
        let v = stub.embed_batch(&[extra[0].text.clone()]).unwrap();
        let merged = VectorIndex::replace_book(Some(&index), "c", extra, &v, &stub.provider_tag(), ts()).unwrap();
        assert_eq!(merged.len(), 4);
        let replaced = VectorIndex::replace_book(
            Some(&merged),
            "b",
            vec![seg("b", 9, "new page")],
            &stub.embed_batch(&["new page".into()]).unwrap(),
            &stub.provider_tag(),
            ts(),
        )
        .unwrap();
        assert_eq!(replaced.len(), 2);
        assert_eq!(
            replaced.manifest().book_ids,
            ["b".to_string(), "c".to_string()].into_iter().collect()
        );
    }

    #[test]
    fn live_index_swaps() {
        let (index, _) = small_index();
        let live = LiveIndex::default();
        assert!(live.current().is_none());
        let held = {
            live.swap(index.clone());
            live.current().unwrap()
        };
        live.swap(index);
        assert_eq!(held.len(), 3);
    }
}

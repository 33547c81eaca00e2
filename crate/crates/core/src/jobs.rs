//! Background book ingestion and the on-disk home of the live index.
//!
//! Published indexes live in `<root>/<index_id>/`; `<root>/CURRENT` names
//! the one to load at startup and is replaced atomically.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{embed_texts, EmbeddingProvider};
use crate::index::{load_index, save_index, IndexError, LiveIndex, VectorIndex};
use crate::ingest::{extract_book, scan_book_folder, segment_text, IngestReport, PageExtractor, SegmentationConfig};

pub const DEFAULT_WORKERS: usize = 2;
pub const EMBED_BATCH: usize = 32;
const CURRENT_FILE: &str = "CURRENT";

#[derive(Debug, Error)]
pub enum JobError {
    #[error("book `{book_id}` already has an ingestion in progress ({job_id})")]
    BookBusy { book_id: String, job_id: String },
    #[error("invalid book id `{0}`")]
    InvalidBookId(String),
    #[error("ingestion workers have shut down")]
    ShutDown,
}

#[derive(Debug, Error)]
pub enum IndexStoreError {
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn store_io(path: &Path) -> impl FnOnce(std::io::Error) -> IndexStoreError + '_ {
    move |source| IndexStoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Persists published indexes and keeps the served one in memory.
pub struct IndexStore {
    root: PathBuf,
    live: Arc<LiveIndex>,
    publish: Mutex<()>,
}

impl IndexStore {
    /// Opens `root`, loading the index named by `CURRENT` if there is one.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, IndexStoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(store_io(&root))?;
        let pointer = root.join(CURRENT_FILE);
        let current = match fs::read_to_string(&pointer) {
            Ok(id) => Some(load_index(&root.join(id.trim()))?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(store_io(&pointer)(e)),
        };
        Ok(Self {
            root,
            live: Arc::new(LiveIndex::new(current)),
            publish: Mutex::new(()),
        })
    }

    pub fn live(&self) -> &Arc<LiveIndex> {
        &self.live
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Replaces `book_id` in the served index, writes the new version and
    /// swaps it in. Concurrent publishes are serialized.
    pub fn publish_book(
        &self,
        book_id: &str,
        segments: Vec<crate::ingest::Segment>,
        vectors: &[crate::embedding::EmbeddingVector],
        provider_tag: &str,
        created_at: DateTime<Utc>,
    ) -> Result<Arc<VectorIndex>, IndexStoreError> {
        let _guard = self.publish.lock().unwrap_or_else(|e| e.into_inner());
        let previous = self.live.current();
        let next = VectorIndex::replace_book(
            previous.as_deref(),
            book_id,
            segments,
            vectors,
            provider_tag,
            created_at,
        )?;
        let id = next.manifest().index_id.clone();
        save_index(&next, &self.root.join(&id))?;

        let pointer = self.root.join(CURRENT_FILE);
        let tmp = self.root.join(format!("{CURRENT_FILE}.tmp"));
        fs::write(&tmp, &id).map_err(store_io(&tmp))?;
        fs::rename(&tmp, &pointer).map_err(store_io(&pointer))?;
        self.live.swap(next);

        if let Some(prev) = previous {
            let old = &prev.manifest().index_id;
            if old != &id {
                if let Err(e) = fs::remove_dir_all(self.root.join(old)) {
                    tracing::warn!(index_id = %old, error = %e, "could not remove superseded index");
                }
            }
        }
        Ok(self.live.current().expect("just published"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JobStatus {
    Pending,
    Extracting,
    Segmenting,
    Embedding,
    Indexing,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestJob {
    pub job_id: String,
    pub book_id: String,
    pub status: JobStatus,
    /// Fraction in [0, 1]; never decreases.
    pub progress: f64,
    pub report: Option<IngestReport>,
    pub error: Option<String>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

#[derive(Debug, Clone)]
pub struct IngestRequest {
    pub book_id: String,
    pub source_dir: PathBuf,
    pub config: SegmentationConfig,
}

pub fn valid_book_id(id: &str) -> bool {
    (1..=64).contains(&id.len())
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.'))
        && !id.starts_with('.')
}

pub struct IngestContext {
    pub extractor: Arc<dyn PageExtractor>,
    pub embedder: Arc<dyn EmbeddingProvider>,
    pub store: Arc<IndexStore>,
}

/// Runs one ingestion to completion, reporting `(status, progress)` as it
/// goes. Progress passed to `progress` only ever increases.
pub fn run_ingest(
    req: &IngestRequest,
    ctx: &IngestContext,
    progress: &mut dyn FnMut(JobStatus, f64),
) -> Result<IngestReport, String> {
    req.config.validate().map_err(|e| e.to_string())?;
    progress(JobStatus::Extracting, 0.0);
    let folder = scan_book_folder(&req.source_dir).map_err(|e| e.to_string())?;
    let extracted = extract_book(&req.book_id, &folder, ctx.extractor.as_ref(), |done, total| {
        progress(JobStatus::Extracting, 0.05 + 0.45 * done as f64 / total.max(1) as f64)
    });

    progress(JobStatus::Segmenting, 0.5);
    let segments = segment_text(&extracted.pages, &req.config).map_err(|e| e.to_string())?;
    if segments.is_empty() {
        return Err(format!(
            "no text could be extracted from {} page(s)",
            folder.pages.len()
        ));
    }

    progress(JobStatus::Embedding, 0.55);
    let mut vectors = Vec::with_capacity(segments.len());
    for chunk in segments.chunks(EMBED_BATCH) {
        let texts: Vec<String> = chunk.iter().map(|s| s.text.clone()).collect();
        vectors.extend(embed_texts(ctx.embedder.as_ref(), &texts).map_err(|e| e.to_string())?);
        progress(
            JobStatus::Embedding,
            0.55 + 0.35 * vectors.len() as f64 / segments.len() as f64,
        );
    }

    progress(JobStatus::Indexing, 0.92);
    let report = IngestReport {
        book_id: req.book_id.clone(),
        pages_found: folder.pages.len(),
        pages_extracted: extracted.pages.len(),
        pages_failed: extracted.failures.len(),
        segments: segments.len(),
        skipped_files: folder.skipped,
        failures: extracted.failures,
    };
    ctx.store
        .publish_book(
            &req.book_id,
            segments,
            &vectors,
            &ctx.embedder.provider_tag(),
            Utc::now(),
        )
        .map_err(|e| e.to_string())?;
    Ok(report)
}

type Jobs = Arc<Mutex<HashMap<String, IngestJob>>>;

fn update(jobs: &Jobs, job_id: &str, f: impl FnOnce(&mut IngestJob)) {
    let mut jobs = jobs.lock().unwrap_or_else(|e| e.into_inner());
    if let Some(job) = jobs.get_mut(job_id) {
        f(job);
        job.updated_at = Utc::now();
    }
}

/// Queue of ingestion jobs served by a fixed pool of worker threads.
pub struct JobRegistry {
    jobs: Jobs,
    sender: Mutex<Option<mpsc::Sender<(String, IngestRequest)>>>,
    workers: Vec<JoinHandle<()>>,
}

impl JobRegistry {
    pub fn new(ctx: Arc<IngestContext>, workers: usize) -> Self {
        let (tx, rx) = mpsc::channel::<(String, IngestRequest)>();
        let rx = Arc::new(Mutex::new(rx));
        let jobs: Jobs = Arc::default();
        let handles = (0..workers.max(1))
            .map(|n| {
                let rx = rx.clone();
                let jobs = jobs.clone();
                let ctx = ctx.clone();
                std::thread::Builder::new()
                    .name(format!("ingest-{n}"))
                    .spawn(move || loop {
                        let next = rx.lock().unwrap_or_else(|e| e.into_inner()).recv();
                        let Ok((job_id, req)) = next else { break };
                        run_job(&jobs, &job_id, &req, &ctx);
                    })
                    .expect("spawn ingest worker")
            })
            .collect();
        Self {
            jobs,
            sender: Mutex::new(Some(tx)),
            workers: handles,
        }
    }

    pub fn submit(&self, req: IngestRequest) -> Result<IngestJob, JobError> {
        if !valid_book_id(&req.book_id) {
            return Err(JobError::InvalidBookId(req.book_id));
        }
        let now = Utc::now();
        let job = IngestJob {
            job_id: uuid::Uuid::new_v4().to_string(),
            book_id: req.book_id.clone(),
            status: JobStatus::Pending,
            progress: 0.0,
            report: None,
            error: None,
            created_at: now,
            updated_at: now,
        };
        {
            let mut jobs = self.jobs.lock().unwrap_or_else(|e| e.into_inner());
            if let Some(busy) = jobs
                .values()
                .find(|j| j.book_id == req.book_id && !j.status.is_terminal())
            {
                return Err(JobError::BookBusy {
                    book_id: req.book_id,
                    job_id: busy.job_id.clone(),
                });
            }
            jobs.insert(job.job_id.clone(), job.clone());
        }
        let sender = self.sender.lock().unwrap_or_else(|e| e.into_inner());
        let sent = sender.as_ref().map(|s| s.send((job.job_id.clone(), req)));
        if !matches!(sent, Some(Ok(()))) {
            self.jobs.lock().unwrap_or_else(|e| e.into_inner()).remove(&job.job_id);
            return Err(JobError::ShutDown);
        }
        tracing::info!(job_id = %job.job_id, book_id = %job.book_id, "ingestion queued");
        Ok(job)
    }

    pub fn get(&self, job_id: &str) -> Option<IngestJob> {
        self.jobs.lock().unwrap_or_else(|e| e.into_inner()).get(job_id).cloned()
    }
}

impl Drop for JobRegistry {
    fn drop(&mut self) {
        self.sender.lock().unwrap_or_else(|e| e.into_inner()).take();
        for handle in self.workers.drain(..) {
            let _ = handle.join();
        }
    }
}

fn run_job(jobs: &Jobs, job_id: &str, req: &IngestRequest, ctx: &IngestContext) {
    let mut on_progress = |status: JobStatus, p: f64| {
        update(jobs, job_id, |job| {
            job.status = status;
            job.progress = job.progress.max(p.clamp(0.0, 1.0));
        })
    };
    let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run_ingest(req, ctx, &mut on_progress)))
        .unwrap_or_else(|_| Err("ingestion worker panicked".to_owned()));
    match outcome {
        Ok(report) => {
            tracing::info!(job_id, book_id = %req.book_id, segments = report.segments, "ingestion done");
            update(jobs, job_id, |job| {
                job.status = JobStatus::Done;
                job.progress = 1.0;
                job.report = Some(report);
            });
        }
        Err(cause) => {
            tracing::error!(job_id, book_id = %req.book_id, %cause, "ingestion failed");
            update(jobs, job_id, |job| {
                job.status = JobStatus::Failed;
                job.error = Some(cause);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::StubEmbedder;
    use crate::ingest::DefaultExtractor;
    use std::time::{Duration, Instant};

    fn ctx(root: &Path) -> Arc<IngestContext> {
        Arc::new(IngestContext {
            extractor: Arc::new(DefaultExtractor),
            embedder: Arc::new(StubEmbedder::new(64)),
            store: Arc::new(IndexStore::open(root.join("indexes")).unwrap()),
        })
    }

    fn wait(reg: &JobRegistry, id: &str) -> IngestJob {
        let start = Instant::now();
        loop {
            let job = reg.get(id).unwrap();
            if job.status.is_terminal() {
                return job;
            }
            assert!(start.elapsed() < Duration::from_secs(30));
            std::thread::sleep(Duration::from_millis(10));
        }
    }

    #[test]
    fn ingest_publishes_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let book = dir.path().join("book");
        fs::create_dir(&book).unwrap();
        fs::write(book.join("1.txt"), "Radiation therapy uses high energy beams.").unwrap();
        fs::write(
            book.join("2.txt"),
            "Surgery removes the tumor.\n\nRecovery takes weeks.",
        )
        .unwrap();
        let ctx = ctx(dir.path());
        let reg = JobRegistry::new(ctx.clone(), 2);
        let job = reg
            .submit(IngestRequest {
                book_id: "guide".into(),
                source_dir: book,
                config: SegmentationConfig::default(),
            })
            .unwrap();
        let job = wait(&reg, &job.job_id);
        assert_eq!(job.status, JobStatus::Done, "{:?}", job.error);
        assert_eq!(job.progress, 1.0);
        let report = job.report.unwrap();
        assert_eq!((report.pages_found, report.pages_extracted), (2, 2));

        let live = ctx.store.live().current().unwrap();
        let reopened = IndexStore::open(dir.path().join("indexes")).unwrap();
        assert_eq!(*reopened.live().current().unwrap(), *live);
    }

    #[test]
    fn failed_job_reports_cause() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty");
        fs::create_dir(&empty).unwrap();
        let reg = JobRegistry::new(ctx(dir.path()), 1);
        let job = reg
            .submit(IngestRequest {
                book_id: "b".into(),
                source_dir: empty,
                config: SegmentationConfig::default(),
            })
            .unwrap();
        let job = wait(&reg, &job.job_id);
        assert_eq!(job.status, JobStatus::Failed);
        assert!(job.error.unwrap().contains("no page files"));
    }

    #[test]
    fn book_ids_are_checked() {
        assert!(valid_book_id("guide-2024_v1.0"));
        assert!(!valid_book_id("../etc"));
        assert!(!valid_book_id(""));
        assert!(!valid_book_id(".hidden"));
    }
}

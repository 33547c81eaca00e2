//! Guidebook ingestion: per-page folder scanning, text extraction and
//! segmentation into provenance-tagged text segments.
//!
//! A guidebook is a directory of files named `<page_number>.<ext>` with
//! `ext` one of `pdf` or `txt`. Pages are ordered numerically by stem.
//! Extracted text is normalized (whitespace runs collapse to one space,
//! blank-line paragraph breaks become a single `\n`) and then cut into
//! overlapping segments whose character spans point back into the
//! normalized page text.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no page files found in {0}")]
    EmptyFolder(PathBuf),
    #[error("page {page} appears twice ({first} and {second})")]
    DuplicatePageNumber { page: u32, first: String, second: String },
    #[error("unparseable document: {0}")]
    UnparseableDocument(String),
    #[error("invalid segmentation config: {0}")]
    InvalidConfig(String),
}

impl IngestError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        IngestError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PageFormat {
    Pdf,
    Txt,
}

impl PageFormat {
    fn from_extension(ext: &str) -> Option<Self> {
        match ext.to_ascii_lowercase().as_str() {
            "pdf" => Some(PageFormat::Pdf),
            "txt" => Some(PageFormat::Txt),
            _ => None,
        }
    }
}

/// A page file discovered in a book folder, not yet extracted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PageFile {
    pub page_number: u32,
    pub path: PathBuf,
    pub format: PageFormat,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedFile {
    pub file_name: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct BookFolder {
    pub pages: Vec<PageFile>,
    pub skipped: Vec<SkippedFile>,
}

/// Lists the page files of a guidebook folder in numeric page order.
///
/// Files that do not follow the `<page_number>.<pdf|txt>` rule are skipped
/// and reported rather than failing the scan. Subdirectories are skipped.
pub fn scan_book_folder(path: &Path) -> Result<BookFolder, IngestError> {
    let entries = fs::read_dir(path).map_err(|e| IngestError::io(path, e))?;
    let mut pages: BTreeMap<u32, PageFile> = BTreeMap::new();
    let mut skipped = Vec::new();

    for entry in entries {
        let entry = entry.map_err(|e| IngestError::io(path, e))?;
        let file_path = entry.path();
        let file_name = entry.file_name().to_string_lossy().into_owned();
        if !file_path.is_file() {
            skipped.push(SkippedFile {
                file_name,
                reason: "not a regular file".into(),
            });
            continue;
        }
        match parse_page_file_name(&file_name) {
            Ok((page_number, format)) => {
                if let Some(existing) = pages.get(&page_number) {
                    let first = existing
                        .path
                        .file_name()
                        .map(|n| n.to_string_lossy().into_owned())
                        .unwrap_or_default();
                    let (first, second) = if first <= file_name {
                        (first, file_name)
                    } else {
                        (file_name, first)
                    };
                    return Err(IngestError::DuplicatePageNumber {
                        page: page_number,
                        first,
                        second,
                    });
                }
                pages.insert(
                    page_number,
                    PageFile {
                        page_number,
                        path: file_path,
                        format,
                    },
                );
            }
            Err(reason) => skipped.push(SkippedFile { file_name, reason }),
        }
    }

    if pages.is_empty() {
        return Err(IngestError::EmptyFolder(path.to_path_buf()));
    }
    skipped.sort_by(|a, b| a.file_name.cmp(&b.file_name));
    Ok(BookFolder {
        pages: pages.into_values().collect(),
        skipped,
    })
}

fn parse_page_file_name(name: &str) -> Result<(u32, PageFormat), String> {
    let (stem, ext) = name
        .rsplit_once('.')
        .ok_or_else(|| "missing file extension".to_string())?;
    let format = PageFormat::from_extension(ext)
        .ok_or_else(|| format!("unsupported extension `{ext}` (expected pdf or txt)"))?;
    if stem.is_empty() || !stem.bytes().all(|b| b.is_ascii_digit()) {
        return Err("file stem is not a page number".into());
    }
    match stem.parse::<u32>() {
        Ok(0) => Err("page numbers start at 1".into()),
        Ok(n) => Ok((n, format)),
        Err(_) => Err("page number out of range".into()),
    }
}

/// Raw text extraction for one page. Implementations return unnormalized
/// text; [`extract_page_text`] applies whitespace normalization.
pub trait PageExtractor: Send + Sync {
    fn extract_raw(&self, format: PageFormat, bytes: &[u8]) -> Result<String, IngestError>;
}

/// Plain-text pages are read as UTF-8; PDF pages go through `pdf-extract`.
#[derive(Debug, Default, Clone, Copy)]
pub struct DefaultExtractor;

impl PageExtractor for DefaultExtractor {
    fn extract_raw(&self, format: PageFormat, bytes: &[u8]) -> Result<String, IngestError> {
        match format {
            PageFormat::Txt => std::str::from_utf8(bytes)
                .map(str::to_owned)
                .map_err(|e| IngestError::UnparseableDocument(format!("invalid UTF-8: {e}"))),
            PageFormat::Pdf => extract_pdf(bytes),
        }
    }
}

fn extract_pdf(bytes: &[u8]) -> Result<String, IngestError> {
    // pdf-extract panics on some malformed inputs
    let result = panic::catch_unwind(AssertUnwindSafe(|| pdf_extract::extract_text_from_mem(bytes)));
    match result {
        Ok(Ok(text)) => Ok(unwrap_lines(&text)),
        Ok(Err(e)) => Err(IngestError::UnparseableDocument(e.to_string())),
        Err(_) => Err(IngestError::UnparseableDocument(
            "pdf extractor aborted on malformed input".into(),
        )),
    }
}

/// Extracts and normalizes the running text of one page.
pub fn extract_page_text(
    extractor: &dyn PageExtractor,
    format: PageFormat,
    bytes: &[u8],
) -> Result<String, IngestError> {
    extractor
        .extract_raw(format, bytes)
        .map(|raw| normalize_whitespace(&raw))
}

/// Collapses whitespace runs: a run containing a line break becomes one
/// `\n` (paragraph break), any other run one space. Leading and trailing
/// whitespace is dropped. Idempotent.
pub fn normalize_whitespace(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut pending: Option<char> = None;
    for c in raw.chars() {
        if c.is_whitespace() {
            if c == '\n' || c == '\r' {
                pending = Some('\n');
            } else if pending.is_none() {
                pending = Some(' ');
            }
        } else {
            if let Some(sep) = pending.take() {
                if !out.is_empty() {
                    out.push(sep);
                }
            }
            out.push(c);
        }
    }
    out
}

/// Joins lines wrapped inside a paragraph. Blank lines stay as paragraph
/// breaks. PDF text arrives hard-wrapped, one visual line per `\n`.
pub fn unwrap_lines(raw: &str) -> String {
    let mut paragraphs: Vec<String> = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in raw.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                paragraphs.push(current.join(" "));
                current.clear();
            }
        } else {
            current.push(line);
        }
    }
    if !current.is_empty() {
        paragraphs.push(current.join(" "));
    }
    paragraphs.join("\n\n")
}

/// One page of a guidebook after extraction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageDocument {
    pub book_id: String,
    pub page_number: u32,
    pub raw_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SegmentId(pub String);

impl SegmentId {
    /// Stable id from the segment's provenance.
    pub fn derive(book_id: &str, page_number: u32, span: CharSpan) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(book_id.as_bytes());
        hasher.update([0u8]);
        hasher.update(page_number.to_le_bytes());
        hasher.update((span.start as u64).to_le_bytes());
        hasher.update((span.end as u64).to_le_bytes());
        let digest = hasher.finalize();
        SegmentId(hex::encode(&digest[..8]))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SegmentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SegmentId {
    fn from(s: &str) -> Self {
        SegmentId(s.to_owned())
    }
}

/// Half-open range of character (not byte) offsets into normalized page text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharSpan {
    pub start: usize,
    pub end: usize,
}

impl CharSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub segment_id: SegmentId,
    pub book_id: String,
    pub page_number: u32,
    pub char_span: CharSpan,
    pub text: String,
    pub token_estimate: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundaryPreference {
    SentenceEnd,
    WhitespaceOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationConfig {
    pub max_chars: usize,
    pub overlap_chars: usize,
    pub boundary_preference: BoundaryPreference,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            max_chars: 1200,
            overlap_chars: 200,
            boundary_preference: BoundaryPreference::SentenceEnd,
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<(), IngestError> {
        // a 1-char window could produce a whitespace-only segment
        if self.max_chars < 2 {
            return Err(IngestError::InvalidConfig(format!(
                "max_chars must be at least 2 (got {})",
                self.max_chars
            )));
        }
        if self.overlap_chars >= self.max_chars {
            return Err(IngestError::InvalidConfig(format!(
                "overlap_chars ({}) must be smaller than max_chars ({})",
                self.overlap_chars, self.max_chars
            )));
        }
        Ok(())
    }
}

/// Cuts pages into overlapping segments. Segments never cross a page.
pub fn segment_text(pages: &[PageDocument], config: &SegmentationConfig) -> Result<Vec<Segment>, IngestError> {
    config.validate()?;
    let mut segments = Vec::new();
    for page in pages {
        let normalized = normalize_whitespace(&page.raw_text);
        let chars: Vec<char> = normalized.chars().collect();
        for span in split_spans(&chars, config) {
            let text: String = chars[span.start..span.end].iter().collect();
            segments.push(Segment {
                segment_id: SegmentId::derive(&page.book_id, page.page_number, span),
                book_id: page.book_id.clone(),
                page_number: page.page_number,
                char_span: span,
                token_estimate: span.len().div_ceil(4) as u32,
                text,
            });
        }
    }
    Ok(segments)
}

fn split_spans(chars: &[char], config: &SegmentationConfig) -> Vec<CharSpan> {
    let n = chars.len();
    let mut spans = Vec::new();
    if n == 0 {
        return spans;
    }
    let mut start = 0;
    loop {
        if n - start <= config.max_chars {
            spans.push(CharSpan { start, end: n });
            return spans;
        }
        let limit = start + config.max_chars;
        // boundaries at or below `floor` would leave no room for the overlap
        let floor = start + config.overlap_chars;
        let end = choose_end(chars, floor, limit, config.boundary_preference);
        spans.push(CharSpan { start, end });

        let back = end - config.overlap_chars;
        start = match config.boundary_preference {
            BoundaryPreference::WhitespaceOnly => back,
            BoundaryPreference::SentenceEnd => snap_to_word_start(chars, back, end),
        };
    }
}

fn is_word_end(chars: &[char], p: usize) -> bool {
    !chars[p - 1].is_whitespace() && chars[p].is_whitespace()
}

fn is_sentence_end(chars: &[char], p: usize) -> bool {
    let prev = chars[p - 1];
    if prev.is_whitespace() {
        return false;
    }
    chars[p] == '\n' || (matches!(prev, '.' | '!' | '?') && chars[p].is_whitespace())
}

/// Picks a segment end in `(floor, limit]`; `limit < chars.len()` holds.
fn choose_end(chars: &[char], floor: usize, limit: usize, pref: BoundaryPreference) -> usize {
    let candidates = (floor + 1..=limit).rev();
    if pref == BoundaryPreference::SentenceEnd {
        if let Some(p) = candidates.clone().find(|&p| is_sentence_end(chars, p)) {
            return p;
        }
    }
    candidates.clone().find(|&p| is_word_end(chars, p)).unwrap_or(limit)
}

fn snap_to_word_start(chars: &[char], from: usize, end: usize) -> usize {
    (from..end)
        .find(|&q| q == 0 || chars[q - 1].is_whitespace())
        .unwrap_or(end)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageFailure {
    pub page_number: u32,
    pub file_name: String,
    pub reason: String,
}

/// Summary of one book ingestion, serialized as JSON for operators.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub book_id: String,
    pub pages_found: usize,
    pub pages_extracted: usize,
    pub pages_failed: usize,
    pub segments: usize,
    pub skipped_files: Vec<SkippedFile>,
    pub failures: Vec<PageFailure>,
}

/// Result of extracting every page in a scanned folder.
#[derive(Debug, Clone)]
pub struct ExtractedBook {
    pub pages: Vec<PageDocument>,
    pub failures: Vec<PageFailure>,
}

/// Reads and extracts pages in order, calling `on_page(done, total)` after
/// each. A page that fails to extract is recorded and skipped.
pub fn extract_book(
    book_id: &str,
    folder: &BookFolder,
    extractor: &dyn PageExtractor,
    mut on_page: impl FnMut(usize, usize),
) -> ExtractedBook {
    let total = folder.pages.len();
    let mut pages = Vec::with_capacity(total);
    let mut failures = Vec::new();
    for (i, page) in folder.pages.iter().enumerate() {
        let file_name = page
            .path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let extracted = fs::read(&page.path)
            .map_err(|e| IngestError::io(&page.path, e))
            .and_then(|bytes| extract_page_text(extractor, page.format, &bytes));
        match extracted {
            Ok(raw_text) => pages.push(PageDocument {
                book_id: book_id.to_owned(),
                page_number: page.page_number,
                raw_text,
            }),
            Err(e) => {
                tracing::warn!(book_id, page = page.page_number, error = %e, "page extraction failed");
                failures.push(PageFailure {
                    page_number: page.page_number,
                    file_name,
                    reason: e.to_string(),
                });
            }
        }
        on_page(i + 1, total);
    }
    ExtractedBook { pages, failures }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn page(text: &str) -> PageDocument {
        PageDocument {
            book_id: "book".into(),
            page_number: 1,
            raw_text: text.into(),
        }
    }

    fn touch(dir: &Path, name: &str, body: &str) {
        fs::write(dir.join(name), body).unwrap();
    }

    #[test]
    fn pages_sort_numerically() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["1.pdf", "2.pdf", "10.pdf"] {
            touch(dir.path(), name, "");
        }
        let folder = scan_book_folder(dir.path()).unwrap();
        let order: Vec<u32> = folder.pages.iter().map(|p| p.page_number).collect();
        assert_eq!(order, vec![1, 2, 10]);
    }

    #[test]
    fn empty_folder_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(scan_book_folder(dir.path()), Err(IngestError::EmptyFolder(_))));
    }

    #[test]
    fn non_page_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["3.pdf", "notes.txt", "4.pdf"] {
            touch(dir.path(), name, "");
        }
        let folder = scan_book_folder(dir.path()).unwrap();
        assert_eq!(folder.pages.len(), 2);
        assert_eq!(folder.skipped.len(), 1);
        assert_eq!(folder.skipped[0].file_name, "notes.txt");
    }

    #[test]
    fn duplicate_page_numbers_rejected() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "1.txt", "a");
        touch(dir.path(), "01.pdf", "b");
        assert!(matches!(
            scan_book_folder(dir.path()),
            Err(IngestError::DuplicatePageNumber { page: 1, .. })
        ));
    }

    #[test]
    fn page_file_name_rule() {
        assert_eq!(parse_page_file_name("7.TXT").unwrap(), (7, PageFormat::Txt));
        assert!(parse_page_file_name("0.pdf").is_err());
        assert!(parse_page_file_name("-1.pdf").is_err());
        assert!(parse_page_file_name("1.docx").is_err());
        assert!(parse_page_file_name("12").is_err());
        assert!(parse_page_file_name("1a.pdf").is_err());
    }

    #[test]
    fn plain_text_whitespace_rule() {
        let text = extract_page_text(&DefaultExtractor, PageFormat::Txt, b"A  B\n\nC").unwrap();
        assert_eq!(text, "A B\nC");
    }

    #[test]
    fn normalization_examples() {
        for raw in ["", "  ", "a\n\n\n b \t c\r\n\r\nd", "one\ntwo", "x\u{a0}\u{a0}y"] {
            let once = normalize_whitespace(raw);
            assert!(!once.contains("  "));
            assert_eq!(normalize_whitespace(&once), once);
        }
        assert_eq!(normalize_whitespace("one\ntwo"), "one\ntwo");
        assert_eq!(normalize_whitespace(" A  B\n\nC \n"), "A B\nC");
        assert_eq!(unwrap_lines("a wrapped\nline\n\n\nnext"), "a wrapped line\n\nnext");
        assert_eq!(normalize_whitespace("a\r\n\r\nb"), "a\nb");
    }

    #[test]
    fn corrupt_bytes_are_unparseable() {
        let err = extract_page_text(&DefaultExtractor, PageFormat::Txt, &[0xff, 0xfe, 0x00]).unwrap_err();
        assert!(matches!(err, IngestError::UnparseableDocument(_)));
        let err = extract_page_text(&DefaultExtractor, PageFormat::Pdf, b"%PDF-1.4 garbage").unwrap_err();
        assert!(matches!(err, IngestError::UnparseableDocument(_)));
    }

    #[test]
    fn short_page_is_one_segment() {
        let segs = segment_text(&[page("Short page text.")], &SegmentationConfig::default()).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].char_span, CharSpan { start: 0, end: 16 });
        assert_eq!(segs[0].text, "Short page text.");
    }

    #[test]
    fn empty_page_has_no_segments() {
        let segs = segment_text(&[page(""), page(" \n\n ")], &SegmentationConfig::default()).unwrap();
        assert!(segs.is_empty());
    }

    #[test]
    fn invalid_config_rejected() {
        let config = SegmentationConfig {
            max_chars: 100,
            overlap_chars: 100,
            boundary_preference: BoundaryPreference::WhitespaceOnly,
        };
        assert!(matches!(
            segment_text(&[page("x")], &config),
            Err(IngestError::InvalidConfig(_))
        ));
    }

    #[test]
    fn whitespace_only_overlap_is_exact() {
        let words: Vec<String> = (0..600).map(|i| format!("w{i}")).collect();
        let text = words.join(" ");
        let config = SegmentationConfig {
            max_chars: 300,
            overlap_chars: 50,
            boundary_preference: BoundaryPreference::WhitespaceOnly,
        };
        let segs = segment_text(&[page(&text)], &config).unwrap();
        for pair in segs.windows(2) {
            assert_eq!(pair[0].char_span.end - pair[1].char_span.start, 50);
        }
    }

    #[test]
    fn sentence_boundaries_preferred() {
        let text = "First sentence is here. Second one follows it. Third sentence closes.";
        let config = SegmentationConfig {
            max_chars: 40,
            overlap_chars: 5,
            boundary_preference: BoundaryPreference::SentenceEnd,
        };
        let segs = segment_text(&[page(text)], &config).unwrap();
        assert_eq!(segs[0].text, "First sentence is here.");
    }

    #[test]
    fn segment_ids_are_stable() {
        let span = CharSpan { start: 0, end: 10 };
        assert_eq!(SegmentId::derive("b", 1, span), SegmentId::derive("b", 1, span));
        assert_ne!(SegmentId::derive("b", 1, span), SegmentId::derive("b", 2, span));
    }

    fn arb_text() -> impl Strategy<Value = String> {
        proptest::collection::vec(
            prop_oneof![
                "[a-z]{1,9}".prop_map(|w| w),
                Just(" ".to_string()),
                Just(". ".to_string()),
                Just("\n\n".to_string()),
                Just("é".to_string()),
            ],
            0..400,
        )
        .prop_map(|parts| parts.concat())
    }

    proptest! {
        #[test]
        fn segments_are_bounded_ordered_and_match_spans(
            text in arb_text(),
            max in 2usize..200,
            overlap_ratio in 0.0f64..1.0,
            sentence in any::<bool>(),
        ) {
            let overlap = ((max - 1) as f64 * overlap_ratio) as usize;
            let config = SegmentationConfig {
                max_chars: max,
                overlap_chars: overlap,
                boundary_preference: if sentence { BoundaryPreference::SentenceEnd } else { BoundaryPreference::WhitespaceOnly },
            };
            let normalized: Vec<char> = normalize_whitespace(&text).chars().collect();
            let segs = segment_text(&[page(&text)], &config).unwrap();
            for s in &segs {
                prop_assert!(s.text.chars().count() <= max);
                prop_assert!(s.char_span.end > s.char_span.start);
                prop_assert!(!s.text.trim().is_empty());
                let expected: String = normalized[s.char_span.start..s.char_span.end].iter().collect();
                prop_assert_eq!(&s.text, &expected);
            }
            for pair in segs.windows(2) {
                prop_assert!(pair[1].char_span.start > pair[0].char_span.start);
                prop_assert!(pair[1].char_span.start <= pair[0].char_span.end);
                prop_assert!(pair[0].char_span.end - pair[1].char_span.start <= overlap);
            }
            if let Some(last) = segs.last() {
                prop_assert_eq!(last.char_span.end, normalized.len());
                prop_assert_eq!(segs[0].char_span.start, 0);
            }
        }

        #[test]
        fn normalization_is_idempotent(text in "[a-z \t\n\r.\u{a0}]{0,200}") {
            let once = normalize_whitespace(&text);
            prop_assert!(!once.contains("  "));
            prop_assert!(once.lines().all(|l| !l.is_empty() && l.trim() == l));
            prop_assert_eq!(normalize_whitespace(&once), once.clone());
        }
    }
}

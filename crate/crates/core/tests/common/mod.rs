#![allow(dead_code)]

use std::sync::Arc;

use chrono::{DateTime, TimeZone, Utc};
use visitprep_core::embedding::{embed_texts, EmbeddingProvider, StubEmbedder};
use visitprep_core::engine::{Clock, EngineSettings, ManualClock, SessionEngine};
use visitprep_core::gateway::Gateway;
use visitprep_core::index::{LiveIndex, VectorIndex};
use visitprep_core::ingest::{segment_text, PageDocument, Segment, SegmentationConfig};
use visitprep_core::stub::StubProvider;

pub const GUIDE_PAGES: &[&str] = &[
    "Breast cancer staging describes the size of the tumor and whether cancer cells have spread to lymph nodes. \
     Staging guides which treatments are offered.\n\nA biopsy removes a small sample of tissue so a pathologist can \
     confirm the diagnosis and measure hormone receptor status.",
    "Lumpectomy removes the tumor and a margin of healthy tissue while keeping most of the breast. \
     Radiation therapy usually follows lumpectomy to lower the chance of recurrence.\n\nMastectomy removes the whole \
     breast. Some patients choose reconstruction during the same operation or later.",
    "Chemotherapy uses medicines that travel through the bloodstream to destroy fast growing cells. \
     Common side effects include fatigue, nausea, hair loss and a higher risk of infection.\n\nAnti nausea medicines \
     work best when taken before symptoms start.",
    "Hormone therapy such as tamoxifen blocks estrogen from feeding receptor positive tumors. \
     Treatment often continues for five to ten years and may cause hot flashes and joint aches.",
    "Gentle exercise like walking can reduce treatment fatigue and improve mood. Physical therapists can help \
     with shoulder stiffness after surgery and with lymphedema, a swelling of the arm.",
    "Many patients feel anxious or low during treatment. Counseling, support groups and mindfulness programs \
     are available through the cancer center social work team.",
    "A balanced diet with vegetables, fruit, whole grains and lean protein helps the body heal. \
     Patients receiving chemotherapy should avoid raw fish and unpasteurized milk because of infection risk.",
    "After treatment ends, follow up visits usually happen every three to six months for the first years. \
     Yearly mammograms of the treated and untreated breast are recommended.",
    "Financial counselors explain insurance coverage, copayments and assistance programs. \
     Some foundations help with travel costs, parking and childcare during treatment.",
];

pub fn fixed_time() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2026, 5, 4, 10, 30, 0).unwrap()
}

pub fn guide_segments() -> Vec<Segment> {
    let pages: Vec<PageDocument> = GUIDE_PAGES
        .iter()
        .enumerate()
        .map(|(i, text)| PageDocument {
            book_id: "guide".into(),
            page_number: i as u32 + 1,
            raw_text: visitprep_core::ingest::normalize_whitespace(text),
        })
        .collect();
    let config = SegmentationConfig {
        max_chars: 220,
        overlap_chars: 40,
        ..SegmentationConfig::default()
    };
    segment_text(&pages, &config).unwrap()
}

pub fn build_index(segments: Vec<Segment>, embedder: &dyn EmbeddingProvider) -> VectorIndex {
    let texts: Vec<String> = segments.iter().map(|s| s.text.clone()).collect();
    let vectors = embed_texts(embedder, &texts).unwrap();
    VectorIndex::build(segments, &vectors, &embedder.provider_tag(), fixed_time()).unwrap()
}

pub struct Harness {
    pub engine: SessionEngine,
    pub embedder: Arc<StubEmbedder>,
    pub provider: Arc<StubProvider>,
    pub index: Arc<LiveIndex>,
}

pub fn harness_with(provider: StubProvider, index: Option<VectorIndex>) -> Harness {
    let embedder = Arc::new(StubEmbedder::new(StubEmbedder::DEFAULT_DIMENSION));
    let provider = Arc::new(provider);
    let index = Arc::new(LiveIndex::new(index));
    let gateway = Arc::new(Gateway::with_limits(provider.clone(), 8, std::time::Duration::ZERO));
    let clock: Arc<dyn Clock> = Arc::new(ManualClock::new(fixed_time()));
    let engine = SessionEngine::new(
        index.clone(),
        embedder.clone(),
        gateway,
        EngineSettings::default(),
        clock,
    );
    Harness {
        engine,
        embedder,
        provider,
        index,
    }
}

pub fn harness() -> Harness {
    let embedder = StubEmbedder::new(StubEmbedder::DEFAULT_DIMENSION);
    let index = build_index(guide_segments(), &embedder);
    harness_with(StubProvider::new(), Some(index))
}

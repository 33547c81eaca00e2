//! Knowledge panel: background, decision factors and an option grid, each
//! statement citing the guidebook segments it came from.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbeddingProvider;
use crate::gateway::{Bindings, Gateway, GatewayError, GenerationResult};
use crate::index::{IndexError, RetrievalPurpose, RetrievalRecord, VectorIndex};
use crate::ingest::{Segment, SegmentId};
use crate::interview::SelectedTopic;
use crate::prompts::{self, bullet_lines, format_context, templates};

pub const DEFAULT_PANEL_K: usize = 6;
pub const MAX_GAPS: usize = 5;
pub const NOT_COVERED_TEXT: &str = "Not covered in guidebook";
pub const REQUIRED_DIMENSIONS: [&str; 3] = ["benefits", "risks", "certainty"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PanelError {
    #[error("no patient answers to work from yet")]
    NoPatientTurns,
    #[error("the guidebook index is empty")]
    EmptyIndex,
    #[error("panel cites segments that were never retrieved: {cited:?}")]
    GroundingViolation { cited: Vec<SegmentId> },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("retrieval failed: {0}")]
    Index(String),
}

impl From<IndexError> for PanelError {
    fn from(e: IndexError) -> Self {
        match e {
            IndexError::EmptyIndex => PanelError::EmptyIndex,
            other => PanelError::Index(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionFactor {
    pub text: String,
    pub sources: Vec<SegmentId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridCell {
    pub option: String,
    pub dimension: String,
    pub text: String,
    pub sources: Vec<SegmentId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptionGrid {
    pub options: Vec<String>,
    pub dimensions: Vec<String>,
    /// Exactly one cell per option and dimension, row-major by option.
    pub cells: Vec<GridCell>,
}

impl OptionGrid {
    pub fn cell(&self, option: &str, dimension: &str) -> Option<&GridCell> {
        self.cells
            .iter()
            .find(|c| c.option == option && c.dimension == dimension)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgePanel {
    pub background_summary: String,
    pub background_sources: Vec<SegmentId>,
    pub decision_factors: Vec<DecisionFactor>,
    pub option_grid: OptionGrid,
    /// Union of retrieved segments the panel was generated from.
    pub generated_from: Vec<SegmentId>,
}

impl KnowledgePanel {
    /// Every segment id the panel cites.
    pub fn cited_ids(&self) -> BTreeSet<SegmentId> {
        self.background_sources
            .iter()
            .chain(self.decision_factors.iter().flat_map(|f| &f.sources))
            .chain(self.option_grid.cells.iter().flat_map(|c| &c.sources))
            .cloned()
            .collect()
    }

    /// Short plain-text rendering for prompts.
    pub fn summary_text(&self) -> String {
        let mut out = self.background_summary.clone();
        for f in &self.decision_factors {
            out.push_str("\n- ");
            out.push_str(&f.text);
        }
        if !self.option_grid.options.is_empty() {
            out.push_str("\nOptions: ");
            out.push_str(&self.option_grid.options.join("; "));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelBuild {
    pub gaps: Vec<String>,
    pub panel: KnowledgePanel,
    pub retrievals: Vec<RetrievalRecord>,
}

fn topic_bullets(topics: &[SelectedTopic]) -> String {
    bullet_lines(topics.iter().map(SelectedTopic::name))
}

/// Asks the model which facts the patient is missing. At most
/// [`MAX_GAPS`] distinct queries are kept.
pub fn identify_knowledge_gaps(
    patient_turns: &[String],
    topics: &[SelectedTopic],
    gateway: &Gateway,
) -> Result<Vec<String>, PanelError> {
    if patient_turns.iter().all(|t| t.trim().is_empty()) {
        return Err(PanelError::NoPatientTurns);
    }
    let bindings = Bindings::from([
        ("topics".to_owned(), topic_bullets(topics)),
        ("patient_turns".to_owned(), bullet_lines(patient_turns)),
    ]);
    let result = gateway.generate_structured(&templates().knowledge_gaps, &bindings)?;
    let mut seen = HashSet::new();
    Ok(result
        .list("gaps")
        .iter()
        .filter(|g| seen.insert(g.to_lowercase()))
        .take(MAX_GAPS)
        .cloned()
        .collect())
}

/// Retrieves `k` segments per gap (positive scores only) and returns the
/// retrieval records plus the deduplicated union in first-seen order.
pub fn retrieve_for_gaps(
    gaps: &[String],
    index: &VectorIndex,
    embedder: &dyn EmbeddingProvider,
    k: usize,
) -> Result<(Vec<RetrievalRecord>, Vec<Segment>), PanelError> {
    let mut records = Vec::with_capacity(gaps.len());
    let mut seen = HashSet::new();
    let mut union = Vec::new();
    for gap in gaps {
        let hits: Vec<_> = index
            .retrieve(gap, k, embedder)?
            .into_iter()
            .filter(|h| h.score > 0.0)
            .collect();
        for hit in &hits {
            if seen.insert(hit.segment_id.clone()) {
                if let Some(seg) = index.segment(&hit.segment_id) {
                    union.push(seg.clone());
                }
            }
        }
        records.push(RetrievalRecord {
            purpose: RetrievalPurpose::KnowledgeGap,
            query: gap.clone(),
            k,
            hits,
        });
    }
    Ok((records, union))
}

fn ids(raw: &[String]) -> Vec<SegmentId> {
    let mut seen = HashSet::new();
    raw.iter()
        .map(|s| s.trim().trim_start_matches('[').trim_end_matches(']').to_owned())
        .filter(|s| !s.is_empty() && seen.insert(s.clone()))
        .map(SegmentId)
        .collect()
}

/// Turns model output into a panel. Factors without sources are dropped
/// and grid cells that are missing or unsourced read "Not covered in
/// guidebook".
pub fn assemble_panel(result: &GenerationResult, generated_from: Vec<SegmentId>) -> KnowledgePanel {
    let decision_factors = result
        .table("decision_factors")
        .iter()
        .filter_map(|row| {
            let text = row.text("text")?.trim().to_owned();
            let sources = ids(row.list("sources"));
            (!text.is_empty() && !sources.is_empty()).then_some(DecisionFactor { text, sources })
        })
        .collect();

    let mut options: Vec<String> = Vec::new();
    for o in result.list("options") {
        let o = o.trim();
        if !o.is_empty() && !options.iter().any(|x| x.eq_ignore_ascii_case(o)) {
            options.push(o.to_owned());
        }
    }
    let mut dimensions: Vec<String> = REQUIRED_DIMENSIONS.iter().map(|d| d.to_string()).collect();
    for d in result.list("extra_dimensions") {
        let d = d.trim().to_lowercase();
        if !d.is_empty() && !dimensions.contains(&d) {
            dimensions.push(d);
        }
    }

    let rows = result.table("cells");
    let mut cells = Vec::with_capacity(options.len() * dimensions.len());
    for option in &options {
        for dimension in &dimensions {
            let found = rows.iter().find(|r| {
                r.text("option").is_some_and(|o| o.trim().eq_ignore_ascii_case(option))
                    && r.text("dimension")
                        .is_some_and(|d| d.trim().eq_ignore_ascii_case(dimension))
            });
            let cell = found.and_then(|r| {
                let text = r.text("text")?.trim().to_owned();
                let sources = ids(r.list("sources"));
                (!text.is_empty() && !sources.is_empty()).then_some((text, sources))
            });
            let (text, sources) = cell.unwrap_or_else(|| (NOT_COVERED_TEXT.to_owned(), Vec::new()));
            cells.push(GridCell {
                option: option.clone(),
                dimension: dimension.clone(),
                text,
                sources,
            });
        }
    }

    KnowledgePanel {
        background_summary: result.text("background_summary").unwrap_or_default().trim().to_owned(),
        background_sources: ids(result.list("background_sources")),
        decision_factors,
        option_grid: OptionGrid {
            options,
            dimensions,
            cells,
        },
        generated_from,
    }
}

/// Ids cited by `panel` that are not in `allowed`.
pub fn ungrounded(panel: &KnowledgePanel, allowed: &HashSet<&SegmentId>) -> Vec<SegmentId> {
    panel
        .cited_ids()
        .into_iter()
        .filter(|id| !allowed.contains(id))
        .collect()
}

/// Gaps, retrieval and generation with one regeneration when the first
/// draft cites something outside the retrieved context.
pub fn build_panel(
    gaps: Vec<String>,
    topics: &[SelectedTopic],
    index: &VectorIndex,
    embedder: &dyn EmbeddingProvider,
    gateway: &Gateway,
    k: usize,
) -> Result<PanelBuild, PanelError> {
    let (retrievals, union) = retrieve_for_gaps(&gaps, index, embedder, k)?;
    let generated_from: Vec<SegmentId> = union.iter().map(|s| s.segment_id.clone()).collect();
    let allowed: HashSet<&SegmentId> = generated_from.iter().collect();

    let mut bindings = Bindings::from([
        ("topics".to_owned(), topic_bullets(topics)),
        ("gaps".to_owned(), bullet_lines(&gaps)),
        ("context".to_owned(), format_context(&union)),
        ("grounding_feedback".to_owned(), String::new()),
    ]);
    let template = &templates().knowledge_panel;
    debug_assert_eq!(template.id(), prompts::KNOWLEDGE_PANEL);

    let mut panel = assemble_panel(
        &gateway.generate_structured(template, &bindings)?,
        generated_from.clone(),
    );
    let mut bad = ungrounded(&panel, &allowed);
    if !bad.is_empty() {
        tracing::warn!(count = bad.len(), "panel cited unretrieved segments; regenerating");
        let listed: Vec<&str> = bad.iter().map(SegmentId::as_str).collect();
        bindings.insert(
            "grounding_feedback".to_owned(),
            format!(
                "\nA previous draft cited ids that are not in the excerpts ({}). Cite only listed ids.",
                listed.join(", ")
            ),
        );
        panel = assemble_panel(
            &gateway.generate_structured(template, &bindings)?,
            generated_from.clone(),
        );
        bad = ungrounded(&panel, &allowed);
        if !bad.is_empty() {
            return Err(PanelError::GroundingViolation { cited: bad });
        }
    }
    Ok(PanelBuild {
        gaps,
        panel,
        retrievals,
    })
}

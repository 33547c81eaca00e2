//! Visit questions: candidates are split by whether the guidebook can
//! answer them. Answerable ones ("know them") get a cited answer; the rest
//! ("ask them") are for the clinician.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embedding::EmbeddingProvider;
use crate::gateway::{Bindings, Gateway, GatewayError};
use crate::index::{IndexError, RetrievalHit, RetrievalPurpose, RetrievalRecord, VectorIndex};
use crate::ingest::SegmentId;
use crate::interview::SelectedTopic;
use crate::panel::KnowledgePanel;
use crate::prompts::{bullet_lines, format_context, templates};

pub const DEFAULT_THRESHOLD: f64 = 0.60;
pub const DEFAULT_CLASSIFY_K: usize = 4;
pub const QUESTIONS_PER_KIND: usize = 5;
pub const MIN_CANDIDATES: usize = 14;
pub const MAX_CANDIDATES: usize = 20;
/// Extra segments retrieved for the narrative to widen candidate context.
pub const NARRATIVE_CONTEXT_K: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuestionsError {
    #[error("only {got} distinct candidate questions were generated")]
    TooFewCandidates { got: usize },
    #[error("not enough candidates: {know_deficit} more know-them and {ask_deficit} more ask-them questions needed")]
    InsufficientCandidates { know_deficit: usize, ask_deficit: usize },
    #[error("answer for \"{question}\" cites segments outside its retrieval hits")]
    GroundingViolation { question: String, cited: Vec<SegmentId> },
    #[error("the guidebook index is empty")]
    EmptyIndex,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("retrieval failed: {0}")]
    Index(String),
}

impl From<IndexError> for QuestionsError {
    fn from(e: IndexError) -> Self {
        match e {
            IndexError::EmptyIndex => QuestionsError::EmptyIndex,
            other => QuestionsError::Index(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuestionKind {
    KnowThem,
    AskThem,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitQuestion {
    pub question_id: String,
    pub kind: QuestionKind,
    pub text: String,
    pub answer: Option<String>,
    pub sources: Vec<SegmentId>,
    pub answerability_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitPrepOutput {
    pub know_them: Vec<VisitQuestion>,
    pub ask_them: Vec<VisitQuestion>,
    pub threshold_used: f64,
}

impl VisitPrepOutput {
    /// The shape the client renders.
    pub fn to_api_json(&self) -> Value {
        json!({
            "know_them": self.know_them.iter().map(|q| json!({
                "text": q.text,
                "answer": q.answer.clone().unwrap_or_default(),
                "sources": q.sources,
                "score": q.answerability_score,
            })).collect::<Vec<_>>(),
            "ask_them": self.ask_them.iter().map(|q| json!({
                "text": q.text,
                "score": q.answerability_score,
            })).collect::<Vec<_>>(),
            "threshold_used": self.threshold_used,
        })
    }
}

/// Lowercase, collapsed whitespace, no trailing sentence punctuation.
pub fn normalize_question(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
        .trim_end_matches(['?', '.', '!'])
        .trim_end()
        .to_owned()
}

pub fn question_id(text: &str) -> String {
    let digest = Sha256::digest(normalize_question(text).as_bytes());
    hex::encode(&digest[..6])
}

/// Inputs shared by every generation call for one session.
pub struct CandidateContext<'a> {
    pub topics: &'a [SelectedTopic],
    pub narrative: &'a str,
    pub panel: &'a KnowledgePanel,
    pub index: &'a VectorIndex,
}

/// Panel segments followed by the segments retrieved for the narrative,
/// without repeats.
pub fn candidate_context(
    ctx: &CandidateContext<'_>,
    embedder: &dyn EmbeddingProvider,
) -> Result<(String, RetrievalRecord), QuestionsError> {
    let hits = ctx.index.retrieve(ctx.narrative, NARRATIVE_CONTEXT_K, embedder)?;
    let mut seen = HashSet::new();
    let ids = ctx
        .panel
        .generated_from
        .iter()
        .chain(hits.iter().map(|h| &h.segment_id))
        .filter(|id| seen.insert(*id));
    let context = format_context(ids.filter_map(|id| ctx.index.segment(id)));
    let record = RetrievalRecord {
        purpose: RetrievalPurpose::CandidateContext,
        query: ctx.narrative.to_owned(),
        k: NARRATIVE_CONTEXT_K,
        hits,
    };
    Ok((context, record))
}

/// One batch of candidates, deduplicated against `exclude` and itself.
pub fn generate_candidates(
    ctx: &CandidateContext<'_>,
    context: &str,
    gateway: &Gateway,
    batch: u32,
    exclude: &[String],
) -> Result<Vec<String>, QuestionsError> {
    let bindings = Bindings::from([
        (
            "count_hint".to_owned(),
            format!("between {MIN_CANDIDATES} and {MAX_CANDIDATES}"),
        ),
        (
            "topics".to_owned(),
            bullet_lines(ctx.topics.iter().map(SelectedTopic::name)),
        ),
        ("narrative".to_owned(), ctx.narrative.to_owned()),
        ("panel_summary".to_owned(), ctx.panel.summary_text()),
        ("context".to_owned(), context.to_owned()),
        ("batch".to_owned(), batch.to_string()),
        ("exclude".to_owned(), bullet_lines(exclude)),
    ]);
    let result = gateway.generate_structured(&templates().visit_candidates, &bindings)?;
    let mut seen: HashSet<String> = exclude.iter().map(|q| normalize_question(q)).collect();
    let out: Vec<String> = result
        .list("questions")
        .iter()
        .map(|q| q.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|q| !normalize_question(q).is_empty() && seen.insert(normalize_question(q)))
        .take(MAX_CANDIDATES)
        .collect();
    if batch == 1 && out.len() < MIN_CANDIDATES {
        return Err(QuestionsError::TooFewCandidates { got: out.len() });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub question_id: String,
    pub text: String,
    pub kind: QuestionKind,
    /// Highest cosine score among the top-k hits.
    pub score: f64,
    pub hits: Vec<RetrievalHit>,
}

/// Know-them iff the best retrieval score reaches `threshold`.
pub fn classify_answerability(
    question: &str,
    index: &VectorIndex,
    embedder: &dyn EmbeddingProvider,
    threshold: f64,
    k: usize,
) -> Result<Classification, QuestionsError> {
    let hits = index.retrieve(question, k, embedder)?;
    let score = hits.first().map_or(f64::NEG_INFINITY, |h| h.score);
    Ok(Classification {
        question_id: question_id(question),
        text: question.to_owned(),
        kind: if score >= threshold {
            QuestionKind::KnowThem
        } else {
            QuestionKind::AskThem
        },
        score,
        hits,
    })
}

impl Classification {
    pub fn record(&self) -> RetrievalRecord {
        RetrievalRecord {
            purpose: RetrievalPurpose::QuestionAnswerability,
            query: self.text.clone(),
            k: self.hits.len(),
            hits: self.hits.clone(),
        }
    }
}

/// Picks the five know-them questions with the highest scores and the five
/// ask-them questions with the lowest. Ties go to the smaller question id.
pub fn select_questions(
    classified: &[Classification],
) -> Result<(Vec<&Classification>, Vec<&Classification>), QuestionsError> {
    let mut know: Vec<&Classification> = classified.iter().filter(|c| c.kind == QuestionKind::KnowThem).collect();
    let mut ask: Vec<&Classification> = classified.iter().filter(|c| c.kind == QuestionKind::AskThem).collect();
    let know_deficit = QUESTIONS_PER_KIND.saturating_sub(know.len());
    let ask_deficit = QUESTIONS_PER_KIND.saturating_sub(ask.len());
    if know_deficit > 0 || ask_deficit > 0 {
        return Err(QuestionsError::InsufficientCandidates {
            know_deficit,
            ask_deficit,
        });
    }
    know.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.question_id.cmp(&b.question_id))
    });
    ask.sort_by(|a, b| {
        a.score
            .total_cmp(&b.score)
            .then_with(|| a.question_id.cmp(&b.question_id))
    });
    know.truncate(QUESTIONS_PER_KIND);
    ask.truncate(QUESTIONS_PER_KIND);
    Ok((know, ask))
}

/// Writes the answer from the hits at or above `threshold`; regenerates
/// once if the draft cites anything else.
pub fn compose_know_them(
    c: &Classification,
    index: &VectorIndex,
    gateway: &Gateway,
    threshold: f64,
) -> Result<VisitQuestion, QuestionsError> {
    let usable: Vec<&RetrievalHit> = c.hits.iter().filter(|h| h.score >= threshold).collect();
    let allowed: HashSet<&SegmentId> = usable.iter().map(|h| &h.segment_id).collect();
    let mut bindings = Bindings::from([
        ("question".to_owned(), c.text.clone()),
        (
            "context".to_owned(),
            format_context(usable.iter().filter_map(|h| index.segment(&h.segment_id))),
        ),
        ("grounding_feedback".to_owned(), String::new()),
    ]);
    let mut bad = Vec::new();
    for attempt in 0..2 {
        if attempt == 1 {
            tracing::warn!(question = %c.text, "answer cited unretrieved segments; regenerating");
            bindings.insert(
                "grounding_feedback".to_owned(),
                "\nA previous answer cited ids that are not listed. Cite only listed ids.".to_owned(),
            );
        }
        let result = gateway.generate_structured(&templates().know_them_answer, &bindings)?;
        let answer = result.text("answer").unwrap_or_default().trim().to_owned();
        let mut seen = HashSet::new();
        let sources: Vec<SegmentId> = result
            .list("sources")
            .iter()
            .map(|s| SegmentId(s.trim().trim_start_matches('[').trim_end_matches(']').to_owned()))
            .filter(|s| seen.insert(s.clone()))
            .collect();
        bad = sources.iter().filter(|s| !allowed.contains(s)).cloned().collect();
        if bad.is_empty() && !sources.is_empty() && !answer.is_empty() {
            return Ok(VisitQuestion {
                question_id: c.question_id.clone(),
                kind: QuestionKind::KnowThem,
                text: c.text.clone(),
                answer: Some(answer),
                sources,
                answerability_score: c.score,
            });
        }
    }
    Err(QuestionsError::GroundingViolation {
        question: c.text.clone(),
        cited: bad,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuestionsBuild {
    pub output: VisitPrepOutput,
    pub retrievals: Vec<RetrievalRecord>,
}

pub struct QuestionSettings {
    pub threshold: f64,
    pub k: usize,
}

impl Default for QuestionSettings {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            k: DEFAULT_CLASSIFY_K,
        }
    }
}

/// Context retrieval, candidates, classification, one supplementary batch if either side is
/// short, then answers for the selected know-them questions.
pub fn prepare_visit_questions(
    ctx: &CandidateContext<'_>,
    embedder: &dyn EmbeddingProvider,
    gateway: &Gateway,
    settings: &QuestionSettings,
) -> Result<QuestionsBuild, QuestionsError> {
    let classify = |questions: &[String]| -> Result<Vec<Classification>, QuestionsError> {
        questions
            .iter()
            .map(|q| classify_answerability(q, ctx.index, embedder, settings.threshold, settings.k))
            .collect()
    };

    let (context, context_record) = candidate_context(ctx, embedder)?;
    let first = generate_candidates(ctx, &context, gateway, 1, &[])?;
    let mut classified = classify(&first)?;
    if let Err(QuestionsError::InsufficientCandidates {
        know_deficit,
        ask_deficit,
    }) = select_questions(&classified)
    {
        tracing::info!(know_deficit, ask_deficit, "requesting supplementary candidates");
        let more = generate_candidates(ctx, &context, gateway, 2, &first)?;
        classified.extend(classify(&more)?);
    }
    let (know, ask) = select_questions(&classified)?;

    let know_them = know
        .into_iter()
        .map(|c| compose_know_them(c, ctx.index, gateway, settings.threshold))
        .collect::<Result<Vec<_>, _>>()?;
    let ask_them = ask
        .into_iter()
        .map(|c| VisitQuestion {
            question_id: c.question_id.clone(),
            kind: QuestionKind::AskThem,
            text: c.text.clone(),
            answer: None,
            sources: Vec::new(),
            answerability_score: c.score,
        })
        .collect();

    Ok(QuestionsBuild {
        output: VisitPrepOutput {
            know_them,
            ask_them,
            threshold_used: settings.threshold,
        },
        retrievals: std::iter::once(context_record)
            .chain(classified.iter().map(Classification::record))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn class(text: &str, kind: QuestionKind, score: f64) -> Classification {
        Classification {
            question_id: question_id(text),
            text: text.into(),
            kind,
            score,
            hits: vec![],
        }
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_question("  What  IS this?? "), "what is this");
        assert_eq!(question_id("What is this?"), question_id("what is   this"));
        assert_eq!(question_id("a").len(), 12);
    }

    #[test]
    fn selection_orders_and_reports_deficits() {
        let mut all: Vec<Classification> = (0..7)
            .map(|i| class(&format!("k{i}"), QuestionKind::KnowThem, 0.6 + i as f64 * 0.01))
            .collect();
        all.extend((0..3).map(|i| class(&format!("a{i}"), QuestionKind::AskThem, 0.1)));
        assert_eq!(
            select_questions(&all).unwrap_err(),
            QuestionsError::InsufficientCandidates {
                know_deficit: 0,
                ask_deficit: 2
            }
        );
        all.extend((3..6).map(|i| class(&format!("a{i}"), QuestionKind::AskThem, 0.5 - i as f64 * 0.1)));
        let (know, ask) = select_questions(&all).unwrap();
        let know: Vec<&str> = know.iter().map(|c| c.text.as_str()).collect();
        assert_eq!(know, ["k6", "k5", "k4", "k3", "k2"]);
        assert_eq!(ask[0].text, "a5");
        let tied: Vec<&Classification> = ask.iter().copied().filter(|c| c.score == 0.1).collect();
        assert!(tied.windows(2).all(|w| w[0].question_id < w[1].question_id));
    }

    #[test]
    fn api_json_keys() {
        let out = VisitPrepOutput {
            know_them: vec![VisitQuestion {
                question_id: "x".into(),
                kind: QuestionKind::KnowThem,
                text: "q".into(),
                answer: Some("a".into()),
                sources: vec![SegmentId("s".into())],
                answerability_score: 0.9,
            }],
            ask_them: vec![],
            threshold_used: 0.6,
        };
        let v = out.to_api_json();
        let keys: Vec<&String> = v["know_them"][0].as_object().unwrap().keys().collect();
        assert_eq!(keys, ["answer", "score", "sources", "text"]);
        assert_eq!(v["know_them"][0]["sources"][0], "s");
        assert_eq!(v["threshold_used"], 0.6);
    }
}

//! Versioned prompt templates. Template ids double as stub fixture keys.

use std::sync::OnceLock;

use crate::gateway::{ColumnSpec, FieldSpec, PromptTemplate};
use crate::ingest::Segment;

pub const KNOWLEDGE_GAPS: &str = "knowledge_gaps/v1";
pub const KNOWLEDGE_PANEL: &str = "knowledge_panel/v1";
pub const JOURNEY_NARRATIVE: &str = "journey_narrative/v1";
pub const VISIT_CANDIDATES: &str = "visit_candidates/v1";
pub const KNOW_THEM_ANSWER: &str = "know_them_answer/v1";

pub struct Templates {
    pub knowledge_gaps: PromptTemplate,
    pub knowledge_panel: PromptTemplate,
    pub journey_narrative: PromptTemplate,
    pub visit_candidates: PromptTemplate,
    pub know_them_answer: PromptTemplate,
}

pub fn templates() -> &'static Templates {
    static TEMPLATES: OnceLock<Templates> = OnceLock::new();
    TEMPLATES.get_or_init(|| Templates {
        knowledge_gaps: PromptTemplate::new(
            KNOWLEDGE_GAPS,
            "You support a patient preparing for a cancer care visit. Read what the patient \
             said about the topics they chose and name what they do not yet know. Write each \
             gap as a short search query that could be looked up in a patient guidebook. \
             Give between one and five queries.",
            "Topics:\n{{topics}}\n\nPatient answers:\n{{patient_turns}}",
            vec![FieldSpec::list("gaps", 1)],
        )
        .expect("knowledge_gaps template"),

        knowledge_panel: PromptTemplate::new(
            KNOWLEDGE_PANEL,
            "You prepare a knowledge panel for a patient using ONLY the guidebook excerpts \
             provided. Each excerpt starts with its id in square brackets. Cite excerpt ids \
             for every statement. Never cite an id that is not listed. If the excerpts do not \
             cover something, leave it out instead of guessing.\n\
             Produce: a plain-language background summary; key decision factors; and the \
             treatment or care options the excerpts name, each compared on benefits, risks \
             and certainty (how sure the evidence is).{{grounding_feedback}}",
            "Topics:\n{{topics}}\n\nWhat the patient needs to learn:\n{{gaps}}\n\nGuidebook excerpts:\n{{context}}",
            vec![
                FieldSpec::string("background_summary"),
                FieldSpec::list("background_sources", 0).optional(),
                FieldSpec::table(
                    "decision_factors",
                    vec![ColumnSpec::text("text"), ColumnSpec::list("sources")],
                ),
                FieldSpec::list("options", 0),
                FieldSpec::list("extra_dimensions", 0).optional(),
                FieldSpec::table(
                    "cells",
                    vec![
                        ColumnSpec::text("option"),
                        ColumnSpec::text("dimension"),
                        ColumnSpec::text("text"),
                        ColumnSpec::list("sources"),
                    ],
                ),
            ],
        )
        .expect("knowledge_panel template"),

        journey_narrative: PromptTemplate::new(
            JOURNEY_NARRATIVE,
            "Rewrite the interview below as a short first-person summary in the patient's own \
             voice (use \"I\", \"me\", \"my\"). Describe their current concerns, the decision \
             they face and what matters to them. Do not address the patient as \"you\". Name \
             each chosen topic explicitly.{{style_feedback}}",
            "Chosen topics:\n{{topics}}\n\nInterview transcript:\n{{transcript}}\n\nReflection answers:\n{{reflections}}",
            vec![FieldSpec::string("narrative")],
        )
        .expect("journey_narrative template"),

        visit_candidates: PromptTemplate::new(
            VISIT_CANDIDATES,
            "Write candidate questions a patient could bring to an upcoming visit. Mix two \
             kinds: questions whose answers appear in the guidebook excerpts (so the patient \
             can learn them beforehand) and personal questions only their doctor can answer. \
             Write {{count_hint}} distinct questions in the first person. Do not repeat any \
             question from the exclusion list.",
            "Topics:\n{{topics}}\n\nPatient's confirmed summary:\n{{narrative}}\n\nKnowledge panel:\n{{panel_summary}}\n\nGuidebook excerpts:\n{{context}}\n\nBatch: {{batch}}\nAlready proposed:\n{{exclude}}",
            vec![FieldSpec::list("questions", 14)],
        )
        .expect("visit_candidates template"),

        know_them_answer: PromptTemplate::new(
            KNOW_THEM_ANSWER,
            "Answer the patient's question in two or three plain sentences using ONLY the \
             guidebook excerpts provided. Each excerpt starts with its id in square brackets. \
             List the ids you used in `sources`; never cite an id that is not listed.{{grounding_feedback}}",
            "Question: {{question}}\n\nGuidebook excerpts:\n{{context}}",
            vec![FieldSpec::string("answer"), FieldSpec::list("sources", 1)],
        )
        .expect("know_them_answer template"),
    })
}

/// One excerpt per line: `[<segment_id>] <text>`. Paragraph breaks inside a
/// segment are flattened so the line structure stays parseable.
pub fn format_context<'a>(segments: impl IntoIterator<Item = &'a Segment>) -> String {
    segments
        .into_iter()
        .map(|s| format!("[{}] {}", s.segment_id, s.text.replace('\n', " ")))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Inverse of [`format_context`]: `(id, text)` pairs.
pub fn parse_context(context: &str) -> Vec<(String, String)> {
    context
        .lines()
        .filter_map(|line| {
            let rest = line.strip_prefix('[')?;
            let (id, text) = rest.split_once("] ")?;
            Some((id.to_owned(), text.to_owned()))
        })
        .collect()
}

pub fn bullet_lines<S: AsRef<str>>(items: impl IntoIterator<Item = S>) -> String {
    items
        .into_iter()
        .map(|s| format!("- {}", s.as_ref()))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn parse_bullets(text: &str) -> Vec<String> {
    text.lines()
        .filter_map(|l| l.strip_prefix("- "))
        .map(str::to_owned)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{CharSpan, SegmentId};

    #[test]
    fn templates_construct() {
        let t = templates();
        assert_eq!(t.knowledge_panel.id(), KNOWLEDGE_PANEL);
        let names: Vec<&str> = t.knowledge_panel.placeholders().collect();
        assert_eq!(names, ["context", "gaps", "grounding_feedback", "topics"]);
    }

    #[test]
    fn context_round_trip() {
        let seg = Segment {
            segment_id: SegmentId("abc".into()),
            book_id: "b".into(),
            page_number: 1,
            char_span: CharSpan { start: 0, end: 5 },
            text: "one\ntwo".into(),
            token_estimate: 2,
        };
        let ctx = format_context([&seg]);
        assert_eq!(ctx, "[abc] one two");
        assert_eq!(parse_context(&ctx), vec![("abc".to_string(), "one two".to_string())]);
        assert_eq!(parse_bullets(&bullet_lines(["x", "y"])), ["x", "y"]);
    }
}

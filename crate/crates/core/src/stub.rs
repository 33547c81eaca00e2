//! Offline text provider.
//!
//! Registered fixtures take precedence: a fixture matches when its template
//! id is equal and each pattern entry (`placeholder -> substring`) occurs in
//! the bound value. The most specific match wins; among equally specific
//! fixtures the latest registration wins. Unmatched calls to the in-repo
//! templates fall through to deterministic extractive generators that build
//! schema-valid JSON from the bindings alone.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::RwLock;

use serde::Deserialize;
use serde_json::{json, Value};

use crate::gateway::{Bindings, CompletionRequest, ProviderError, TextProvider};
use crate::prompts::{self, parse_bullets, parse_context};

#[derive(Debug, Clone)]
struct Fixture {
    template_id: String,
    pattern: BTreeMap<String, String>,
    /// Output per attempt; the last one repeats.
    outputs: Vec<String>,
}

#[derive(Debug, Default)]
pub struct StubProvider {
    fixtures: RwLock<Vec<Fixture>>,
    builtins: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum FixtureLoadError {
    #[error("reading fixture {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("fixture {path} is malformed: {reason}")]
    Malformed { path: String, reason: String },
}

#[derive(Deserialize)]
struct FixtureEntry {
    template_id: String,
    #[serde(default, rename = "match")]
    pattern: BTreeMap<String, String>,
    #[serde(default)]
    output: Option<Value>,
    #[serde(default)]
    outputs: Vec<Value>,
}

fn output_text(v: Value) -> String {
    match v {
        Value::String(s) => s,
        other => other.to_string(),
    }
}

impl StubProvider {
    /// Fixtures plus the built-in generators.
    pub fn new() -> Self {
        Self {
            fixtures: RwLock::new(Vec::new()),
            builtins: true,
        }
    }

    /// Fixtures only; unmatched calls fail with `NoFixture`.
    pub fn fixtures_only() -> Self {
        Self::default()
    }

    pub fn register_stub_fixture(&self, template_id: &str, pattern: &[(&str, &str)], canned_output: impl Into<String>) {
        self.register_sequence(template_id, pattern, vec![canned_output.into()]);
    }

    /// Registers per-attempt outputs (attempt 1 gets the first entry).
    pub fn register_sequence(&self, template_id: &str, pattern: &[(&str, &str)], outputs: Vec<String>) {
        assert!(!outputs.is_empty(), "fixture needs at least one output");
        self.fixtures.write().expect("fixtures poisoned").push(Fixture {
            template_id: template_id.to_owned(),
            pattern: pattern.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            outputs,
        });
    }

    /// Loads every `*.json` file in `dir`. A file holds either an object
    /// mapping template id to canned output, or an array of entries
    /// `{template_id, match?, output | outputs}`.
    pub fn load_fixture_dir(&self, dir: &Path) -> Result<usize, FixtureLoadError> {
        let io = |source| FixtureLoadError::Io {
            path: dir.display().to_string(),
            source,
        };
        let mut paths: Vec<_> = fs::read_dir(dir)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        paths.sort();
        let mut count = 0;
        for path in paths {
            let shown = path.display().to_string();
            let bytes = fs::read(&path).map_err(|source| FixtureLoadError::Io {
                path: shown.clone(),
                source,
            })?;
            let value: Value = serde_json::from_slice(&bytes).map_err(|e| FixtureLoadError::Malformed {
                path: shown.clone(),
                reason: e.to_string(),
            })?;
            match value {
                Value::Object(map) => {
                    for (template_id, output) in map {
                        self.register_sequence(&template_id, &[], vec![output_text(output)]);
                        count += 1;
                    }
                }
                Value::Array(_) => {
                    let entries: Vec<FixtureEntry> =
                        serde_json::from_value(value).map_err(|e| FixtureLoadError::Malformed {
                            path: shown.clone(),
                            reason: e.to_string(),
                        })?;
                    for entry in entries {
                        let mut outputs: Vec<String> = entry.outputs.into_iter().map(output_text).collect();
                        if let Some(o) = entry.output {
                            outputs.insert(0, output_text(o));
                        }
                        if outputs.is_empty() {
                            return Err(FixtureLoadError::Malformed {
                                path: shown,
                                reason: format!("entry for {} has no output", entry.template_id),
                            });
                        }
                        self.fixtures.write().expect("fixtures poisoned").push(Fixture {
                            template_id: entry.template_id,
                            pattern: entry.pattern,
                            outputs,
                        });
                        count += 1;
                    }
                }
                _ => {
                    return Err(FixtureLoadError::Malformed {
                        path: shown,
                        reason: "expected an object or an array".into(),
                    })
                }
            }
        }
        Ok(count)
    }

    fn find_fixture(&self, template_id: &str, bindings: &Bindings, attempt: u32) -> Option<String> {
        let fixtures = self.fixtures.read().expect("fixtures poisoned");
        fixtures
            .iter()
            .enumerate()
            .filter(|(_, f)| f.template_id == template_id)
            .filter(|(_, f)| {
                f.pattern
                    .iter()
                    .all(|(k, needle)| bindings.get(k).is_some_and(|v| v.contains(needle.as_str())))
            })
            .max_by_key(|(i, f)| (f.pattern.len(), *i))
            .map(|(_, f)| {
                let idx = (attempt as usize).saturating_sub(1).min(f.outputs.len() - 1);
                f.outputs[idx].clone()
            })
    }
}

impl TextProvider for StubProvider {
    fn provider_tag(&self) -> String {
        "stub-llm-v1".into()
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, ProviderError> {
        if let Some(out) = self.find_fixture(request.template_id, request.bindings, request.attempt) {
            return Ok(out);
        }
        if self.builtins {
            if let Some(out) = builtin(request.template_id, request.bindings) {
                return Ok(out.to_string());
            }
        }
        Err(ProviderError::NoFixture(request.template_id.to_owned()))
    }
}

fn get<'a>(b: &'a Bindings, key: &str) -> &'a str {
    b.get(key).map(String::as_str).unwrap_or_default()
}

fn builtin(template_id: &str, b: &Bindings) -> Option<Value> {
    Some(match template_id {
        prompts::KNOWLEDGE_GAPS => gaps(b),
        prompts::KNOWLEDGE_PANEL => panel(b),
        prompts::JOURNEY_NARRATIVE => journey(b),
        prompts::VISIT_CANDIDATES => candidates(b),
        prompts::KNOW_THEM_ANSWER => know_them(b),
        _ => return None,
    })
}

fn first_sentence(text: &str, max_chars: usize) -> String {
    let end = text
        .char_indices()
        .find(|&(i, c)| matches!(c, '.' | '!' | '?') && text[i + 1..].starts_with(' '))
        .map(|(i, _)| i + 1)
        .unwrap_or(text.len());
    text[..end]
        .chars()
        .take(max_chars)
        .collect::<String>()
        .trim()
        .to_owned()
}

fn lead_phrase(text: &str) -> String {
    text.split_whitespace()
        .take(4)
        .collect::<Vec<_>>()
        .join(" ")
        .trim_end_matches(|c: char| !c.is_alphanumeric())
        .to_owned()
}

fn gaps(b: &Bindings) -> Value {
    let topics = parse_bullets(get(b, "topics"));
    let turns = parse_bullets(get(b, "patient_turns")).join(" ");
    let gaps: Vec<String> = topics.iter().take(5).map(|t| format!("{t}: {turns}")).collect();
    json!({ "gaps": gaps })
}

fn panel(b: &Bindings) -> Value {
    let context = parse_context(get(b, "context"));
    if context.is_empty() {
        return json!({
            "background_summary": "The guidebook excerpts available do not cover these questions yet.",
            "background_sources": [],
            "decision_factors": [],
            "options": [],
            "cells": [],
        });
    }
    let background: Vec<String> = context.iter().take(2).map(|(_, t)| first_sentence(t, 240)).collect();
    let background_sources: Vec<&str> = context.iter().take(2).map(|(id, _)| id.as_str()).collect();
    let factors: Vec<Value> = context
        .iter()
        .take(4)
        .map(|(id, t)| json!({ "text": first_sentence(t, 200), "sources": [id] }))
        .collect();
    let mut options = Vec::new();
    let mut cells = Vec::new();
    for (id, text) in context.iter().take(3) {
        let option = lead_phrase(text);
        if option.is_empty() || options.contains(&option) {
            continue;
        }
        for dimension in ["benefits", "risks", "certainty"] {
            cells.push(json!({
                "option": option,
                "dimension": dimension,
                "text": first_sentence(text, 160),
                "sources": [id],
            }));
        }
        options.push(option);
    }
    json!({
        "background_summary": background.join(" "),
        "background_sources": background_sources,
        "decision_factors": factors,
        "options": options,
        "cells": cells,
    })
}

const SECOND_PERSON: &[&str] = &[
    "you",
    "your",
    "yours",
    "yourself",
    "yourselves",
    "you're",
    "you've",
    "you'll",
    "you'd",
];

fn strip_second_person(text: &str) -> String {
    text.split_whitespace()
        .filter(|w| {
            let bare = w
                .trim_matches(|c: char| !c.is_alphanumeric() && c != '\'')
                .to_lowercase();
            !SECOND_PERSON.contains(&bare.as_str())
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn journey(b: &Bindings) -> Value {
    let topics = parse_bullets(get(b, "topics"));
    let mut parts = vec![format!(
        "I am preparing for my upcoming visit, and the topics on my mind are {}.",
        topics.join(", ")
    )];
    for line in get(b, "transcript").lines() {
        if let Some(said) = line.strip_prefix("Patient: ") {
            let said = strip_second_person(said);
            if !said.is_empty() {
                parts.push(format!("I shared: {said}"));
            }
        }
    }
    json!({ "narrative": parts.join(" ") })
}

const ASK_TEMPLATES: &[&str] = &[
    "Given my own priorities around {t}, which option would the doctor recommend for my situation?",
    "How does my personal health history change the plan for {t} in my case?",
    "What would my doctor personally watch for in my next months regarding {t}?",
    "Are my test results unusual in any way that affects {t} for me?",
    "How soon do I need to decide about {t}, given my schedule and family commitments?",
    "Would a second opinion change anything about {t} for someone like me?",
    "What does my doctor expect my daily routine to look like regarding {t}?",
    "Which specialists should I personally see next about {t}?",
    "How would my job and finances be affected by choices around {t}?",
    "What questions did my last results leave open about {t}?",
    "Can my care team adjust the {t} plan if my preferences shift?",
    "How often will my doctor want to check in with me about {t}?",
    "What signs in my own body should prompt me to call about {t}?",
    "Is there a clinical trial at this hospital that suits me for {t}?",
    "How will my partner's concerns be considered when we discuss {t}?",
    "What would my doctor choose for a relative in my position regarding {t}?",
];

fn candidates(b: &Bindings) -> Value {
    let topics = parse_bullets(get(b, "topics"));
    let topics = if topics.is_empty() {
        vec!["my care".to_string()]
    } else {
        topics
    };
    let context = parse_context(get(b, "context"));
    let second_batch = get(b, "batch").trim() != "1";
    let (know_prefix, skip) = if second_batch {
        ("What does the guidebook say here: ", 8)
    } else {
        ("Could you help me understand this: ", 0)
    };
    let mut questions: Vec<String> = context
        .iter()
        .skip(skip)
        .take(8)
        .map(|(_, text)| format!("{know_prefix}{}?", text.trim_end_matches(['.', '?', '!'])))
        .collect();
    let ask_count = 16usize.saturating_sub(questions.len()).max(8);
    for (i, template) in ASK_TEMPLATES.iter().cycle().take(ask_count).enumerate() {
        let topic = &topics[i % topics.len()];
        let mut q = template.replace("{t}", topic);
        if second_batch {
            q = format!("Thinking ahead, {}{}", q[..1].to_lowercase(), &q[1..]);
        }
        if i >= ASK_TEMPLATES.len() {
            q = format!("{q} (part {})", i / ASK_TEMPLATES.len() + 1);
        }
        questions.push(q);
    }
    json!({ "questions": questions })
}

fn know_them(b: &Bindings) -> Value {
    let context = parse_context(get(b, "context"));
    match context.first() {
        Some((id, text)) => json!({ "answer": first_sentence(text, 300), "sources": [id] }),
        None => json!({ "answer": "", "sources": [] }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Gateway, GatewayError};
    use crate::prompts::{bullet_lines, templates};
    use std::sync::Arc;

    fn bind(pairs: &[(&str, &str)]) -> Bindings {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn fixture_happy_path() {
        let stub = StubProvider::fixtures_only();
        stub.register_stub_fixture(prompts::KNOWLEDGE_GAPS, &[], r#"{"gaps": ["surgery vs radiation"]}"#);
        let gw = Gateway::new(Arc::new(stub));
        let b = bind(&[("topics", "- Treatment Plan"), ("patient_turns", "- hi")]);
        let out = gw.generate_structured(&templates().knowledge_gaps, &b).unwrap();
        assert_eq!(out.attempt_count, 1);
        assert_eq!(out.list("gaps"), ["surgery vs radiation".to_string()]);
    }

    #[test]
    fn most_specific_fixture_wins() {
        let stub = StubProvider::fixtures_only();
        stub.register_stub_fixture("t", &[], "generic");
        stub.register_stub_fixture("t", &[("q", "surgery")], "specific");
        let b = bind(&[("q", "about surgery please")]);
        assert_eq!(stub.find_fixture("t", &b, 1).unwrap(), "specific");
        let b = bind(&[("q", "about diet")]);
        assert_eq!(stub.find_fixture("t", &b, 1).unwrap(), "generic");
    }

    #[test]
    fn missing_required_field_exhausts_retries() {
        let stub = StubProvider::fixtures_only();
        stub.register_stub_fixture(prompts::KNOWLEDGE_GAPS, &[], r#"{"other": 1}"#);
        let gw = Gateway::new(Arc::new(stub));
        let b = bind(&[("topics", ""), ("patient_turns", "")]);
        let err = gw.generate_structured(&templates().knowledge_gaps, &b).unwrap_err();
        assert!(matches!(err, GatewayError::SchemaViolation { attempts: 3, .. }));
    }

    #[test]
    fn unknown_template_without_fixture_fails() {
        let stub = StubProvider::new();
        let req = CompletionRequest {
            template_id: "nope/v1",
            attempt: 1,
            system: String::new(),
            user: String::new(),
            bindings: &Bindings::new(),
        };
        assert_eq!(stub.complete(&req), Err(ProviderError::NoFixture("nope/v1".into())));
    }

    #[test]
    fn stub_generation_is_deterministic() {
        let gw = Gateway::new(Arc::new(StubProvider::new()));
        let b = bind(&[
            ("topics", &bullet_lines(["Treatment Plan"])),
            ("transcript", "Patient: I worry about you know, side effects"),
            ("reflections", ""),
            ("style_feedback", ""),
        ]);
        let a = gw.generate_structured(&templates().journey_narrative, &b).unwrap();
        let c = gw.generate_structured(&templates().journey_narrative, &b).unwrap();
        assert_eq!(a, c);
        let text = a.text("narrative").unwrap();
        assert!(text.contains("Treatment Plan"));
        assert!(!text.to_lowercase().split_whitespace().any(|w| w == "you"));
    }

    #[test]
    fn fixture_directory_formats() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.json"), r#"{"knowledge_gaps/v1": {"gaps": ["x"]}}"#).unwrap();
        fs::write(
            dir.path().join("b.json"),
            r#"[{"template_id": "t", "match": {"q": "z"}, "outputs": ["bad", {"ok": true}]}]"#,
        )
        .unwrap();
        fs::write(dir.path().join("ignored.txt"), "nope").unwrap();
        let stub = StubProvider::fixtures_only();
        assert_eq!(stub.load_fixture_dir(dir.path()).unwrap(), 2);
        let b = bind(&[("q", "z")]);
        assert_eq!(stub.find_fixture("t", &b, 1).unwrap(), "bad");
        assert_eq!(stub.find_fixture("t", &b, 3).unwrap(), r#"{"ok":true}"#);
        assert_eq!(
            stub.find_fixture(prompts::KNOWLEDGE_GAPS, &b, 1).unwrap(),
            r#"{"gaps":["x"]}"#
        );
    }
}

//! First-person journey narrative and the edit record kept for it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Bindings, Gateway, GatewayError};
use crate::interview::{Reflection, SelectedTopic, Speaker, TranscriptEntry};
use crate::prompts::{bullet_lines, templates};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NarrativeError {
    #[error("the original narrative has no tokens")]
    EmptyOriginal,
    #[error("narrative text is empty")]
    EmptyNarrative,
    #[error("narrative failed the style check: {reason}")]
    StyleViolation { reason: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// The generated draft, frozen, next to the patient's current edit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub original_text: String,
    pub edited_text: String,
    pub token_change_fraction: f64,
    pub confirmed: bool,
}

impl EditRecord {
    pub fn draft(original_text: String) -> Self {
        Self {
            edited_text: original_text.clone(),
            original_text,
            token_change_fraction: 0.0,
            confirmed: false,
        }
    }

    pub fn apply_edit(&mut self, edited: &str) -> Result<(), NarrativeError> {
        if edited.trim().is_empty() {
            return Err(NarrativeError::EmptyNarrative);
        }
        self.token_change_fraction = token_change_fraction(&self.original_text, edited)?;
        self.edited_text = edited.to_owned();
        Ok(())
    }

    pub fn confirm(&mut self) {
        self.confirmed = true;
    }
}

/// Levenshtein distance over tokens (insert, delete, substitute; unit cost).
pub fn token_edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Token edit distance divided by the original token count. Tokens are
/// whitespace-separated. May exceed 1 when the edit adds text.
pub fn token_change_fraction(original: &str, edited: &str) -> Result<f64, NarrativeError> {
    let a: Vec<&str> = original.split_whitespace().collect();
    if a.is_empty() {
        return Err(NarrativeError::EmptyOriginal);
    }
    let b: Vec<&str> = edited.split_whitespace().collect();
    Ok(token_edit_distance(&a, &b) as f64 / a.len() as f64)
}

const FIRST_PERSON: &[&str] = &["i", "i'm", "i've", "i'll", "i'd", "me", "my", "mine", "myself"];
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

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(|w| {
        w.replace('\u{2019}', "'")
            .trim_matches(|c: char| !c.is_alphanumeric() && c != '\'')
            .trim_matches('\'')
            .to_lowercase()
    })
}

/// First person, never addressing the patient as "you", and naming every
/// selected topic.
pub fn check_style(text: &str, topics: &[SelectedTopic]) -> Result<(), String> {
    if !words(text).any(|w| FIRST_PERSON.contains(&w.as_str())) {
        return Err("no first-person pronoun".to_owned());
    }
    if let Some(w) = words(text).find(|w| SECOND_PERSON.contains(&w.as_str())) {
        return Err(format!("uses second person (\"{w}\")"));
    }
    let lower = text.to_lowercase();
    let missing: Vec<&str> = topics
        .iter()
        .map(SelectedTopic::name)
        .filter(|name| !lower.contains(&name.to_lowercase()))
        .collect();
    if !missing.is_empty() {
        return Err(format!("does not mention {}", missing.join(", ")));
    }
    Ok(())
}

pub fn transcript_text(transcript: &[TranscriptEntry]) -> String {
    transcript
        .iter()
        .map(|t| {
            let who = match t.speaker {
                Speaker::System => "Assistant",
                Speaker::Patient => "Patient",
            };
            format!("{who}: {}", t.text.replace('\n', " "))
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Drafts the narrative, regenerating once with feedback if the first
/// draft fails [`check_style`].
pub fn generate_journey(
    transcript: &[TranscriptEntry],
    topics: &[SelectedTopic],
    reflection: &Reflection,
    gateway: &Gateway,
) -> Result<String, NarrativeError> {
    let reflections = reflection
        .prompts
        .iter()
        .zip(&reflection.answers)
        .map(|(q, a)| format!("{q} {a}"))
        .chain(reflection.notes.iter().cloned());
    let mut bindings = Bindings::from([
        (
            "topics".to_owned(),
            bullet_lines(topics.iter().map(SelectedTopic::name)),
        ),
        ("transcript".to_owned(), transcript_text(transcript)),
        ("reflections".to_owned(), bullet_lines(reflections)),
        ("style_feedback".to_owned(), String::new()),
    ]);
    let template = &templates().journey_narrative;
    let mut reason = String::new();
    for attempt in 0..2 {
        if attempt == 1 {
            tracing::warn!(%reason, "journey draft failed style check; regenerating");
            bindings.insert(
                "style_feedback".to_owned(),
                format!("\nThe previous draft was rejected: {reason}. Fix that."),
            );
        }
        let result = gateway.generate_structured(template, &bindings)?;
        let text = result.text("narrative").unwrap_or_default().trim().to_owned();
        match check_style(&text, topics) {
            Ok(()) => return Ok(text),
            Err(r) => reason = r,
        }
    }
    Err(NarrativeError::StyleViolation { reason })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interview::Topic;
    use proptest::prelude::*;

    #[test]
    fn fraction_examples() {
        assert_eq!(token_change_fraction("a b c d e", "a b x d e").unwrap(), 0.2);
        assert_eq!(token_change_fraction("a b", "a b c d").unwrap(), 1.0);
        assert_eq!(token_change_fraction("a b", "a  b\n").unwrap(), 0.0);
        assert_eq!(token_change_fraction(" ", "x"), Err(NarrativeError::EmptyOriginal));
    }

    #[test]
    fn edit_keeps_original() {
        let mut r = EditRecord::draft("I worry about my scans".into());
        r.apply_edit("I worry a lot about my scans").unwrap();
        assert_eq!(r.original_text, "I worry about my scans");
        assert_eq!(r.token_change_fraction, 0.4);
        assert_eq!(r.apply_edit("  "), Err(NarrativeError::EmptyNarrative));
        assert_eq!(r.edited_text, "I worry a lot about my scans");
    }

    #[test]
    fn style_rules() {
        let topics = [SelectedTopic {
            topic: Topic::TreatmentPlan,
            label: None,
        }];
        assert!(check_style("I want to discuss my treatment plan.", &topics).is_ok());
        assert!(check_style("The treatment plan is unclear.", &topics).is_err());
        assert!(check_style("I think you should discuss the treatment plan.", &topics).is_err());
        assert!(check_style("I want to talk.", &topics).is_err());
        assert!(check_style("I\u{2019}m unsure about my Treatment Plan", &topics).is_ok());
    }

    proptest! {
        #[test]
        fn distance_is_a_metric(a in prop::collection::vec(0u8..4, 0..12), b in prop::collection::vec(0u8..4, 0..12), c in prop::collection::vec(0u8..4, 0..12)) {
            let ab = token_edit_distance(&a, &b);
            prop_assert_eq!(ab, token_edit_distance(&b, &a));
            prop_assert_eq!(token_edit_distance(&a, &a), 0);
            prop_assert!(ab <= a.len().max(b.len()));
            prop_assert!(ab >= a.len().abs_diff(b.len()));
            prop_assert!(token_edit_distance(&a, &c) <= ab + token_edit_distance(&b, &c));
        }
    }
}

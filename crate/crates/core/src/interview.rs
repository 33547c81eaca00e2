//! Guided interview state.
//!
//! A session moves along a fixed chain of stages:
//!
//! ```text
//! TopicSelection -> ElicitKnowledge -> ReviewKnowledge -> Reflection
//!   -> NarrativeDraft -> NarrativeConfirmed -> QuestionsReady -> Closed
//! ```
//!
//! State only changes by applying [`SessionEvent`]s, so a session is the
//! left fold of its event log. Commands that produce events live in
//! [`crate::engine`].

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index::RetrievalRecord;
use crate::narrative::EditRecord;
use crate::panel::KnowledgePanel;
use crate::questions::VisitPrepOutput;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topic {
    DiagnosisAndScreening,
    TreatmentPlan,
    PhysicalWellness,
    EmotionalAndMentalHealth,
    NutritionAndDietaryGuidelines,
    LongTermManagementAndMonitoring,
    InsuranceAndFinancialSupport,
    OtherConcerns,
}

impl Topic {
    pub const MENU: [Topic; 8] = [
        Topic::DiagnosisAndScreening,
        Topic::TreatmentPlan,
        Topic::PhysicalWellness,
        Topic::EmotionalAndMentalHealth,
        Topic::NutritionAndDietaryGuidelines,
        Topic::LongTermManagementAndMonitoring,
        Topic::InsuranceAndFinancialSupport,
        Topic::OtherConcerns,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Topic::DiagnosisAndScreening => "diagnosis_and_screening",
            Topic::TreatmentPlan => "treatment_plan",
            Topic::PhysicalWellness => "physical_wellness",
            Topic::EmotionalAndMentalHealth => "emotional_and_mental_health",
            Topic::NutritionAndDietaryGuidelines => "nutrition_and_dietary_guidelines",
            Topic::LongTermManagementAndMonitoring => "long_term_management_and_monitoring",
            Topic::InsuranceAndFinancialSupport => "insurance_and_financial_support",
            Topic::OtherConcerns => "other_concerns",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Topic::DiagnosisAndScreening => "Diagnosis and Screening",
            Topic::TreatmentPlan => "Treatment Plan",
            Topic::PhysicalWellness => "Physical Wellness",
            Topic::EmotionalAndMentalHealth => "Emotional and Mental Health",
            Topic::NutritionAndDietaryGuidelines => "Nutrition and Dietary Guidelines",
            Topic::LongTermManagementAndMonitoring => "Long-Term Management and Monitoring",
            Topic::InsuranceAndFinancialSupport => "Insurance and Financial Support",
            Topic::OtherConcerns => "Other Concerns",
        }
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

impl FromStr for Topic {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Topic::MENU
            .into_iter()
            .find(|t| t.id() == s)
            .ok_or_else(|| s.to_owned())
    }
}

/// A chosen topic. `Other Concerns` may carry the patient's own label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectedTopic {
    pub topic: Topic,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl SelectedTopic {
    /// The name the patient sees and the narrative must mention.
    pub fn name(&self) -> &str {
        self.label.as_deref().unwrap_or(self.topic.display_name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SessionStage {
    TopicSelection,
    ElicitKnowledge,
    ReviewKnowledge,
    Reflection,
    NarrativeDraft,
    NarrativeConfirmed,
    QuestionsReady,
    Closed,
}

impl SessionStage {
    pub fn next(self) -> Option<SessionStage> {
        use SessionStage::*;
        Some(match self {
            TopicSelection => ElicitKnowledge,
            ElicitKnowledge => ReviewKnowledge,
            ReviewKnowledge => Reflection,
            Reflection => NarrativeDraft,
            NarrativeDraft => NarrativeConfirmed,
            NarrativeConfirmed => QuestionsReady,
            QuestionsReady => Closed,
            Closed => return None,
        })
    }

    /// Whether `self -> to` is one of the documented edges.
    pub fn can_advance_to(self, to: SessionStage) -> bool {
        self.next() == Some(to)
    }
}

impl fmt::Display for SessionStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Speaker {
    System,
    Patient,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub turn_index: u32,
    pub speaker: Speaker,
    pub text: String,
    pub timestamp: DateTime<Utc>,
    pub stage: SessionStage,
}

pub const OPENING_TURN: &str = "Hello! I'm here to help you get ready for your upcoming visit. \
Do you have any concerns, questions, or decisions to make? Choose one or more topics to start.";

pub fn topic_menu_turn() -> String {
    let names: Vec<&str> = Topic::MENU.iter().map(|t| t.display_name()).collect();
    format!("Topics: {}.", names.join("; "))
}

fn topic_list(topics: &[SelectedTopic]) -> String {
    let names: Vec<&str> = topics.iter().map(SelectedTopic::name).collect();
    match names.as_slice() {
        [] => String::new(),
        [one] => (*one).to_owned(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

/// Open-ended elicitation question asked before the `n`-th (0-based)
/// patient answer in the knowledge stage.
pub fn elicitation_prompt(n: usize, topics: &[SelectedTopic]) -> String {
    let topics = topic_list(topics);
    match n {
        0 => format!(
            "What do you already know about {topics}? Tell me in your own words, including anything that feels confusing."
        ),
        1 => format!("What are you most unsure or worried about when you think about {topics}?"),
        _ => "Is there anything else you would like to understand better before your visit?".to_owned(),
    }
}

pub const PANEL_READY_TURN: &str = "I've added background information, key points to consider, and a comparison \
of options to the Knowledge Panel. Take a look, and tell me when you're ready to think about what matters most to you.";
pub const REFLECTION_DONE_TURN: &str =
    "Thank you for sharing. When you're ready, select \"Generate My Journey\" to create your personal summary.";
pub const JOURNEY_READY_TURN: &str =
    "Here is a first draft of your journey. Edit anything that doesn't sound like you, then confirm it.";
pub const QUESTIONS_READY_TURN: &str = "Your visit questions are ready.";

pub const FIXED_REFLECTION_PROMPTS: [&str; 2] = [
    "Which factors are most important to you?",
    "Where are you still unsure?",
];

/// The two fixed reflection questions, then one per selected topic.
pub fn reflection_prompts_for(topics: &[SelectedTopic]) -> Vec<String> {
    FIXED_REFLECTION_PROMPTS
        .iter()
        .map(|p| p.to_string())
        .chain(
            topics
                .iter()
                .map(|t| format!("What matters most to you about {}?", t.name())),
        )
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reflection {
    pub prompts: Vec<String>,
    /// `answers[i]` answers `prompts[i]`.
    pub answers: Vec<String>,
    /// Responses given after every prompt was answered.
    pub notes: Vec<String>,
}

impl Reflection {
    pub fn unanswered(&self) -> &[String] {
        &self.prompts[self.answers.len().min(self.prompts.len())..]
    }

    pub fn is_complete(&self) -> bool {
        self.answers.len() >= self.prompts.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PanelTrigger {
    /// Generated when the elicitation quota was reached.
    Automatic,
    /// An explicit refresh or retry request.
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event_type", content = "payload")]
pub enum EventKind {
    SessionStarted {
        min_elicit_turns: usize,
    },
    TopicsSelected {
        topics: Vec<SelectedTopic>,
    },
    PatientTurn {
        text: String,
    },
    PanelGenerated {
        trigger: PanelTrigger,
        gaps: Vec<String>,
        panel: KnowledgePanel,
        retrievals: Vec<RetrievalRecord>,
    },
    ReflectionPromptIssued {
        prompts: Vec<String>,
    },
    JourneyGenerated {
        narrative: String,
    },
    NarrativeEdited {
        edited_text: String,
    },
    NarrativeConfirmed,
    QuestionsGenerated {
        output: VisitPrepOutput,
        retrievals: Vec<RetrievalRecord>,
    },
    SessionClosed,
    Error {
        command: crate::engine::Command,
        code: String,
        message: String,
    },
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::SessionStarted { .. } => "SessionStarted",
            EventKind::TopicsSelected { .. } => "TopicsSelected",
            EventKind::PatientTurn { .. } => "PatientTurn",
            EventKind::PanelGenerated { .. } => "PanelGenerated",
            EventKind::ReflectionPromptIssued { .. } => "ReflectionPromptIssued",
            EventKind::JourneyGenerated { .. } => "JourneyGenerated",
            EventKind::NarrativeEdited { .. } => "NarrativeEdited",
            EventKind::NarrativeConfirmed => "NarrativeConfirmed",
            EventKind::QuestionsGenerated { .. } => "QuestionsGenerated",
            EventKind::SessionClosed => "SessionClosed",
            EventKind::Error { .. } => "Error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub event_index: u64,
    pub session_id: String,
    pub timestamp: DateTime<Utc>,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ApplyError {
    #[error("event log must start with SessionStarted")]
    NotStarted,
    #[error("event {got} out of order (expected {expected})")]
    OutOfOrder { expected: u64, got: u64 },
    #[error("event belongs to session {got}, not {expected}")]
    WrongSession { expected: String, got: String },
    #[error("{event} is not valid in stage {stage}")]
    InvalidInStage { event: &'static str, stage: SessionStage },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub created_at: DateTime<Utc>,
    pub min_elicit_turns: usize,
    pub stage: SessionStage,
    pub stage_history: Vec<SessionStage>,
    pub selected_topics: Vec<SelectedTopic>,
    pub transcript: Vec<TranscriptEntry>,
    pub knowledge_gaps: Vec<String>,
    pub panel: Option<KnowledgePanel>,
    pub panel_refreshed: bool,
    pub reflection: Option<Reflection>,
    pub narrative: Option<EditRecord>,
    pub questions: Option<VisitPrepOutput>,
    pub retrieval_log: Vec<RetrievalRecord>,
    pub last_event_index: u64,
}

impl SessionState {
    /// Folds an event log into a session.
    pub fn replay(events: &[SessionEvent]) -> Result<SessionState, ApplyError> {
        let (first, rest) = events.split_first().ok_or(ApplyError::NotStarted)?;
        let mut state = SessionState::from_start(first)?;
        for event in rest {
            state.apply(event)?;
        }
        Ok(state)
    }

    pub fn from_start(event: &SessionEvent) -> Result<SessionState, ApplyError> {
        let EventKind::SessionStarted { min_elicit_turns } = &event.kind else {
            return Err(ApplyError::NotStarted);
        };
        if event.event_index != 1 {
            return Err(ApplyError::OutOfOrder {
                expected: 1,
                got: event.event_index,
            });
        }
        let mut state = SessionState {
            session_id: event.session_id.clone(),
            created_at: event.timestamp,
            min_elicit_turns: *min_elicit_turns,
            stage: SessionStage::TopicSelection,
            stage_history: vec![SessionStage::TopicSelection],
            selected_topics: Vec::new(),
            transcript: Vec::new(),
            knowledge_gaps: Vec::new(),
            panel: None,
            panel_refreshed: false,
            reflection: None,
            narrative: None,
            questions: None,
            retrieval_log: Vec::new(),
            last_event_index: 1,
        };
        state.say(Speaker::System, OPENING_TURN.to_owned(), event.timestamp);
        state.say(Speaker::System, topic_menu_turn(), event.timestamp);
        Ok(state)
    }

    pub fn elicitation_turns(&self) -> usize {
        self.transcript
            .iter()
            .filter(|t| t.speaker == Speaker::Patient && t.stage == SessionStage::ElicitKnowledge)
            .count()
    }

    pub fn patient_turns(&self) -> impl Iterator<Item = &TranscriptEntry> {
        self.transcript.iter().filter(|t| t.speaker == Speaker::Patient)
    }

    pub fn next_event_index(&self) -> u64 {
        self.last_event_index + 1
    }

    fn say(&mut self, speaker: Speaker, text: String, timestamp: DateTime<Utc>) {
        let turn_index = self.transcript.last().map_or(0, |t| t.turn_index + 1);
        self.transcript.push(TranscriptEntry {
            turn_index,
            speaker,
            text,
            timestamp,
            stage: self.stage,
        });
    }

    fn advance(&mut self, to: SessionStage) {
        debug_assert!(self.stage.can_advance_to(to));
        self.stage = to;
        self.stage_history.push(to);
    }

    fn require(&self, event: &'static str, allowed: &[SessionStage]) -> Result<(), ApplyError> {
        if allowed.contains(&self.stage) {
            Ok(())
        } else {
            Err(ApplyError::InvalidInStage {
                event,
                stage: self.stage,
            })
        }
    }

    pub fn apply(&mut self, event: &SessionEvent) -> Result<(), ApplyError> {
        use SessionStage::*;
        if event.session_id != self.session_id {
            return Err(ApplyError::WrongSession {
                expected: self.session_id.clone(),
                got: event.session_id.clone(),
            });
        }
        if event.event_index != self.next_event_index() {
            return Err(ApplyError::OutOfOrder {
                expected: self.next_event_index(),
                got: event.event_index,
            });
        }
        let ts = event.timestamp;
        let name = event.kind.name();
        match &event.kind {
            EventKind::SessionStarted { .. } => {
                return Err(ApplyError::InvalidInStage {
                    event: name,
                    stage: self.stage,
                })
            }
            EventKind::TopicsSelected { topics } => {
                self.require(name, &[TopicSelection])?;
                if topics.is_empty() {
                    return Err(ApplyError::InvalidInStage {
                        event: name,
                        stage: self.stage,
                    });
                }
                self.selected_topics = topics.clone();
                self.advance(ElicitKnowledge);
                self.say(Speaker::System, elicitation_prompt(0, topics), ts);
            }
            EventKind::PatientTurn { text } => {
                self.require(name, &[ElicitKnowledge, ReviewKnowledge, Reflection])?;
                self.say(Speaker::Patient, text.clone(), ts);
                match self.stage {
                    ElicitKnowledge => {
                        let n = self.elicitation_turns();
                        if n < self.min_elicit_turns {
                            let prompt = elicitation_prompt(n, &self.selected_topics);
                            self.say(Speaker::System, prompt, ts);
                        }
                    }
                    Reflection => {
                        let reflection = self.reflection.as_mut().expect("reflection stage has prompts");
                        if reflection.is_complete() {
                            reflection.notes.push(text.clone());
                        } else {
                            reflection.answers.push(text.clone());
                            let follow_up = match reflection.unanswered().first() {
                                Some(next) => next.clone(),
                                None => REFLECTION_DONE_TURN.to_owned(),
                            };
                            self.say(Speaker::System, follow_up, ts);
                        }
                    }
                    _ => {}
                }
            }
            EventKind::PanelGenerated {
                gaps,
                panel,
                retrievals,
                ..
            } => {
                self.require(name, &[ElicitKnowledge, ReviewKnowledge])?;
                if self.stage == ReviewKnowledge {
                    if self.panel_refreshed {
                        return Err(ApplyError::InvalidInStage {
                            event: name,
                            stage: self.stage,
                        });
                    }
                    self.panel_refreshed = true;
                } else {
                    self.advance(ReviewKnowledge);
                }
                self.knowledge_gaps = gaps.clone();
                self.panel = Some(panel.clone());
                self.retrieval_log.extend(retrievals.iter().cloned());
                self.say(Speaker::System, PANEL_READY_TURN.to_owned(), ts);
            }
            EventKind::ReflectionPromptIssued { prompts } => {
                self.require(name, &[ReviewKnowledge])?;
                self.advance(Reflection);
                self.reflection = Some(crate::interview::Reflection {
                    prompts: prompts.clone(),
                    answers: Vec::new(),
                    notes: Vec::new(),
                });
                let first = prompts
                    .first()
                    .cloned()
                    .unwrap_or_else(|| REFLECTION_DONE_TURN.to_owned());
                self.say(Speaker::System, first, ts);
            }
            EventKind::JourneyGenerated { narrative } => {
                self.require(name, &[Reflection])?;
                if !self.reflection.as_ref().is_some_and(|r| r.is_complete()) {
                    return Err(ApplyError::InvalidInStage {
                        event: name,
                        stage: self.stage,
                    });
                }
                self.advance(NarrativeDraft);
                self.narrative = Some(EditRecord::draft(narrative.clone()));
                self.say(Speaker::System, JOURNEY_READY_TURN.to_owned(), ts);
            }
            EventKind::NarrativeEdited { edited_text } => {
                self.require(name, &[NarrativeDraft])?;
                let record = self.narrative.as_mut().expect("draft stage has a narrative");
                record.apply_edit(edited_text).map_err(|_| ApplyError::InvalidInStage {
                    event: name,
                    stage: NarrativeDraft,
                })?;
            }
            EventKind::NarrativeConfirmed => {
                self.require(name, &[NarrativeDraft])?;
                self.narrative.as_mut().expect("draft stage has a narrative").confirm();
                self.advance(NarrativeConfirmed);
            }
            EventKind::QuestionsGenerated { output, retrievals } => {
                self.require(name, &[NarrativeConfirmed])?;
                self.questions = Some(output.clone());
                self.retrieval_log.extend(retrievals.iter().cloned());
                self.advance(QuestionsReady);
                self.say(Speaker::System, QUESTIONS_READY_TURN.to_owned(), ts);
            }
            EventKind::SessionClosed => {
                self.require(name, &[QuestionsReady])?;
                self.advance(Closed);
            }
            EventKind::Error { .. } => {}
        }
        self.last_event_index = event.event_index;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn ts() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2026, 3, 1, 9, 0, 0).unwrap()
    }

    fn ev(i: u64, kind: EventKind) -> SessionEvent {
        SessionEvent {
            event_index: i,
            session_id: "s1".into(),
            timestamp: ts(),
            kind,
        }
    }

    fn started() -> SessionState {
        SessionState::replay(&[ev(1, EventKind::SessionStarted { min_elicit_turns: 2 })]).unwrap()
    }

    #[test]
    fn menu_has_eight_topics_in_order() {
        let names: Vec<&str> = Topic::MENU.iter().map(|t| t.display_name()).collect();
        assert_eq!(
            names,
            [
                "Diagnosis and Screening",
                "Treatment Plan",
                "Physical Wellness",
                "Emotional and Mental Health",
                "Nutrition and Dietary Guidelines",
                "Long-Term Management and Monitoring",
                "Insurance and Financial Support",
                "Other Concerns",
            ]
        );
        for t in Topic::MENU {
            assert_eq!(t.id().parse::<Topic>().unwrap(), t);
        }
        assert!("nope".parse::<Topic>().is_err());
    }

    #[test]
    fn start_seeds_opening_and_menu() {
        let s = started();
        assert_eq!(s.stage, SessionStage::TopicSelection);
        assert_eq!(s.transcript.len(), 2);
        assert!(s.transcript[0].text.contains("concerns, questions, or decisions"));
        assert_eq!(s.transcript[1].text.matches(';').count(), 7);
    }

    #[test]
    fn stage_chain_is_linear() {
        let mut stage = SessionStage::TopicSelection;
        let mut seen = vec![stage];
        while let Some(next) = stage.next() {
            assert!(next > stage);
            assert!(stage.can_advance_to(next));
            assert!(!next.can_advance_to(stage));
            stage = next;
            seen.push(stage);
        }
        assert_eq!(seen.len(), 8);
        assert_eq!(stage, SessionStage::Closed);
    }

    #[test]
    fn reflection_prompt_count() {
        let one = [SelectedTopic {
            topic: Topic::TreatmentPlan,
            label: None,
        }];
        let prompts = reflection_prompts_for(&one);
        assert_eq!(prompts.len(), 3);
        assert_eq!(prompts[0], "Which factors are most important to you?");
        assert_eq!(prompts[1], "Where are you still unsure?");
        assert_eq!(prompts[2], "What matters most to you about Treatment Plan?");
    }

    #[test]
    fn other_concerns_uses_label() {
        let t = SelectedTopic {
            topic: Topic::OtherConcerns,
            label: Some("Fertility".into()),
        };
        assert_eq!(t.name(), "Fertility");
    }

    #[test]
    fn apply_rejects_out_of_order_and_wrong_stage() {
        let mut s = started();
        let err = s.apply(&ev(3, EventKind::NarrativeConfirmed)).unwrap_err();
        assert_eq!(err, ApplyError::OutOfOrder { expected: 2, got: 3 });
        let err = s.apply(&ev(2, EventKind::NarrativeConfirmed)).unwrap_err();
        assert!(matches!(err, ApplyError::InvalidInStage { .. }));
        let mut other = ev(2, EventKind::PatientTurn { text: "x".into() });
        other.session_id = "s2".into();
        assert!(matches!(s.apply(&other), Err(ApplyError::WrongSession { .. })));
    }

    #[test]
    fn elicitation_follow_ups_stop_at_quota() {
        let mut s = started();
        let topics = vec![SelectedTopic {
            topic: Topic::TreatmentPlan,
            label: None,
        }];
        s.apply(&ev(2, EventKind::TopicsSelected { topics })).unwrap();
        s.apply(&ev(3, EventKind::PatientTurn { text: "a".into() })).unwrap();
        s.apply(&ev(4, EventKind::PatientTurn { text: "b".into() })).unwrap();
        let speakers: Vec<Speaker> = s.transcript.iter().map(|t| t.speaker).collect();
        use Speaker::*;
        assert_eq!(speakers, [System, System, System, Patient, System, Patient]);
        assert!(s.transcript.windows(2).all(|w| w[0].turn_index < w[1].turn_index));
        assert_eq!(s.elicitation_turns(), 2);
    }

    #[test]
    fn event_json_shape() {
        let e = ev(2, EventKind::PatientTurn { text: "hi".into() });
        let v = serde_json::to_value(&e).unwrap();
        assert_eq!(v["event_type"], "PatientTurn");
        assert_eq!(v["payload"]["text"], "hi");
        assert_eq!(v["event_index"], 2);
        let back: SessionEvent = serde_json::from_value(v).unwrap();
        assert_eq!(back, e);
    }
}

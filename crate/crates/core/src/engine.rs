//! Session commands. Each command validates against the current state,
//! does its generation work, then emits events; the state is updated only
//! by applying those events.

use std::collections::HashSet;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::embedding::EmbeddingProvider;
use crate::gateway::{Gateway, GatewayError};
use crate::index::{LiveIndex, VectorIndex};
use crate::ingest::SegmentId;
use crate::interview::{
    reflection_prompts_for, ApplyError, EventKind, PanelTrigger, SelectedTopic, SessionEvent, SessionStage,
    SessionState, Topic,
};
use crate::narrative::{generate_journey, NarrativeError};
use crate::panel::{build_panel, identify_knowledge_gaps, PanelError, DEFAULT_PANEL_K};
use crate::questions::{prepare_visit_questions, CandidateContext, QuestionSettings, QuestionsError};

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// A clock that returns whatever it was last set to.
pub struct ManualClock(Mutex<DateTime<Utc>>);

impl ManualClock {
    pub fn new(at: DateTime<Utc>) -> Self {
        Self(Mutex::new(at))
    }

    pub fn set(&self, at: DateTime<Utc>) {
        *self.0.lock().unwrap_or_else(|e| e.into_inner()) = at;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.0.lock().unwrap_or_else(|e| e.into_inner())
    }
}

#[derive(Debug, Error)]
#[error("could not persist event: {0}")]
pub struct SinkError(pub String);

/// Where emitted events go before they are applied (normally the event log).
pub trait EventSink {
    fn record(&mut self, event: &SessionEvent) -> Result<(), SinkError>;
}

impl EventSink for Vec<SessionEvent> {
    fn record(&mut self, event: &SessionEvent) -> Result<(), SinkError> {
        self.push(event.clone());
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Command {
    SelectTopics {
        topic_ids: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        other_label: Option<String>,
    },
    SubmitResponse {
        text: String,
    },
    RefreshPanel,
    BeginReflection,
    RequestJourney,
    EditNarrative {
        text: String,
    },
    ConfirmNarrative,
    GenerateQuestions,
    Close,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// The request is valid but not in the current stage.
    Conflict,
    /// Malformed or unacceptable input.
    Invalid,
    /// A provider or generation step failed; retrying may help.
    Upstream,
    /// No guidebook has been ingested.
    Unavailable,
    Internal,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SessionError {
    #[error("cannot {action} in stage {stage}")]
    WrongStage { stage: SessionStage, action: &'static str },
    #[error("unknown topic `{0}`")]
    UnknownTopic(String),
    #[error("select at least one topic")]
    EmptyTopics,
    #[error("response text is empty")]
    EmptyResponse,
    #[error("narrative text is empty")]
    EmptyNarrative,
    #[error("{remaining} more answer(s) needed before the knowledge panel can be built")]
    NotEnoughElicitation { remaining: usize },
    #[error("the knowledge panel can only be refreshed once")]
    PanelRefreshLimit,
    #[error("reflection is not complete; {} prompt(s) unanswered", unanswered.len())]
    ReflectionIncomplete { unanswered: Vec<String> },
    #[error("no guidebook has been ingested yet")]
    EmptyIndex,
    #[error("generated content cited segments that were never retrieved: {cited:?}")]
    GroundingViolation { cited: Vec<SegmentId> },
    #[error("narrative failed the style check: {reason}")]
    StyleViolation { reason: String },
    #[error("only {got} distinct candidate questions were generated")]
    TooFewCandidates { got: usize },
    #[error("not enough candidates: {know_deficit} know-them and {ask_deficit} ask-them short")]
    InsufficientCandidates { know_deficit: usize, ask_deficit: usize },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("retrieval failed: {0}")]
    Retrieval(String),
    #[error("{0}")]
    Storage(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl SessionError {
    pub fn code(&self) -> &'static str {
        match self {
            SessionError::WrongStage { .. } => "WrongStage",
            SessionError::UnknownTopic(_) => "UnknownTopic",
            SessionError::EmptyTopics => "EmptyTopics",
            SessionError::EmptyResponse => "EmptyResponse",
            SessionError::EmptyNarrative => "EmptyNarrative",
            SessionError::NotEnoughElicitation { .. } => "NotEnoughElicitation",
            SessionError::PanelRefreshLimit => "PanelRefreshLimit",
            SessionError::ReflectionIncomplete { .. } => "ReflectionIncomplete",
            SessionError::EmptyIndex => "EmptyIndex",
            SessionError::GroundingViolation { .. } => "GroundingViolation",
            SessionError::StyleViolation { .. } => "StyleViolation",
            SessionError::TooFewCandidates { .. } => "TooFewCandidates",
            SessionError::InsufficientCandidates { .. } => "InsufficientCandidates",
            SessionError::Gateway(GatewayError::SchemaViolation { .. }) => "SchemaViolation",
            SessionError::Gateway(GatewayError::ProviderUnavailable(_)) => "ProviderUnavailable",
            SessionError::Gateway(GatewayError::ProviderTimeout) => "ProviderTimeout",
            SessionError::Gateway(GatewayError::MissingBinding { .. }) => "MissingBinding",
            SessionError::Gateway(GatewayError::InvalidTemplate(_)) => "InvalidTemplate",
            SessionError::Retrieval(_) => "RetrievalFailed",
            SessionError::Storage(_) => "StorageError",
            SessionError::Internal(_) => "Internal",
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            SessionError::WrongStage { .. }
            | SessionError::NotEnoughElicitation { .. }
            | SessionError::PanelRefreshLimit
            | SessionError::ReflectionIncomplete { .. } => ErrorClass::Conflict,
            SessionError::UnknownTopic(_)
            | SessionError::EmptyTopics
            | SessionError::EmptyResponse
            | SessionError::EmptyNarrative => ErrorClass::Invalid,
            SessionError::GroundingViolation { .. }
            | SessionError::StyleViolation { .. }
            | SessionError::TooFewCandidates { .. }
            | SessionError::InsufficientCandidates { .. }
            | SessionError::Gateway(GatewayError::SchemaViolation { .. })
            | SessionError::Gateway(GatewayError::ProviderUnavailable(_))
            | SessionError::Gateway(GatewayError::ProviderTimeout)
            | SessionError::Retrieval(_) => ErrorClass::Upstream,
            SessionError::EmptyIndex => ErrorClass::Unavailable,
            SessionError::Gateway(_) | SessionError::Storage(_) | SessionError::Internal(_) => ErrorClass::Internal,
        }
    }

    pub fn details(&self) -> Value {
        match self {
            SessionError::WrongStage { stage, action } => json!({ "stage": stage, "action": action }),
            SessionError::ReflectionIncomplete { unanswered } => json!({ "unanswered": unanswered }),
            SessionError::NotEnoughElicitation { remaining } => json!({ "remaining": remaining }),
            SessionError::InsufficientCandidates {
                know_deficit,
                ask_deficit,
            } => {
                json!({ "know_deficit": know_deficit, "ask_deficit": ask_deficit })
            }
            SessionError::GroundingViolation { cited } => json!({ "cited": cited }),
            SessionError::UnknownTopic(t) => json!({ "topic_id": t }),
            _ => Value::Null,
        }
    }
}

impl From<PanelError> for SessionError {
    fn from(e: PanelError) -> Self {
        match e {
            PanelError::NoPatientTurns => SessionError::NotEnoughElicitation { remaining: 1 },
            PanelError::EmptyIndex => SessionError::EmptyIndex,
            PanelError::GroundingViolation { cited } => SessionError::GroundingViolation { cited },
            PanelError::Gateway(g) => SessionError::Gateway(g),
            PanelError::Index(m) => SessionError::Retrieval(m),
        }
    }
}

impl From<NarrativeError> for SessionError {
    fn from(e: NarrativeError) -> Self {
        match e {
            NarrativeError::EmptyOriginal | NarrativeError::EmptyNarrative => SessionError::EmptyNarrative,
            NarrativeError::StyleViolation { reason } => SessionError::StyleViolation { reason },
            NarrativeError::Gateway(g) => SessionError::Gateway(g),
        }
    }
}

impl From<QuestionsError> for SessionError {
    fn from(e: QuestionsError) -> Self {
        match e {
            QuestionsError::TooFewCandidates { got } => SessionError::TooFewCandidates { got },
            QuestionsError::InsufficientCandidates {
                know_deficit,
                ask_deficit,
            } => SessionError::InsufficientCandidates {
                know_deficit,
                ask_deficit,
            },
            QuestionsError::GroundingViolation { cited, .. } => SessionError::GroundingViolation { cited },
            QuestionsError::EmptyIndex => SessionError::EmptyIndex,
            QuestionsError::Gateway(g) => SessionError::Gateway(g),
            QuestionsError::Index(m) => SessionError::Retrieval(m),
        }
    }
}

impl From<SinkError> for SessionError {
    fn from(e: SinkError) -> Self {
        SessionError::Storage(e.to_string())
    }
}

impl From<ApplyError> for SessionError {
    fn from(e: ApplyError) -> Self {
        SessionError::Internal(e.to_string())
    }
}

#[derive(Debug, Clone)]
pub struct EngineSettings {
    pub min_elicit_turns: usize,
    pub panel_k: usize,
    pub threshold: f64,
    pub classify_k: usize,
}

impl Default for EngineSettings {
    fn default() -> Self {
        Self {
            min_elicit_turns: 2,
            panel_k: DEFAULT_PANEL_K,
            threshold: crate::questions::DEFAULT_THRESHOLD,
            classify_k: crate::questions::DEFAULT_CLASSIFY_K,
        }
    }
}

pub struct SessionEngine {
    index: Arc<LiveIndex>,
    embedder: Arc<dyn EmbeddingProvider>,
    gateway: Arc<Gateway>,
    settings: EngineSettings,
    clock: Arc<dyn Clock>,
}

struct Emitter<'a> {
    state: &'a mut SessionState,
    sink: &'a mut dyn EventSink,
    now: DateTime<Utc>,
}

impl Emitter<'_> {
    fn emit(&mut self, kind: EventKind) -> Result<(), SessionError> {
        let event = SessionEvent {
            event_index: self.state.next_event_index(),
            session_id: self.state.session_id.clone(),
            timestamp: self.now,
            kind,
        };
        // Validate on a scratch copy first so a rejected event is never persisted.
        let mut next = self.state.clone();
        next.apply(&event)?;
        self.sink.record(&event)?;
        *self.state = next;
        Ok(())
    }
}

fn wrong_stage(state: &SessionState, action: &'static str) -> SessionError {
    SessionError::WrongStage {
        stage: state.stage,
        action,
    }
}

impl SessionEngine {
    pub fn new(
        index: Arc<LiveIndex>,
        embedder: Arc<dyn EmbeddingProvider>,
        gateway: Arc<Gateway>,
        settings: EngineSettings,
        clock: Arc<dyn Clock>,
    ) -> Self {
        Self {
            index,
            embedder,
            gateway,
            settings,
            clock,
        }
    }

    pub fn settings(&self) -> &EngineSettings {
        &self.settings
    }

    pub fn live_index(&self) -> &Arc<LiveIndex> {
        &self.index
    }

    /// The same engine with a different clock; used for re-execution.
    pub fn with_clock(&self, clock: Arc<dyn Clock>) -> SessionEngine {
        SessionEngine {
            index: self.index.clone(),
            embedder: self.embedder.clone(),
            gateway: self.gateway.clone(),
            settings: self.settings.clone(),
            clock,
        }
    }

    pub fn start_session(&self, sink: &mut dyn EventSink) -> Result<SessionState, SessionError> {
        self.start_session_with_id(uuid::Uuid::new_v4().to_string(), sink)
    }

    pub fn start_session_with_id(
        &self,
        session_id: String,
        sink: &mut dyn EventSink,
    ) -> Result<SessionState, SessionError> {
        let event = SessionEvent {
            event_index: 1,
            session_id,
            timestamp: self.clock.now(),
            kind: EventKind::SessionStarted {
                min_elicit_turns: self.settings.min_elicit_turns,
            },
        };
        let state = SessionState::from_start(&event)?;
        sink.record(&event)?;
        Ok(state)
    }

    /// Runs `command`. A failure (other than storage) is itself logged as
    /// an `Error` event and leaves the stage unchanged.
    pub fn execute(
        &self,
        state: &mut SessionState,
        command: Command,
        sink: &mut dyn EventSink,
    ) -> Result<(), SessionError> {
        let mut emitter = Emitter {
            state,
            sink,
            now: self.clock.now(),
        };
        let result = self.run(&command, &mut emitter);
        if let Err(e) = &result {
            if !matches!(e, SessionError::Storage(_) | SessionError::Internal(_)) {
                emitter.emit(EventKind::Error {
                    command,
                    code: e.code().to_owned(),
                    message: e.to_string(),
                })?;
            }
        }
        result
    }

    fn index(&self) -> Result<Arc<VectorIndex>, SessionError> {
        self.index
            .current()
            .filter(|i| !i.is_empty())
            .ok_or(SessionError::EmptyIndex)
    }

    fn run(&self, command: &Command, em: &mut Emitter<'_>) -> Result<(), SessionError> {
        use SessionStage::*;
        let stage = em.state.stage;
        match command {
            Command::SelectTopics { topic_ids, other_label } => {
                if stage != TopicSelection {
                    return Err(wrong_stage(em.state, "select topics"));
                }
                if topic_ids.is_empty() {
                    return Err(SessionError::EmptyTopics);
                }
                let mut seen = HashSet::new();
                let mut topics = Vec::new();
                for id in topic_ids {
                    let topic: Topic = id.parse().map_err(SessionError::UnknownTopic)?;
                    if seen.insert(topic) {
                        let label = (topic == Topic::OtherConcerns)
                            .then(|| other_label.as_deref().map(str::trim).filter(|l| !l.is_empty()))
                            .flatten()
                            .map(str::to_owned);
                        topics.push(SelectedTopic { topic, label });
                    }
                }
                em.emit(EventKind::TopicsSelected { topics })
            }
            Command::SubmitResponse { text } => {
                if !matches!(stage, ElicitKnowledge | ReviewKnowledge | Reflection) {
                    return Err(wrong_stage(em.state, "submit a response"));
                }
                let text = text.trim();
                if text.is_empty() {
                    return Err(SessionError::EmptyResponse);
                }
                em.emit(EventKind::PatientTurn { text: text.to_owned() })?;
                if em.state.stage == ElicitKnowledge && em.state.elicitation_turns() >= em.state.min_elicit_turns {
                    self.generate_panel(em, PanelTrigger::Automatic)?;
                }
                Ok(())
            }
            Command::RefreshPanel => match stage {
                ElicitKnowledge => {
                    let remaining = em.state.min_elicit_turns.saturating_sub(em.state.elicitation_turns());
                    if remaining > 0 {
                        return Err(SessionError::NotEnoughElicitation { remaining });
                    }
                    self.generate_panel(em, PanelTrigger::Manual)
                }
                ReviewKnowledge if em.state.panel_refreshed => Err(SessionError::PanelRefreshLimit),
                ReviewKnowledge => self.generate_panel(em, PanelTrigger::Manual),
                _ => Err(wrong_stage(em.state, "refresh the knowledge panel")),
            },
            Command::BeginReflection => {
                if stage != ReviewKnowledge {
                    return Err(wrong_stage(em.state, "begin reflection"));
                }
                let prompts = reflection_prompts_for(&em.state.selected_topics);
                em.emit(EventKind::ReflectionPromptIssued { prompts })
            }
            Command::RequestJourney => {
                if stage != Reflection {
                    return Err(wrong_stage(em.state, "generate the journey"));
                }
                let reflection = em.state.reflection.as_ref().expect("reflection stage has prompts");
                if !reflection.is_complete() {
                    return Err(SessionError::ReflectionIncomplete {
                        unanswered: reflection.unanswered().to_vec(),
                    });
                }
                let narrative = generate_journey(
                    &em.state.transcript,
                    &em.state.selected_topics,
                    reflection,
                    &self.gateway,
                )?;
                em.emit(EventKind::JourneyGenerated { narrative })
            }
            Command::EditNarrative { text } => {
                if stage != NarrativeDraft {
                    return Err(wrong_stage(em.state, "edit the narrative"));
                }
                if text.trim().is_empty() {
                    return Err(SessionError::EmptyNarrative);
                }
                em.emit(EventKind::NarrativeEdited {
                    edited_text: text.clone(),
                })
            }
            Command::ConfirmNarrative => {
                if stage != NarrativeDraft {
                    return Err(wrong_stage(em.state, "confirm the narrative"));
                }
                em.emit(EventKind::NarrativeConfirmed)
            }
            Command::GenerateQuestions => {
                if stage != NarrativeConfirmed {
                    return Err(wrong_stage(em.state, "generate visit questions"));
                }
                let index = self.index()?;
                let panel = em.state.panel.as_ref().expect("confirmed sessions have a panel");
                let narrative = em
                    .state
                    .narrative
                    .as_ref()
                    .expect("confirmed sessions have a narrative");
                let ctx = CandidateContext {
                    topics: &em.state.selected_topics,
                    narrative: &narrative.edited_text,
                    panel,
                    index: &index,
                };
                let settings = QuestionSettings {
                    threshold: self.settings.threshold,
                    k: self.settings.classify_k,
                };
                let build = prepare_visit_questions(&ctx, self.embedder.as_ref(), &self.gateway, &settings)?;
                em.emit(EventKind::QuestionsGenerated {
                    output: build.output,
                    retrievals: build.retrievals,
                })
            }
            Command::Close => {
                if stage != QuestionsReady {
                    return Err(wrong_stage(em.state, "close the session"));
                }
                em.emit(EventKind::SessionClosed)
            }
        }
    }

    fn generate_panel(&self, em: &mut Emitter<'_>, trigger: PanelTrigger) -> Result<(), SessionError> {
        let index = self.index()?;
        let turns: Vec<String> = em.state.patient_turns().map(|t| t.text.clone()).collect();
        let gaps = identify_knowledge_gaps(&turns, &em.state.selected_topics, &self.gateway)?;
        let build = build_panel(
            gaps,
            &em.state.selected_topics,
            &index,
            self.embedder.as_ref(),
            &self.gateway,
            self.settings.panel_k,
        )?;
        em.emit(EventKind::PanelGenerated {
            trigger,
            gaps: build.gaps,
            panel: build.panel,
            retrievals: build.retrievals,
        })
    }

    pub fn select_topics(
        &self,
        state: &mut SessionState,
        topic_ids: &[&str],
        sink: &mut dyn EventSink,
    ) -> Result<(), SessionError> {
        let command = Command::SelectTopics {
            topic_ids: topic_ids.iter().map(|s| s.to_string()).collect(),
            other_label: None,
        };
        self.execute(state, command, sink)
    }

    pub fn submit_response(
        &self,
        state: &mut SessionState,
        text: &str,
        sink: &mut dyn EventSink,
    ) -> Result<(), SessionError> {
        self.execute(state, Command::SubmitResponse { text: text.to_owned() }, sink)
    }

    /// Issues the reflection prompts and returns them.
    pub fn reflection_prompts(
        &self,
        state: &mut SessionState,
        sink: &mut dyn EventSink,
    ) -> Result<Vec<String>, SessionError> {
        self.execute(state, Command::BeginReflection, sink)?;
        Ok(state.reflection.as_ref().map(|r| r.prompts.clone()).unwrap_or_default())
    }

    pub fn request_journey(&self, state: &mut SessionState, sink: &mut dyn EventSink) -> Result<String, SessionError> {
        self.execute(state, Command::RequestJourney, sink)?;
        Ok(state
            .narrative
            .as_ref()
            .map(|n| n.original_text.clone())
            .unwrap_or_default())
    }

    /// Re-runs the commands behind `events` against a fresh session with
    /// the recorded timestamps and returns the events that produced.
    /// Deterministic providers yield the same log.
    pub fn reexecute(&self, events: &[SessionEvent]) -> Result<Vec<SessionEvent>, SessionError> {
        let first = events
            .first()
            .ok_or_else(|| SessionError::Internal("empty event log".into()))?;
        let clock = Arc::new(ManualClock::new(first.timestamp));
        let engine = self.with_clock(clock.clone());
        let mut out: Vec<SessionEvent> = Vec::with_capacity(events.len());
        let mut state = engine.start_session_with_id(first.session_id.clone(), &mut out)?;
        let mut i = 1;
        while i < events.len() {
            let root = &events[i];
            let command = command_for(&root.kind)
                .ok_or_else(|| SessionError::Internal(format!("event {} has no command", root.event_index)))?;
            clock.set(root.timestamp);
            let before = out.len();
            // Failures are expected where the original run failed too.
            let _ = engine.execute(&mut state, command, &mut out);
            let produced = out.len() - before;
            if produced == 0 {
                return Err(SessionError::Internal(format!(
                    "re-running event {} produced nothing",
                    root.event_index
                )));
            }
            i += produced;
        }
        Ok(out)
    }
}

/// The command that produced an event when the event is the first one the
/// command emitted.
pub fn command_for(kind: &EventKind) -> Option<Command> {
    Some(match kind {
        EventKind::SessionStarted { .. } => return None,
        EventKind::TopicsSelected { topics } => Command::SelectTopics {
            topic_ids: topics.iter().map(|t| t.topic.id().to_owned()).collect(),
            other_label: topics.iter().find_map(|t| t.label.clone()),
        },
        EventKind::PatientTurn { text } => Command::SubmitResponse { text: text.clone() },
        EventKind::PanelGenerated {
            trigger: PanelTrigger::Manual,
            ..
        } => Command::RefreshPanel,
        EventKind::PanelGenerated {
            trigger: PanelTrigger::Automatic,
            ..
        } => return None,
        EventKind::ReflectionPromptIssued { .. } => Command::BeginReflection,
        EventKind::JourneyGenerated { .. } => Command::RequestJourney,
        EventKind::NarrativeEdited { edited_text } => Command::EditNarrative {
            text: edited_text.clone(),
        },
        EventKind::NarrativeConfirmed => Command::ConfirmNarrative,
        EventKind::QuestionsGenerated { .. } => Command::GenerateQuestions,
        EventKind::SessionClosed => Command::Close,
        EventKind::Error { command, .. } => command.clone(),
    })
}

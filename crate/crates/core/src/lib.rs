//! Clinic-visit preparation: guidebook ingestion and retrieval, a staged
//! patient interview, a cited knowledge panel, a first-person journey
//! narrative and visit questions split by what the guidebook can answer.

pub mod embedding;
pub mod engine;
pub mod eventlog;
pub mod gateway;
pub mod index;
pub mod ingest;
pub mod interview;
pub mod jobs;
pub mod narrative;
pub mod panel;
pub mod prompts;
pub mod questions;
pub mod stub;

pub use engine::{Command, EngineSettings, SessionEngine, SessionError};
pub use interview::{SessionEvent, SessionStage, SessionState, Topic};

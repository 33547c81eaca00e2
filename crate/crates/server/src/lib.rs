//! HTTP service for guided visit preparation.

pub mod app;
pub mod config;
pub mod error;

pub use app::{router, AppState};
pub use config::Config;
pub use error::ApiError;

//! Settings shared by every subcommand. Each flag can also come from the
//! environment.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use clap::Args;
use thiserror::Error;
use visitprep_core::embedding::{EmbeddingProvider, HttpEmbedder, StubEmbedder};
use visitprep_core::gateway::{Gateway, HttpProvider, TextProvider};
use visitprep_core::ingest::SegmentationConfig;
use visitprep_core::stub::StubProvider;
use visitprep_core::EngineSettings;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Invalid(String),
    #[error("provider setup failed: {0}")]
    Provider(String),
}

#[derive(Debug, Clone, Args)]
pub struct Config {
    /// Holds `index/`, `sessions/` and `uploads/`.
    #[arg(long, env = "VISITPREP_DATA_DIR", default_value = "./data")]
    pub data_dir: PathBuf,

    /// Answerability threshold.
    #[arg(long, env = "VISITPREP_THETA", default_value_t = 0.60)]
    pub theta: f64,

    /// Segments retrieved per knowledge gap.
    #[arg(long, env = "VISITPREP_PANEL_K", default_value_t = 6)]
    pub panel_k: usize,

    /// Segments retrieved per candidate question.
    #[arg(long, env = "VISITPREP_CLASSIFY_K", default_value_t = 4)]
    pub classify_k: usize,

    #[arg(long, env = "VISITPREP_MIN_ELICIT_TURNS", default_value_t = 2)]
    pub min_elicit_turns: usize,

    #[arg(long, env = "VISITPREP_CHUNK_MAX", default_value_t = 1200)]
    pub chunk_max: usize,

    #[arg(long, env = "VISITPREP_CHUNK_OVERLAP", default_value_t = 200)]
    pub chunk_overlap: usize,

    /// Base URL of an OpenAI-compatible API, e.g. `http://localhost:8000/v1`.
    #[arg(long, env = "LLM_ENDPOINT")]
    pub llm_endpoint: Option<String>,

    #[arg(long, env = "LLM_API_KEY", hide_env_values = true)]
    pub llm_api_key: Option<String>,

    #[arg(long, env = "LLM_MODEL", default_value = "gpt-4o-mini")]
    pub llm_model: String,

    /// Defaults to the LLM endpoint.
    #[arg(long, env = "EMBEDDING_ENDPOINT")]
    pub embedding_endpoint: Option<String>,

    #[arg(long, env = "EMBEDDING_MODEL", default_value = "text-embedding-3-small")]
    pub embedding_model: String,

    #[arg(long, env = "EMBEDDING_DIMENSION", default_value_t = 1536)]
    pub embedding_dimension: usize,

    #[arg(long, env = "PROVIDER_TIMEOUT_SECS", default_value_t = 60)]
    pub provider_timeout_secs: u64,

    /// Use the deterministic offline providers instead of HTTP ones.
    #[arg(long, env = "STUB_MODE", value_parser = clap::builder::BoolishValueParser::new(), action = clap::ArgAction::SetTrue)]
    pub stub_mode: bool,

    /// JSON fixtures for the stub text provider.
    #[arg(long, env = "STUB_FIXTURES_DIR")]
    pub stub_fixtures_dir: Option<PathBuf>,
}

impl Config {
    /// Stub providers and default parameters over `data_dir`.
    pub fn stub(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            theta: 0.60,
            panel_k: 6,
            classify_k: 4,
            min_elicit_turns: 2,
            chunk_max: 1200,
            chunk_overlap: 200,
            llm_endpoint: None,
            llm_api_key: None,
            llm_model: String::new(),
            embedding_endpoint: None,
            embedding_model: String::new(),
            embedding_dimension: StubEmbedder::DEFAULT_DIMENSION,
            provider_timeout_secs: 60,
            stub_mode: true,
            stub_fixtures_dir: None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(ConfigError::Invalid(format!(
                "theta must be in (0, 1], got {}",
                self.theta
            )));
        }
        if self.panel_k == 0 || self.classify_k == 0 {
            return Err(ConfigError::Invalid("retrieval k must be at least 1".into()));
        }
        self.chunking()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !self.stub_mode && self.llm_endpoint.is_none() {
            return Err(ConfigError::Invalid(
                "LLM_ENDPOINT is not set; set it or run with STUB_MODE=1".into(),
            ));
        }
        Ok(())
    }

    pub fn chunking(&self) -> SegmentationConfig {
        SegmentationConfig {
            max_chars: self.chunk_max,
            overlap_chars: self.chunk_overlap,
            ..SegmentationConfig::default()
        }
    }

    pub fn engine_settings(&self) -> EngineSettings {
        EngineSettings {
            min_elicit_turns: self.min_elicit_turns,
            panel_k: self.panel_k,
            threshold: self.theta,
            classify_k: self.classify_k,
        }
    }

    pub fn index_dir(&self) -> PathBuf {
        self.data_dir.join("index")
    }

    pub fn sessions_dir(&self) -> PathBuf {
        self.data_dir.join("sessions")
    }

    pub fn uploads_dir(&self) -> PathBuf {
        self.data_dir.join("uploads")
    }

    fn timeout(&self) -> Duration {
        Duration::from_secs(self.provider_timeout_secs)
    }

    /// Must be called outside an async context: the HTTP clients are blocking.
    pub fn embedder(&self) -> Result<Arc<dyn EmbeddingProvider>, ConfigError> {
        if self.stub_mode {
            return Ok(Arc::new(StubEmbedder::new(self.embedding_dimension)));
        }
        let endpoint = self
            .embedding_endpoint
            .clone()
            .or_else(|| self.llm_endpoint.clone())
            .unwrap_or_default();
        let embedder = HttpEmbedder::new(
            endpoint,
            self.llm_api_key.clone(),
            self.embedding_model.clone(),
            self.embedding_dimension,
            self.timeout(),
        )
        .map_err(|e| ConfigError::Provider(e.to_string()))?;
        Ok(Arc::new(embedder))
    }

    pub fn gateway(&self) -> Result<Arc<Gateway>, ConfigError> {
        let provider: Arc<dyn TextProvider> = if self.stub_mode {
            let stub = StubProvider::new();
            if let Some(dir) = &self.stub_fixtures_dir {
                let n = stub
                    .load_fixture_dir(dir)
                    .map_err(|e| ConfigError::Provider(e.to_string()))?;
                tracing::info!(fixtures = n, dir = %dir.display(), "loaded stub fixtures");
            }
            Arc::new(stub)
        } else {
            let provider = HttpProvider::new(
                self.llm_endpoint.clone().unwrap_or_default(),
                self.llm_api_key.clone(),
                self.llm_model.clone(),
                self.timeout(),
            )
            .map_err(|e| ConfigError::Provider(e.to_string()))?;
            Arc::new(provider)
        };
        Ok(Arc::new(Gateway::new(provider)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Parser;

    #[derive(Parser)]
    struct Cli {
        #[command(flatten)]
        config: Config,
    }

    #[test]
    fn flags_and_defaults() {
        let c = Cli::parse_from(["x", "--stub-mode", "--theta", "0.75"]).config;
        assert!(c.stub_mode);
        assert_eq!(c.theta, 0.75);
        assert_eq!(
            (c.chunk_max, c.chunk_overlap, c.panel_k, c.classify_k),
            (1200, 200, 6, 4)
        );
        assert!(c.validate().is_ok());
    }

    #[test]
    fn invalid_settings_are_rejected() {
        let mut c = Config::stub("d");
        c.theta = 0.0;
        assert!(c.validate().is_err());
        let mut c = Config::stub("d");
        c.chunk_overlap = c.chunk_max;
        assert!(c.validate().is_err());
        let mut c = Config::stub("d");
        c.stub_mode = false;
        assert!(c.validate().is_err());
    }
}

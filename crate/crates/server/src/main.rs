use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use chrono::{Duration, Utc};
use clap::{Parser, Subcommand};
use visitprep_core::engine::SystemClock;
use visitprep_core::eventlog::EventStore;
use visitprep_core::ingest::DefaultExtractor;
use visitprep_core::jobs::{run_ingest, IndexStore, IngestContext, IngestRequest};
use visitprep_core::SessionEngine;
use visitprep_server::{router, AppState, Config};

#[derive(Parser)]
#[command(
    name = "visitprep",
    version,
    about = "Guided clinic-visit preparation over a trusted guidebook"
)]
struct Cli {
    #[command(flatten)]
    config: Config,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the HTTP API.
    Serve {
        #[arg(long, env = "VISITPREP_LISTEN", default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
        /// Bearer token for /api/admin; admin endpoints are off when unset.
        #[arg(long, env = "VISITPREP_ADMIN_TOKEN", hide_env_values = true)]
        admin_token: Option<String>,
    },
    /// Ingest a folder of numbered page files (`1.pdf`, `2.txt`, ...) and publish the index.
    Ingest {
        #[arg(long)]
        book_id: String,
        folder: PathBuf,
    },
    /// Delete session event logs.
    PurgeSessions {
        /// Specific sessions to delete.
        ids: Vec<String>,
        /// Delete sessions started more than this many days ago.
        #[arg(long, conflicts_with = "all")]
        older_than_days: Option<i64>,
        #[arg(long)]
        all: bool,
    },
    /// Rebuild a session from its event log and print it as JSON.
    Replay {
        session_id: String,
        /// Also re-run the logged commands and check they reproduce the log
        /// (only meaningful with deterministic providers).
        #[arg(long)]
        verify: bool,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

type CliResult = Result<(), Box<dyn std::error::Error>>;

fn run(cli: Cli) -> CliResult {
    let config = cli.config;
    match cli.command {
        Cmd::Serve { listen, admin_token } => serve(&config, listen, admin_token),
        Cmd::Ingest { book_id, folder } => ingest(&config, book_id, folder),
        Cmd::PurgeSessions {
            ids,
            older_than_days,
            all,
        } => purge(&config, ids, older_than_days, all),
        Cmd::Replay { session_id, verify } => replay(&config, &session_id, verify),
    }
}

fn serve(config: &Config, listen: SocketAddr, admin_token: Option<String>) -> CliResult {
    if admin_token.as_deref().is_none_or(str::is_empty) {
        tracing::warn!("VISITPREP_ADMIN_TOKEN is not set; admin endpoints are disabled");
    }
    // Built before the runtime: the HTTP provider clients are blocking.
    let state = Arc::new(AppState::build(config, admin_token)?);
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let app = router(state.clone());
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(listen).await?;
        tracing::info!(%listen, "serving");
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })?;
    drop(runtime);
    drop(state);
    Ok(())
}

fn ingest(config: &Config, book_id: String, folder: PathBuf) -> CliResult {
    config.validate()?;
    let store = Arc::new(IndexStore::open(config.index_dir())?);
    let ctx = IngestContext {
        extractor: Arc::new(DefaultExtractor),
        embedder: config.embedder()?,
        store,
    };
    let req = IngestRequest {
        book_id,
        source_dir: folder,
        config: config.chunking(),
    };
    let mut last = -1.0;
    let report = run_ingest(&req, &ctx, &mut |status, progress| {
        if progress - last >= 0.05 {
            eprintln!("{status:?} {:>3.0}%", progress * 100.0);
            last = progress;
        }
    })?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn purge(config: &Config, ids: Vec<String>, older_than_days: Option<i64>, all: bool) -> CliResult {
    let store = EventStore::open(config.sessions_dir())?;
    let targets = if all {
        store.list()?
    } else if let Some(days) = older_than_days {
        let cutoff = Utc::now() - Duration::days(days);
        let mut old = Vec::new();
        for id in store.list()? {
            match store.read(&id) {
                Ok(events) if events.first().is_some_and(|e| e.timestamp < cutoff) => old.push(id),
                Ok(_) => {}
                Err(e) => tracing::warn!(session_id = %id, error = %e, "skipping unreadable log"),
            }
        }
        old.extend(ids);
        old
    } else if ids.is_empty() {
        return Err("name sessions to purge, or pass --all or --older-than-days".into());
    } else {
        ids
    };
    let mut removed = 0;
    for id in &targets {
        if store.purge(id)? {
            removed += 1;
        }
    }
    println!("removed {removed} session log(s)");
    Ok(())
}

fn replay(config: &Config, session_id: &str, verify: bool) -> CliResult {
    let store = EventStore::open(config.sessions_dir())?;
    let events = store.read(session_id)?;
    let state = visitprep_core::SessionState::replay(&events)?;
    println!("{}", serde_json::to_string_pretty(&state)?);
    if verify {
        config.validate()?;
        let index = IndexStore::open(config.index_dir())?;
        let engine = SessionEngine::new(
            index.live().clone(),
            config.embedder()?,
            config.gateway()?,
            config.engine_settings(),
            Arc::new(SystemClock),
        );
        let rerun = engine.reexecute(&events)?;
        if rerun != events {
            let at = rerun
                .iter()
                .zip(&events)
                .position(|(a, b)| a != b)
                .unwrap_or(rerun.len().min(events.len()));
            return Err(format!("re-execution diverged at event {at}").into());
        }
        eprintln!("re-execution reproduced all {} events", events.len());
    }
    Ok(())
}

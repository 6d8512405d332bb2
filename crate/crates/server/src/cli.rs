//! Command-line front end.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use annoloop_core::dataset::{load_dataset, write_dataset, DatasetError};
use annoloop_core::engine::persist::{
    load_ledger, replay_records, save_boundary, simulate, write_outputs, RunDir,
};
use annoloop_core::engine::synth::{generate, SynthConfig};
use annoloop_core::engine::{evaluate_projection, EngineConfig, EngineError, Mode, Session};
use annoloop_core::trainer::{load_checkpoint, TrainerError};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use thiserror::Error;

use crate::api::{router, ApiError, AppState, ServeSetup};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error(transparent)]
    Api(#[from] ApiError),
    #[error("{0}")]
    Usage(String),
    #[error("server: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Parser)]
#[command(
    name = "annoloop",
    version,
    about = "Budgeted human-in-the-loop clustering for re-identification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the whole loop with the ground-truth oracle as annotator.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the annotation API to a human annotator.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        state: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
    },
    /// Write a seeded synthetic dataset.
    GenSynth(GenSynth),
    /// Retrieval metrics of a checkpoint on a dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Config supplying the split seed, query fraction and normalization.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Re-run a recorded ledger and write the resulting run.
    Replay {
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct GenSynth {
    #[arg(long)]
    pub identities: usize,
    #[arg(long)]
    pub per_identity: usize,
    #[arg(long)]
    pub overlap: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub g_dim: Option<usize>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate {
            config,
            dataset,
            out,
        } => {
            let config = EngineConfig::load(&config)?;
            let ds = load_dataset(&dataset)?;
            let session = simulate(config, &ds, &out)?;
            print_json(&json!({
                "out": out,
                "budget_used": session.budget_used(),
                "final": session.reports().last(),
            }));
        }
        Command::Serve {
            config,
            dataset,
            state,
            listen,
        } => {
            let config = EngineConfig::load(&config)?;
            if config.mode != Mode::Serve {
                return Err(CliError::Usage(
                    "serve needs a config with mode SERVE".into(),
                ));
            }
            let ds = load_dataset(&dataset)?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(serve(config, ds, state, listen))?;
        }
        Command::GenSynth(args) => {
            let defaults = SynthConfig::default();
            let cfg = SynthConfig {
                identities: args.identities,
                per_identity: args.per_identity,
                overlap: args.overlap,
                seed: args.seed,
                dim: args.dim.unwrap_or(defaults.dim),
                g_dim: args.g_dim.unwrap_or(defaults.g_dim),
                ..defaults
            };
            let ds = generate(&cfg)?;
            let manifest = write_dataset(&ds, &args.out)?;
            print_json(&json!({ "manifest": manifest, "n": ds.len() }));
        }
        Command::Evaluate {
            checkpoint,
            dataset,
            config,
        } => {
            let config = match config {
                Some(path) => EngineConfig::load(&path)?,
                None => EngineConfig::default(),
            };
            let ds = load_dataset(&dataset)?;
            let (header, projection) = load_checkpoint(&checkpoint)?;
            let metrics = evaluate_projection(&config, &ds, &projection)?;
            print_json(&json!({ "epoch": header.epoch, "map": metrics.map, "cmc": metrics.cmc }));
        }
        Command::Replay {
            ledger,
            config,
            dataset,
            out,
        } => {
            let config = EngineConfig::load(&config)?;
            let ds = load_dataset(&dataset)?;
            let records = load_ledger(&ledger)?;
            let dir = fresh_run_dir(&out)?;
            let mut session = Session::new(config, &ds)?;
            let replayed = replay_records(&mut session, records, Some(&dir))?;
            save_boundary(&dir, &session)?;
            write_outputs(&dir, &session)?;
            print_json(&json!({
                "out": out,
                "replayed": replayed,
                "phase": session.phase().to_string(),
                "num_clusters": session.clusters().len(),
            }));
        }
    }
    Ok(())
}

fn fresh_run_dir(path: &Path) -> Result<RunDir, CliError> {
    let dir = RunDir::create(path)?;
    if dir.has_snapshot() {
        return Err(CliError::Usage(format!(
            "{} already holds a run",
            path.display()
        )));
    }
    Ok(dir)
}

async fn serve(
    config: EngineConfig,
    dataset: annoloop_core::dataset::EmbeddingDataset,
    state_dir: PathBuf,
    listen: SocketAddr,
) -> Result<(), CliError> {
    let setup = ServeSetup {
        config,
        dataset: Arc::new(dataset),
        state_dir,
    };
    let state = tokio::task::spawn_blocking(move || AppState::new(setup))
        .await
        .map_err(|e| CliError::Usage(e.to_string()))??;
    let listener = tokio::net::TcpListener::bind(listen).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}

fn print_json(value: &serde_json::Value) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("json value")
    );
}

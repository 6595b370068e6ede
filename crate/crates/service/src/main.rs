use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::{Context, Result};
use bandsmith_core::pipeline::{Model, StudioConfig};
use bandsmith_core::workspace::Workspace;
use bandsmith_service::{router, AppState, DEFAULT_WORKERS};
use clap::Parser;

#[derive(Debug, Parser)]
#[command(name = "bandsmith-service", version, about = "HTTP API for the composition workbench")]
struct Args {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    #[arg(long, default_value = ".")]
    workspace: PathBuf,
    /// Checkpoint to serve; defaults to checkpoints/model.ckpt if present.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// JSON config, same format as the command line tool's.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory with the built web UI.
    #[arg(long)]
    static_dir: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_WORKERS)]
    workers: usize,
}

#[tokio::main]
async fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let ws = Workspace::open(&args.workspace)?;
    let config = match &args.config {
        Some(p) => StudioConfig::load(p)?,
        None => StudioConfig::default(),
    };
    let checkpoint = args
        .checkpoint
        .clone()
        .or_else(|| Some(ws.checkpoint_path("model")).filter(|p| p.exists()));
    let model = match &checkpoint {
        Some(p) => {
            let m = Model::load(p).with_context(|| format!("loading {}", p.display()))?;
            log::info!("serving checkpoint {} ({})", p.display(), m.id);
            Some(m)
        }
        None => {
            log::warn!("no checkpoint; generation requests will be refused");
            None
        }
    };
    let state = AppState::new(ws, model, config, args.workers.max(1));
    let app = router(state, args.static_dir.as_deref());
    let addr = SocketAddr::new(args.host, args.port);
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    log::info!("listening on http://{addr}");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

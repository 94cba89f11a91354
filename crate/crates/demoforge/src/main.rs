use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use demoforge::catalog::{scene_summary, Catalog};
use demoforge::client::{self, Api};
use demoforge::config::{FileConfig, Overrides, ServeConfig};
use demoforge::script::{self, Script};
use demoforge::service::Server;
use demoforge::store::{self, ExportFilter, Store};
use demoforge_core::codec;
use serde_json::Value;

/// Exit codes: 0 success, 1 data or check failure, 2 usage, configuration or bind failure.
#[derive(Parser)]
#[command(name = "demoforge", version, about = "Robot demonstration collection service and tools")]
struct Cli {
    /// Data directory (overrides DEMOFORGE_DATA_DIR and the config file).
    #[arg(long, global = true, env = "DEMOFORGE_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP and WebSocket service.
    Serve(ServeArgs),
    /// Check stored episodes for consistency.
    Validate {
        /// Episode ids; all episodes when omitted.
        ids: Vec<String>,
    },
    /// Re-simulate an episode from its recorded actions.
    Replay {
        id: String,
        /// Compare against the recorded frames and fail on divergence.
        #[arg(long)]
        check: bool,
        #[arg(long)]
        catalog_dir: Option<PathBuf>,
    },
    /// Write aligned frame/action rows for training.
    Export {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scene: Option<String>,
        #[arg(long)]
        robot: Option<String>,
        #[arg(long)]
        label: Option<String>,
        /// Skip episodes that were not cleanly stopped.
        #[arg(long)]
        finalized_only: bool,
    },
    /// List catalog scenes.
    Scenes {
        #[arg(long)]
        catalog_dir: Option<PathBuf>,
    },
    /// Record a command script against a running server.
    ScriptClient(ScriptArgs),
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "DEMOFORGE_BIND")]
    bind: Option<String>,
    #[arg(long, env = "DEMOFORGE_MAX_SESSIONS")]
    max_sessions: Option<usize>,
    #[arg(long, env = "DEMOFORGE_MEDIA_CAP_BYTES")]
    media_cap_bytes: Option<u64>,
    /// Directory with `robots/*.toml` and `scenes/*.toml`; the bundled catalog when omitted.
    #[arg(long)]
    catalog_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ScriptArgs {
    /// Server base URL.
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    server: String,
    /// Script file.
    #[arg(long, conflicts_with = "bundled", required_unless_present = "bundled")]
    script: Option<PathBuf>,
    /// Name of a bundled script.
    #[arg(long)]
    bundled: Option<String>,
    /// Existing session; a new one is created when omitted.
    #[arg(long)]
    session: Option<String>,
    #[arg(long, default_value = "script")]
    contributor: String,
}

enum Failure {
    Data(String),
    Usage(String),
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Data(e.to_string())
    }
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "demoforge=info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn file_config(path: Option<&Path>) -> Result<FileConfig, Failure> {
    path.map_or(Ok(FileConfig::default()), |p| FileConfig::load(p).map_err(usage))
}

fn catalog(dir: Option<&Path>) -> Result<Catalog, Failure> {
    dir.map_or_else(|| Ok(Catalog::bundled()), |d| Catalog::from_dir(d).map_err(usage))
}

fn data_dir(cli_dir: Option<PathBuf>, file: &FileConfig) -> PathBuf {
    cli_dir
        .or_else(|| file.data_dir.clone())
        .unwrap_or_else(|| demoforge::config::DEFAULT_DATA_DIR.into())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let file = file_config(cli.config.as_deref())?;
    match cli.command {
        Command::Serve(a) => {
            let cfg = ServeConfig::resolve(
                Overrides {
                    data_dir: cli.data_dir,
                    bind: a.bind,
                    max_sessions: a.max_sessions,
                    media_cap_bytes: a.media_cap_bytes,
                    catalog_dir: a.catalog_dir,
                },
                file,
            )
            .map_err(usage)?;
            let catalog = catalog(cfg.catalog_dir.as_deref())?;
            runtime()?.block_on(serve(cfg, catalog))
        }
        Command::Validate { ids } => {
            let store = Store::new(data_dir(cli.data_dir, &file));
            let ids = if ids.is_empty() { store.episode_ids()? } else { ids };
            let mut failed = 0;
            for id in &ids {
                if !store.has_episode(id) {
                    println!("{id}: FAILED\n  error: no such episode");
                    failed += 1;
                    continue;
                }
                let report = store::validate_episode(&store.episode_dir(id));
                print!("{id}: {report}");
                failed += usize::from(!report.ok());
            }
            println!("{} episode(s), {failed} failed", ids.len());
            if failed > 0 {
                return Err(Failure::Data(format!("{failed} episode(s) failed validation")));
            }
            Ok(())
        }
        Command::Replay { id, check, catalog_dir } => {
            let store = Store::new(data_dir(cli.data_dir, &file));
            let catalog = catalog(catalog_dir.or(file.catalog_dir).as_deref())?;
            if !store.has_episode(&id) {
                return Err(Failure::Data(format!("no such episode `{id}`")));
            }
            let outcome = store::replay_episode(&store.episode_dir(&id), &catalog)?;
            if check {
                match outcome.divergence {
                    None => println!("{id}: replay matches {} recorded frames", outcome.recorded_len),
                    Some(t) => return Err(Failure::Data(format!("{id}: replay diverges at tick {t}"))),
                }
            } else {
                for f in &outcome.replayed {
                    println!("{}", demoforge_core::protocol::encode_frame(f)?);
                }
            }
            Ok(())
        }
        Command::Export { out, scene, robot, label, finalized_only } => {
            let store = Store::new(data_dir(cli.data_dir, &file));
            let summary = store::export_dataset(&store, &ExportFilter { scene, robot, label, finalized_only }, &out)?;
            for (id, rows) in &summary.episodes {
                println!("{id}\t{rows}");
            }
            println!("{} episode(s) exported to {}", summary.episodes.len(), out.display());
            Ok(())
        }
        Command::Scenes { catalog_dir } => {
            let catalog = catalog(catalog_dir.or(file.catalog_dir).as_deref())?;
            for s in catalog.scenes() {
                println!("{}", codec::to_canonical(scene_summary(s)));
            }
            Ok(())
        }
        Command::ScriptClient(a) => {
            let script = match (&a.script, &a.bundled) {
                (Some(p), _) => {
                    let text = std::fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
                    Script::parse(&text, &p.display().to_string()).map_err(usage)?
                }
                (None, Some(name)) => script::bundled(name).ok_or_else(|| {
                    let names: Vec<&str> = script::BUNDLED.iter().map(|(n, _)| *n).collect();
                    usage(format!("unknown bundled script `{name}`; available: {}", names.join(", ")))
                })?,
                (None, None) => return Err(usage("--script or --bundled is required")),
            };
            runtime()?.block_on(script_client(a, script))
        }
    }
}

fn runtime() -> Result<tokio::runtime::Runtime, Failure> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(Failure::from)
}

async fn serve(cfg: ServeConfig, catalog: Catalog) -> Result<(), Failure> {
    let server = Server::start(&cfg, catalog).await.map_err(|e| match e {
        demoforge::service::ServeError::Bind { .. } => usage(e),
        e => Failure::Data(e.to_string()),
    })?;
    println!("listening on {}", server.addr);
    shutdown_signal().await;
    tracing::info!("shutting down");
    server.shutdown().await?;
    Ok(())
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        let mut term = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()).expect("signal handler");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    let _ = tokio::signal::ctrl_c().await;
}

async fn script_client(a: ScriptArgs, script: Script) -> Result<(), Failure> {
    let api = Api::new(&a.server);
    let session = match a.session {
        Some(s) => s,
        None => api.create_session(&script.scene, script.robot.as_deref()).await?,
    };
    let mut conn = api.connect(&session, &a.contributor).await?;
    let run = client::run_script(&mut conn, &script).await?;
    conn.close().await;
    let (status, view) = api.get(&format!("/api/v1/episodes/{}", run.episode_id)).await?;
    let frames = view
        .get("manifest")
        .and_then(|m| m.get("frame_count"))
        .and_then(Value::as_u64)
        .filter(|_| status == 200)
        .ok_or_else(|| Failure::Data(format!("episode {} not readable ({status})", run.episode_id)))?;
    println!("{}\t{session}\t{frames}", run.episode_id);
    Ok(())
}

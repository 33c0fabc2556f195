use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use chrono::{DateTime, NaiveDate, Utc};
use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;
use xtray_cli::api::{router, system_clock, AppState};
use xtray_cli::commands;
use xtray_cli::CliError;
use xtray_core::{Service, ServiceConfig};

#[derive(Parser)]
#[command(name = "xtray", version, about = "Smart tray simulator, replay tool and ingestion service")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate telemetry frames from a scenario file.
    Simulate {
        scenario: PathBuf,
        /// Frames file (NDJSON); stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the expected operation events (NDJSON).
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Run the HTTP service.
    Serve { config: PathBuf },
    /// Push a frames file through an in-memory pipeline and print the
    /// event log and final inventory.
    Replay { frames: PathBuf, config: PathBuf },
    /// Check an audit chain file; exits nonzero at the first bad entry.
    VerifyAudit { chain: PathBuf },
    /// Print consumption-rate estimates and restock alerts.
    Forecast {
        config: PathBuf,
        /// Evaluation time, RFC 3339 or YYYY-MM-DD; defaults to now.
        #[arg(long)]
        now: Option<String>,
    },
}

fn parse_now(s: &str) -> Result<i64, CliError> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.timestamp_millis());
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .map(|d| d.and_hms_opt(0, 0, 0).expect("midnight").and_utc().timestamp_millis())
        .map_err(|_| CliError::Input(format!("--now {s:?} is not RFC 3339 or YYYY-MM-DD")))
}

fn serve(config: PathBuf) -> Result<(), CliError> {
    let cfg = ServiceConfig::load(&config)?;
    let listen = cfg.listen.clone();
    let (svc, _) = Service::open(cfg)?;
    let app = router(AppState::new(svc, system_clock()));
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Server(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&listen)
            .await
            .map_err(|e| CliError::Server(format!("cannot listen on {listen}: {e}")))?;
        tracing::info!(%listen, "serving /api/v1");
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::Server(e.to_string()))
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut stdout = std::io::stdout().lock();
    match cli.cmd {
        Cmd::Simulate { scenario, out, truth } => {
            let s = commands::simulate(&scenario, out.as_deref(), truth.as_deref(), &mut stdout)?;
            eprintln!("{} frames, {} expected events", s.frames, s.truth_events);
        }
        Cmd::Serve { config } => serve(config)?,
        Cmd::Replay { frames, config } => {
            let r = commands::replay(&frames, &config, &mut stdout)?;
            eprintln!(
                "{} frames accepted, {} duplicates, {} rejected, {} events",
                r.accepted,
                r.duplicates,
                r.rejected.len(),
                r.events.len()
            );
            for rej in r.rejected.iter().take(20) {
                eprintln!("  line {}: {:?}: {}", rej.line, rej.reason, rej.message);
            }
        }
        Cmd::VerifyAudit { chain } => {
            let v = commands::verify_audit(&chain)?;
            let _ = writeln!(
                stdout,
                "ok: {} entries, head {}",
                v.entries,
                v.head.as_deref().unwrap_or("(empty)")
            );
        }
        Cmd::Forecast { config, now } => {
            let now_ms = match now {
                Some(s) => parse_now(&s)?,
                None => Utc::now().timestamp_millis(),
            };
            commands::forecast(&config, now_ms, &mut stdout)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("XTRAY_LOG").unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let CliError::AuditInvalid { index, .. } = &e {
                println!("first bad index: {index}");
            }
            eprintln!("error[{}]: {e}", e.class());
            ExitCode::from(e.exit_code())
        }
    }
}

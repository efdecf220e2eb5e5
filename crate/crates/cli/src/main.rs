//! `neusymms`: run the service, replay scenarios, run lifecycle jobs and
//! manage stored facts.
//!
//! Exit codes: 0 success, 1 a scenario assertion failed, 2 usage,
//! configuration or store error.

mod facts;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use clap::{Parser, Subcommand};

use neusymms_core::extraction::ExtractorConfig;
use neusymms_core::lifecycle::{run_job, LifecyclePolicy};
use neusymms_core::rules::{default_rule_pack, parse_rule_pack, RulePack};
use neusymms_core::scenario::{replay, ReplayOptions, Scenario};
use neusymms_core::store::{Clock, FactStore, IdSource, ManualClock, SystemClock};
use neusymms_server::ServerConfig;

#[derive(Debug, Parser)]
#[command(name = "neusymms", version, about = "Neuro-symbolic agent memory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Start the REST service.
    Serve {
        #[arg(long, short)]
        config: PathBuf,
    },
    /// Replay scenario files and report each step.
    Replay {
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
        /// Keep the store in this directory instead of in memory.
        #[arg(long)]
        store: Option<PathBuf>,
        /// Rule pack to use instead of the built-in one.
        #[arg(long)]
        rules: Option<PathBuf>,
        /// Offline extraction patterns to use instead of the built-in ones.
        #[arg(long)]
        patterns: Option<PathBuf>,
        /// Print reports as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Run one lifecycle pass: promote frequently read facts, then prune
    /// stale short-term ones.
    Prune {
        #[arg(long)]
        store: PathBuf,
        /// Time to run at, RFC 3339; defaults to now.
        #[arg(long, value_parser = parse_time)]
        now: Option<DateTime<Utc>>,
        #[arg(long)]
        promotion_threshold: Option<u64>,
        #[arg(long)]
        ttl_hours: Option<u64>,
        #[arg(long)]
        prune_access_ceiling: Option<u64>,
    },
    /// Inspect and edit stored facts.
    Facts {
        #[command(subcommand)]
        command: facts::FactsCommand,
    },
    /// Fold the journal into a snapshot.
    Compact {
        #[arg(long)]
        store: PathBuf,
        /// Remove soft-deleted facts for good.
        #[arg(long)]
        drop_inactive: bool,
    },
}

fn parse_time(s: &str) -> Result<DateTime<Utc>, String> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| format!("`{s}` is not an RFC 3339 time: {e}"))
}

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Assertion(String),
    Usage(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Assertion(_) => 1,
            Failure::Usage(_) => 2,
        }
    }
}

pub fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

pub fn open_store(dir: &Path, clock: Arc<dyn Clock>) -> Result<FactStore, Failure> {
    if !dir.is_dir() {
        return Err(usage(format!("store directory {} does not exist", dir.display())));
    }
    FactStore::open(dir, clock, IdSource::Random).map_err(|e| usage(format!("store {}: {e}", dir.display())))
}

fn load_pack(path: Option<&Path>) -> Result<RulePack, Failure> {
    let Some(path) = path else {
        return Ok(default_rule_pack());
    };
    let source = std::fs::read_to_string(path).map_err(|e| usage(format!("rule pack {}: {e}", path.display())))?;
    parse_rule_pack(&source).map_err(|e| usage(format!("rule pack {}: {e}", path.display())))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let serving = matches!(cli.command, Command::Serve { .. });
    if serving {
        tracing_subscriber::fmt().json().with_writer(std::io::stdout).init();
    } else {
        tracing_subscriber::fmt()
            .with_max_level(tracing::Level::WARN)
            .with_writer(std::io::stderr)
            .init();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Assertion(m) | Failure::Usage(m)) = &f;
            if !m.is_empty() {
                eprintln!("neusymms: {m}");
            }
            ExitCode::from(f.code())
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Serve { config } => serve(&config),
        Command::Replay {
            scenarios,
            store,
            rules,
            patterns,
            json,
        } => {
            let opts = ReplayOptions {
                pack: load_pack(rules.as_deref())?,
                extraction: ExtractorConfig {
                    patterns_path: patterns,
                    ..ExtractorConfig::default()
                },
                lifecycle: LifecyclePolicy::default(),
            };
            let mut failed = Vec::new();
            for path in &scenarios {
                let scenario = Scenario::from_path(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
                let report = replay(&scenario, store.as_deref(), opts.clone())
                    .map_err(|e| usage(format!("{}: {e}", path.display())))?;
                if json {
                    println!("{}", serde_json::to_string(&report).expect("report serializes"));
                } else {
                    println!("{report}");
                }
                if !report.passed {
                    failed.push(report.name);
                }
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Failure::Assertion(format!("failed: {}", failed.join(", "))))
            }
        }
        Command::Prune {
            store,
            now,
            promotion_threshold,
            ttl_hours,
            prune_access_ceiling,
        } => {
            let defaults = LifecyclePolicy::default();
            let policy = LifecyclePolicy {
                promotion_threshold: promotion_threshold.unwrap_or(defaults.promotion_threshold),
                short_term_ttl_hours: ttl_hours.unwrap_or(defaults.short_term_ttl_hours),
                prune_access_ceiling: prune_access_ceiling.unwrap_or(defaults.prune_access_ceiling),
                ..defaults
            };
            policy.check().map_err(usage)?;
            let clock: Arc<dyn Clock> = match now {
                Some(t) => Arc::new(ManualClock::new(t)),
                None => Arc::new(SystemClock),
            };
            let store = open_store(&store, clock.clone())?;
            let report = run_job(&store, &policy, clock.now());
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            if report.failures.is_empty() {
                Ok(())
            } else {
                Err(usage(format!("{} user(s) failed", report.failures.len())))
            }
        }
        Command::Facts { command } => facts::run(command),
        Command::Compact { store, drop_inactive } => {
            let store = open_store(&store, Arc::new(SystemClock))?;
            let snapshot = store.compact(drop_inactive).map_err(usage)?;
            println!(
                "compacted at sequence {}: {} facts kept",
                snapshot.last_sequence,
                snapshot.facts.len()
            );
            Ok(())
        }
    }
}

fn serve(config: &Path) -> Result<(), Failure> {
    let cfg = ServerConfig::load(config).map_err(usage)?;
    let app = neusymms_server::App::from_config(&cfg).map_err(usage)?;
    let runtime = tokio::runtime::Runtime::new().map_err(usage)?;
    runtime.block_on(async {
        let listener = neusymms_server::bind(&cfg.bind).await.map_err(usage)?;
        neusymms_server::serve(listener, app, shutdown_signal())
            .await
            .map_err(usage)
    })
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    tracing::info!("shutdown requested");
}

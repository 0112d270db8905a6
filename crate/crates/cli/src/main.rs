use clap::{Parser, Subcommand};
use mindgap_cli::{http, open_service, read_passphrase, simulate, verify};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mindgap", version, about = "Local feeling-tone practice engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the companion API on a loopback address.
    Serve {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8787")]
        bind: String,
        /// Directory holding ladder_templates.json and, optionally,
        /// crisis_resources.json.
        #[arg(long)]
        templates: Option<PathBuf>,
        /// Service configuration with the patient profile.
        #[arg(long)]
        config: PathBuf,
    },
    /// Replay a scripted patient and write the trajectory report.
    Simulate {
        /// Script file, or one of: marcus, crisis_prone, plateau.
        #[arg(long)]
        script: String,
        #[arg(long, default_value_t = 12)]
        weeks: u32,
        #[arg(long)]
        out: PathBuf,
        /// Also write the raw event log as JSON lines.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Check a JSON-lines event log against the invariant catalog.
    Verify {
        #[arg(long)]
        log: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Serve {
            store,
            bind,
            templates,
            config,
        } => {
            // Refuse before asking for a passphrase.
            mindgap_core::service::ensure_loopback(&bind)?;
            let passphrase = read_passphrase()?;
            let service = open_service(&store, &passphrase, templates.as_deref(), &config)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(http::serve(&bind, service))?;
            Ok(true)
        }
        Command::Simulate { script, weeks, out, log } => {
            let report = simulate(&script, weeks, &out, log.as_deref())?;
            println!(
                "{}: {} sessions over {} weeks, reduction {:.1}%, {} violations",
                report.scenario,
                report.sessions,
                report.weeks,
                report.activation_reduction_pct.unwrap_or(0.0),
                report.violations.len()
            );
            Ok(report.violations.is_empty())
        }
        Command::Verify { log } => {
            let violations = verify(&log)?;
            for v in &violations {
                println!("{} {}: {}", v.name, v.session_id, v.detail);
            }
            println!("{} violations", violations.len());
            Ok(violations.is_empty())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

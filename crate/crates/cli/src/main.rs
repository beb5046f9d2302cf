use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use consentctl::{commands, CliError, RunConfig, RunDir};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "consentctl",
    version,
    about = "Speaker consent management: train, register, remove, re-register"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Run directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train every bucket from scratch.
    Train(Common),
    /// Register speakers from the unassigned pool.
    Register {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pcnt_old: Option<u32>,
        #[arg(long)]
        new_speakers: Option<usize>,
    },
    /// Remove speakers from a bucket.
    Remove {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bucket: u16,
        #[arg(long, value_delimiter = ',', required = true)]
        speakers: Vec<u32>,
    },
    /// Bring removed speakers back into their bucket.
    Rereg {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bucket: u16,
        #[arg(long, value_delimiter = ',', required = true)]
        speakers: Vec<u32>,
    },
    /// Accuracy and verification metrics on hold-out utterances.
    Eval(Common),
    /// Write hold-out embeddings to a feature container.
    ExportEmbeddings(Common),
}

fn setup(common: &Common) -> Result<(RunConfig, RunDir), CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = common.epochs {
        cfg.session.train.epochs = epochs;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    let dir = RunDir::new(cfg.out_dir.clone());
    Ok((cfg, dir))
}

fn print<T: Serialize>(value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::Io(e.to_string())),
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(common) => {
            let (cfg, dir) = setup(&common)?;
            print(&commands::train(&cfg, &dir)?)
        }
        Command::Register {
            common,
            pcnt_old,
            new_speakers,
        } => {
            let (mut cfg, dir) = setup(&common)?;
            if let Some(p) = pcnt_old {
                cfg.registration.pcnt_old = p;
            }
            if new_speakers.is_some() {
                cfg.registration.new_speakers = new_speakers;
            }
            cfg.validate()?;
            print(&commands::register(&cfg, &dir)?)
        }
        Command::Remove {
            common,
            bucket,
            speakers,
        } => {
            let (cfg, dir) = setup(&common)?;
            print(&commands::remove(&cfg, &dir, bucket, &speakers, false)?)
        }
        Command::Rereg {
            common,
            bucket,
            speakers,
        } => {
            let (cfg, dir) = setup(&common)?;
            print(&commands::remove(&cfg, &dir, bucket, &speakers, true)?)
        }
        Command::Eval(common) => {
            let (cfg, dir) = setup(&common)?;
            print(&commands::eval(&cfg, &dir)?)
        }
        Command::ExportEmbeddings(common) => {
            let (cfg, dir) = setup(&common)?;
            print(&commands::export_embeddings(&cfg, &dir)?)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CONSENT_LEDGER_LOG", "warn"))
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = e.record();
            eprintln!(
                "{}",
                serde_json::to_string(&record).unwrap_or_else(|_| e.to_string())
            );
            ExitCode::from(record.exit_code as u8)
        }
    }
}

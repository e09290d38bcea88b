//! Command-line front end for IBP certified training.
//!
//! The binary `ibpcert` is a thin wrapper around [`main_with_args`]; the
//! same entry point is used in-process by the integration tests.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ibp_core::par;

pub mod commands;
pub mod config;
pub mod datasets;
pub mod error;

pub use commands::Outcome;
pub use config::RunConfig;
pub use error::{CliError, CliResult};

/// File written next to every command's outputs.
pub const EFFECTIVE_CONFIG: &str = "effective-config.toml";

#[derive(Debug, Parser)]
#[command(name = "ibpcert", version, about = "Certified robust training with interval bound propagation")]
#[command(after_help = "Any configuration key can be overridden as --section.key VALUE (or --section.key=VALUE).")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (default: runs/<command>).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a network and write per-epoch metrics and a checkpoint.
    Train {
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs (the run can be resumed later).
        #[arg(long, value_name = "N")]
        stop_after: Option<usize>,
    },
    /// Standard and verified error of a checkpoint at each radius.
    Eval {
        /// Checkpoint to evaluate (overrides eval.checkpoint).
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Difference gains of the initialization schemes and the bound-width
    /// profile of untrained networks.
    Audit,
    /// Finite-difference check of the training objective's gradients.
    Gradcheck,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Audit => "audit",
            Command::Gradcheck => "gradcheck",
        }
    }
}

/// Dotted keys with their raw values.
type Overrides = Vec<(String, String)>;

/// Splits dotted `--section.key value` / `--section.key=value` overrides
/// from the arguments clap understands.
fn extract_overrides(args: Vec<OsString>) -> CliResult<(Vec<OsString>, Overrides)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.to_str().and_then(|s| s.strip_prefix("--")) else {
            rest.push(arg);
            continue;
        };
        let key = flag.split('=').next().unwrap_or_default();
        if !key.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match flag.split_once('=') {
            Some((_, v)) => v.to_string(),
            None => it
                .next()
                .and_then(|v| v.into_string().ok())
                .ok_or_else(|| CliError::Usage(format!("override --{key} needs a value")))?,
        };
        overrides.push((key.to_string(), value));
    }
    Ok((rest, overrides))
}

/// Parses `args` (program name first), runs the command and returns its
/// outcome.
pub fn run_args<I, S>(args: I) -> CliResult<Outcome>
where
    I: IntoIterator<Item = S>,
    S: Into<OsString>,
{
    let (rest, overrides) = extract_overrides(args.into_iter().map(Into::into).collect())?;
    let cli = Cli::try_parse_from(rest).map_err(|e| CliError::Usage(e.to_string()))?;
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let out = cli.out.unwrap_or_else(|| Path::new("runs").join(cli.command.name()));
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;

    let effective = cfg.to_toml();
    println!("# effective configuration\n{effective}");
    commands::write_text(&out.join(EFFECTIVE_CONFIG), &effective)?;

    let go = || match &cli.command {
        Command::Train { resume, stop_after } => commands::train::run(
            &cfg,
            &out,
            &commands::TrainOptions {
                resume: *resume,
                stop_after: *stop_after,
            },
        ),
        Command::Eval { checkpoint } => commands::eval::run(&cfg, &out, checkpoint.as_deref()),
        Command::Audit => commands::audit::run(&cfg, &out),
        Command::Gradcheck => commands::gradcheck::run(&cfg, &out),
    };
    if cfg.run.parallel {
        go()
    } else {
        par::with_mode(par::Mode::Sequential, go)
    }
}

/// Runs the command line and returns the process exit code: 0 on success,
/// 1 for numeric or tolerance failures, 2 for usage, configuration and I/O
/// errors.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    // Help and version requests are successful runs that print and stop.
    if let Err(e) = Cli::try_parse_from(&args) {
        if !e.use_stderr() {
            print!("{e}");
            return 0;
        }
    }
    match run_args(args) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

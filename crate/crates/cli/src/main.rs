//! `ilts`: build libraries, train, evaluate, probe and prune.
//!
//! Exit codes: 0 success, 1 internal failure, 2 invalid arguments, 3 i/o
//! failure, 4 inputs that do not match each other. `ILTS_THREADS` caps the
//! worker pool.

mod cmd;
mod config;
mod fail;
mod manifest;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use fail::{Failure, Result};

#[derive(Parser, Debug)]
#[command(name = "ilts", version, about = "Interleaved linear time-series toolkit")]
struct Cli {
    /// TOML file with one table per subcommand; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample systems and roll out a trace library.
    GenLibrary(cmd::gen_library::Flags),
    /// Train (or resume training) a transformer on interleaved traces.
    Train(cmd::train::Flags),
    /// Evaluate a checkpoint and write metric records.
    Eval(cmd::eval::Flags),
    /// Evaluate a checkpoint on an out-of-distribution needle dataset.
    Ood(cmd::ood::Flags),
    /// Train edge gates and export the quantized circuit.
    Prune(cmd::prune::Flags),
    /// Recheck every digest in a manifest.
    VerifyManifest { path: PathBuf },
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("ILTS_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| fail::usage(format!("ILTS_THREADS={v:?} is not a thread count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Other(e.into()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let cfg = cli.config.as_deref();
    match &cli.command {
        Command::GenLibrary(f) => cmd::gen_library::run(f, cfg),
        Command::Train(f) => cmd::train::run(f, cfg),
        Command::Eval(f) => cmd::eval::run(f, cfg),
        Command::Ood(f) => cmd::ood::run(f, cfg),
        Command::Prune(f) => cmd::prune::run(f, cfg),
        Command::VerifyManifest { path } => {
            let m = manifest::verify(path)?;
            println!("ok: {} inputs, {} outputs", m.inputs.len(), m.outputs.len());
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("{e}");
        std::process::exit(e.code());
    }
}

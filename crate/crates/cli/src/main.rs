mod config;
mod exec;
mod output;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Command, ExperimentConfig, CONFIG_VERSION};
use exec::Failure;
use output::Manifest;

#[derive(Parser)]
#[command(name = "carpetlab", version, about = "Fractal percolation carpets, fractal paths, GFF and SLE experiments")]
struct Cli {
    /// Root seed; every trial seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Exit with status 3 and a report when an invariant fails.
    #[arg(long, global = true)]
    checked: bool,
    #[command(subcommand)]
    top: Top,
}

#[derive(Subcommand)]
enum Top {
    #[command(flatten)]
    Experiment(Command),
    /// Run an experiment from a JSON config file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Replay a manifest and verify the outputs are byte-identical.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("CARPETLAB_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Validation(vec![format!("CARPETLAB_THREADS: expected a positive integer, got {v:?}")]))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Other(std::io::Error::other(e.to_string()).into()))
}

fn main_inner(cli: Cli) -> Result<PathBuf, Failure> {
    configure_threads()?;
    let manifest = match cli.top {
        Top::Experiment(command) => {
            let cfg = ExperimentConfig {
                version: CONFIG_VERSION,
                seed: cli.seed.unwrap_or(0),
                out: cli.out.unwrap_or_else(|| PathBuf::from("out")),
                checked: cli.checked,
                command,
            };
            exec::run(&exec::resolve(cfg)?)?
        }
        Top::Run { config } => {
            let text = fs::read_to_string(&config)?;
            let mut cfg: ExperimentConfig = serde_json::from_str(&text)
                .map_err(|e| Failure::Validation(vec![format!("{}: {e}", config.display())]))?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(o) = cli.out {
                cfg.out = o;
            }
            cfg.checked |= cli.checked;
            exec::run(&exec::resolve(cfg)?)?
        }
        Top::Rerun { manifest } => {
            let old = Manifest::load(&manifest)?;
            let out = cli.out.unwrap_or_else(|| old.config.out.clone());
            exec::rerun(&old, &out)?
        }
    };
    Ok(manifest.config.out.join(output::MANIFEST))
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(path) => {
            println!("{}", path.display());
            ExitCode::SUCCESS
        }
        Err(f) => {
            match &f {
                Failure::Validation(errors) => {
                    eprintln!("error[validation]: {} invalid field(s)", errors.len());
                    for e in errors {
                        eprintln!("  {e}");
                    }
                }
                Failure::Invariant(rep) => {
                    eprintln!("error[invariant]: {}", rep.invariants.join(", "));
                    println!("{}", serde_json::to_string_pretty(rep).expect("report serialises"));
                }
                Failure::Budget(e) | Failure::Other(e) => eprintln!("error[{}]: {e}", e.code()),
            }
            ExitCode::from(f.exit_code() as u8)
        }
    }
}

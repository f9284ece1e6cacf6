use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use sparse_carrier::cli::exit_on_error;
use sparse_carrier::pipeline::{format_ablation, PipelineConfig, Runner};
use sparse_carrier::Result;

/// Runs the full sft -> lcdd -> extract -> trigger -> eval chain.
#[derive(Parser)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Skip stages whose outputs already verify.
        #[arg(long)]
        resume: bool,
        /// Override the root seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Structure/objective trigger matrix plus the mask-only variant.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn runner(config: &Path, seed: Option<u64>, out_dir: Option<PathBuf>) -> Result<Runner> {
    let mut cfg = PipelineConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(d) = out_dir {
        cfg.out_dir = d;
    }
    let mut r = Runner::new(cfg);
    r.verbose = true;
    Ok(r)
}

fn run(args: Args) -> Result<()> {
    match args.command {
        Command::Run {
            config,
            resume,
            seed,
            out_dir,
        } => {
            let r = runner(&config, seed, out_dir)?;
            let summary = r.run(resume)?;
            let table = std::fs::read_to_string(summary.run_dir.join("eval/table.csv"))
                .map_err(|e| sparse_carrier::Error::Io {
                    path: summary.run_dir.join("eval/table.csv"),
                    source: e,
                })?;
            print!("{table}");
            eprintln!("run directory: {}", summary.run_dir.display());
        }
        Command::Ablate { config, out_dir } => {
            let r = runner(&config, None, out_dir)?;
            let rows = r.ablate()?;
            print!("{}", format_ablation(&rows));
        }
    }
    Ok(())
}

fn main() {
    exit_on_error(run(Args::parse()));
}

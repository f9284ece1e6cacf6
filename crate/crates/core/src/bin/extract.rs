use std::path::PathBuf;

use clap::Parser;
use sparse_carrier::carrier::extract_carrier;
use sparse_carrier::checkpoint::load_gates;
use sparse_carrier::cli::exit_on_error;
use sparse_carrier::Result;

/// Writes the active-channel carrier file for a trained gate set.
#[derive(Parser)]
struct Args {
    /// Gate directory (or an lcdd output directory containing `gates/`).
    #[arg(long)]
    gates: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn run(args: Args) -> Result<()> {
    let dir = if args.gates.join("gates").exists() {
        args.gates.join("gates")
    } else {
        args.gates.clone()
    };
    let carrier = extract_carrier(&load_gates(&dir)?);
    let s = carrier.summary();
    eprintln!(
        "{} of {} gates active, {} write channels",
        s.total_active, s.total_gates, s.write_channels
    );
    carrier.save(&args.out)
}

fn main() {
    exit_on_error(run(Args::parse()));
}

use std::path::PathBuf;

use clap::Parser;
use sparse_carrier::checkpoint::{save_gates, CheckpointTriple};
use sparse_carrier::cli::{exit_on_error, load_config, write};
use sparse_carrier::data::{TaskKind, Vocab};
use sparse_carrier::lcdd::lcdd_train;
use sparse_carrier::pipeline::{load_corpus, splits};
use sparse_carrier::sft::task_examples;
use sparse_carrier::Result;

/// Trains gate logits and delta weights under the task-loss budget.
#[derive(Parser)]
struct Args {
    /// Directory holding a checkpoint triple (or a `triple/` subdirectory).
    #[arg(long)]
    triple: PathBuf,
    #[arg(long, value_parser = TaskKind::parse)]
    task: TaskKind,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Freeze the delta weights and train gates only.
    #[arg(long)]
    mask_only: bool,
}

fn run(args: Args) -> Result<()> {
    let mut cfg = load_config(args.config.as_ref())?;
    cfg.task.kind = args.task;
    if args.mask_only {
        cfg.lcdd.mask_only = true;
    }
    let dir = if args.triple.join("triple").exists() {
        args.triple.join("triple")
    } else {
        args.triple.clone()
    };
    let triple = CheckpointTriple::load(&dir)?;
    let sp = splits(&cfg, &load_corpus(&cfg)?)?;
    let data = task_examples(&cfg.task_spec(), &sp.sft)?;
    let out = lcdd_train(&triple, &data, &Vocab::standard(), &cfg.lcdd)?;
    eprintln!(
        "stopped ({:?}) after {} steps: weight sparsity {:.4}, gate sparsity {:.4}",
        out.stop,
        out.steps.len(),
        out.sparsity.weight_level,
        out.sparsity.gate_level
    );
    save_gates(&out.gates, &args.out.join("gates"))?;
    out.triple.save(&args.out.join("triple"))?;
    write(&args.out.join("step_log.tsv"), &out.step_log())
}

fn main() {
    exit_on_error(run(Args::parse()));
}

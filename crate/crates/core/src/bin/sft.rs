use std::path::PathBuf;

use clap::Parser;
use sparse_carrier::cli::{exit_on_error, load_config, write};
use sparse_carrier::data::{TaskKind, Vocab};
use sparse_carrier::pipeline::{load_corpus, splits};
use sparse_carrier::sft::{finetune, pretrain_base};
use sparse_carrier::Result;

/// Pretrains a base model on the corpus and fine-tunes it for a task.
#[derive(Parser)]
struct Args {
    #[arg(long, value_parser = TaskKind::parse)]
    task: TaskKind,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn run(args: Args) -> Result<()> {
    let mut cfg = load_config(args.config.as_ref())?;
    cfg.task.kind = args.task;
    let vocab = Vocab::standard();
    let corpus = load_corpus(&cfg)?;
    let sp = splits(&cfg, &corpus)?;
    let (base, plog) = pretrain_base(&corpus, &vocab, cfg.model, &cfg.pretrain)?;
    eprintln!("pretrain loss {:.4} -> {:.4}", plog.initial_loss, plog.final_loss);
    let (triple, slog) = finetune(&base, &cfg.task_spec(), &sp.sft, &vocab, &cfg.sft)?;
    eprintln!("sft loss {:.4} -> {:.4}", slog.initial_loss, slog.final_loss);
    triple.save(&args.out.join("triple"))?;
    let log = format!(
        "pretrain_initial = {}\npretrain_final = {}\nsft_initial = {}\nsft_final = {}\n",
        plog.initial_loss, plog.final_loss, slog.initial_loss, slog.final_loss
    );
    write(&args.out.join("train_log.toml"), &log)
}

fn main() {
    exit_on_error(run(Args::parse()));
}

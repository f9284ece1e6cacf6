use std::path::PathBuf;

use clap::Parser;
use sparse_carrier::carrier::CarrierSpec;
use sparse_carrier::cli::{exit_on_error, load_base, load_config, write, ModelDir};
use sparse_carrier::data::Vocab;
use sparse_carrier::eraser::{optimize_trigger, Objective};
use sparse_carrier::pipeline::{load_corpus, splits, write_trigger_manifest};
use sparse_carrier::Result;

/// Optimizes a soft trigger that steers the model back towards the base.
#[derive(Parser)]
struct Args {
    /// lcdd output directory (masked model) or a triple (fine-tuned model).
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    carrier: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = Objective::parse, default_value = "circuit")]
    objective: Objective,
    #[arg(long)]
    out: PathBuf,
}

fn run(args: Args) -> Result<()> {
    let mut cfg = load_config(args.config.as_ref())?;
    cfg.trigger.objective = args.objective;
    let model = ModelDir::load(&args.model)?.dense()?;
    let base = load_base(&args.base)?;
    let carrier = CarrierSpec::load(&args.carrier)?;
    let vocab = Vocab::standard();
    let sp = splits(&cfg, &load_corpus(&cfg)?)?;
    let prompts: Vec<_> = sp.trigger.iter().map(|e| vocab.encode_prompt(&e.prompt)).collect();
    let out = optimize_trigger(&model, &base, &carrier, &prompts, &cfg.trigger)?;
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(last) = out.log.last() {
        eprintln!(
            "final loss {:.6} (mse {:.6}, kl {:.6}, l2 {:.6})",
            last.parts.total, last.parts.mse, last.parts.kl, last.parts.l2
        );
    }
    std::fs::create_dir_all(&args.out).map_err(|e| sparse_carrier::Error::Io {
        path: args.out.clone(),
        source: e,
    })?;
    out.trigger.save(&args.out.join("trigger.npy"))?;
    write(&args.out.join("step_log.tsv"), &out.log_text())?;
    write_trigger_manifest(&args.out.join("trigger.toml"), &cfg.trigger, &out)
}

fn main() {
    exit_on_error(run(Args::parse()));
}

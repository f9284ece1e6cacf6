use std::path::PathBuf;

use clap::Parser;
use sparse_carrier::cli::{exit_on_error, load_config, write, ModelDir};
use sparse_carrier::data::{TaskKind, Vocab};
use sparse_carrier::eraser::SoftTrigger;
use sparse_carrier::eval::{
    format_reports, format_table, run_condition_suite, Condition, DecodeConfig, SuiteConfig,
    SuiteModels, TriggerHost,
};
use sparse_carrier::lcdd::compute_sparsity;
use sparse_carrier::pipeline::{load_corpus, splits};
use sparse_carrier::{Error, Result};

/// Evaluates base, fine-tuned, masked and triggered conditions.
#[derive(Parser)]
struct Args {
    /// `<sft_dir>,<lcdd_dir>`: a triple (base and fine-tuned) and an lcdd
    /// output directory (masked model).
    #[arg(long, value_delimiter = ',', required = true)]
    models: Vec<PathBuf>,
    /// Trigger array file, or `none` to skip the triggered condition.
    #[arg(long, default_value = "none")]
    trigger: String,
    #[arg(long, value_parser = TaskKind::parse)]
    task: TaskKind,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report path; the table is written next to it with a `.csv` extension.
    #[arg(long)]
    out: PathBuf,
}

fn run(args: Args) -> Result<()> {
    let mut cfg = load_config(args.config.as_ref())?;
    cfg.task.kind = args.task;
    if args.models.len() != 2 {
        return Err(Error::Invalid(format!("--models takes two directories, got {}", args.models.len())));
    }
    let ModelDir::Triple(sft) = ModelDir::load(&args.models[0])? else {
        return Err(Error::Invalid("first --models entry must hold a checkpoint triple".into()));
    };
    let ModelDir::Masked { triple, gates } = ModelDir::load(&args.models[1])? else {
        return Err(Error::Invalid("second --models entry must be an lcdd output directory".into()));
    };
    let lcdd = triple.delta_model().materialize(sparse_carrier::model::Gating::Gates(&gates))?;
    let sparsity = compute_sparsity(&gates, &triple)?.weight_level;
    let trigger = match args.trigger.as_str() {
        "none" => None,
        path => Some(SoftTrigger::load(path.as_ref())?),
    };
    let conditions: Vec<Condition> = Condition::ALL
        .into_iter()
        .filter(|&c| c != Condition::Trig || trigger.is_some())
        .collect();
    let sp = splits(&cfg, &load_corpus(&cfg)?)?;
    let models = SuiteModels {
        base: &sft.base,
        sft: &sft.finetuned,
        lcdd: &lcdd,
        sparsity,
    };
    let suite = SuiteConfig {
        decode: DecodeConfig {
            greedy: true,
            max_new_tokens: cfg.eval.max_new_tokens,
        },
        ..SuiteConfig::default()
    };
    let reports = run_condition_suite(
        &models,
        trigger.as_ref().map(|t| (t.view(), TriggerHost::Lcdd)),
        &conditions,
        &Vocab::standard(),
        &sp.eval,
        &suite,
    )?;
    write(&args.out, &format_reports(&reports))?;
    let table = format_table(cfg.task.kind, &reports);
    print!("{table}");
    write(&args.out.with_extension("csv"), &table)
}

fn main() {
    exit_on_error(run(Args::parse()));
}

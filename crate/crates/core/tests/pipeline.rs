mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use sparse_carrier::pipeline::{
    derive_seed, layout, stage_hashes, PipelineConfig, RunManifest, Runner, Stage, MANIFEST,
};
use sparse_carrier::Error;

const TINY: &str = r#"
run_id = "tiny"
seed = 3

[data]
sft_prompts = 16
trigger_prompts = 4
eval_prompts = 6

[task]
train_samples = 16

[model]
num_layers = 1
d_model = 16
d_ffn = 16
d_inner = 16
num_heads = 2
vocab_size = 192
max_seq_len = 40

[pretrain]
epochs = 2
batch_size = 8
learning_rate = 0.003

[sft]
epochs = 1
batch_size = 8

[lcdd]
warmup_steps = 2
epochs = 2
batch_size = 8

[trigger]
length = 4
steps = 3
prompt_pairs = 4
batch_size = 2
reference_tokens = 6

[eval]
max_new_tokens = 6
"#;

fn tiny(out: &Path) -> PipelineConfig {
    let mut c = PipelineConfig::from_text(TINY, Path::new("tiny.toml")).unwrap();
    c.out_dir = out.to_path_buf();
    c
}

fn run_through(runner: &Runner, last: Stage) {
    for s in Stage::ALL {
        runner.run_stage(s).unwrap();
        if s == last {
            break;
        }
    }
}

#[test]
fn full_run_then_resume_skips_everything() {
    let dir = tempfile::tempdir().unwrap();
    let runner = Runner::new(tiny(dir.path()));
    let first = runner.run(false).unwrap();
    assert_eq!(first.executed, Stage::ALL.to_vec());
    assert_eq!(first.reports.len(), 4);
    for s in Stage::ALL {
        let m = RunManifest::load(&runner.run_dir.join(s.dir_name()).join(MANIFEST)).unwrap();
        assert_eq!(m.stage, s);
        assert!(m.output_artifacts.iter().all(|a| a.sha256.len() == 64));
    }
    let table = fs::read(runner.run_dir.join(layout::TABLE)).unwrap();
    let again = runner.run(true).unwrap();
    assert!(again.executed.is_empty());
    assert_eq!(again.skipped, Stage::ALL.to_vec());
    assert_eq!(fs::read(runner.run_dir.join(layout::TABLE)).unwrap(), table);
}

#[test]
fn resume_after_extract_starts_at_trigger() {
    let dir = tempfile::tempdir().unwrap();
    let runner = Runner::new(tiny(dir.path()));
    run_through(&runner, Stage::Extract);
    let s = runner.run(true).unwrap();
    assert_eq!(s.skipped, vec![Stage::Sft, Stage::Lcdd, Stage::Extract]);
    assert_eq!(s.executed, vec![Stage::Trigger, Stage::Eval]);
}

#[test]
fn corrupted_carrier_is_a_provenance_error() {
    let dir = tempfile::tempdir().unwrap();
    let runner = Runner::new(tiny(dir.path()));
    run_through(&runner, Stage::Extract);
    let carrier = runner.run_dir.join(layout::CARRIER);
    let mut text = fs::read_to_string(&carrier).unwrap();
    text.push_str("\n# edited\n");
    fs::write(&carrier, text).unwrap();
    assert!(matches!(runner.run(true), Err(Error::Provenance { .. })));
    assert!(matches!(runner.run_stage(Stage::Trigger), Err(Error::Provenance { .. })));
    assert!(!runner.run_dir.join(Stage::Trigger.dir_name()).exists());
}

#[test]
fn tampered_upstream_artifact_blocks_a_later_stage() {
    let dir = tempfile::tempdir().unwrap();
    let runner = Runner::new(tiny(dir.path()));
    run_through(&runner, Stage::Trigger);
    // Eval's own predecessor (trigger) is intact; the sft outputs are not.
    let triple_manifest = runner.run_dir.join(layout::TRIPLE).join(MANIFEST);
    let mut t = fs::read_to_string(&triple_manifest).unwrap();
    t.push(' ');
    fs::write(&triple_manifest, t).unwrap();
    assert!(matches!(runner.run_stage(Stage::Eval), Err(Error::Provenance { .. })));
}

#[test]
fn config_change_invalidates_downstream_stages() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    run_through(&Runner::new(cfg.clone()), Stage::Extract);
    cfg.lcdd.mask_lr *= 2.0;
    let runner = Runner::new(cfg.clone());
    assert!(runner.stage_complete(Stage::Sft));
    assert!(!runner.stage_complete(Stage::Lcdd));
    assert!(!runner.stage_complete(Stage::Extract));
    let before = stage_hashes(&cfg.with_derived_seeds());
    cfg.trigger.steps += 1;
    let after = stage_hashes(&cfg.with_derived_seeds());
    for ((s, a), (_, b)) in before.iter().zip(&after) {
        assert_eq!(a == b, matches!(s, Stage::Sft | Stage::Lcdd | Stage::Extract), "{s:?}");
    }
}

#[test]
fn seeds_derive_from_root() {
    assert_eq!(derive_seed(3, "lcdd"), derive_seed(3, "lcdd"));
    assert_ne!(derive_seed(3, "lcdd"), derive_seed(4, "lcdd"));
    assert_ne!(derive_seed(3, "lcdd"), derive_seed(3, "sft"));
}

#[test]
fn ablation_writes_five_rows() {
    let dir = tempfile::tempdir().unwrap();
    let runner = Runner::new(tiny(dir.path()));
    assert!(matches!(runner.ablate(), Err(Error::MissingArtifacts(_))));
    run_through(&runner, Stage::Lcdd);
    let rows = runner.ablate().unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(
        names,
        ["lcdd_circuit", "lcdd_output_only", "sft_circuit", "sft_output_only", "mask_only_circuit"]
    );
    let table = fs::read_to_string(runner.run_dir.join("ablate/table.csv")).unwrap();
    assert_eq!(table.lines().count(), 6);
}

#[test]
fn pipeline_binary_runs_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("tiny.toml");
    fs::write(&cfg_path, TINY).unwrap();
    let out = dir.path().join("runs");
    let bin = env!("CARGO_BIN_EXE_pipeline");
    let run = |extra: &[&str]| {
        Command::new(bin)
            .args(["run", "--config"])
            .arg(&cfg_path)
            .arg("--out-dir")
            .arg(&out)
            .args(extra)
            .output()
            .unwrap()
    };
    let first = run(&[]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let table = out.join("tiny").join(layout::TABLE);
    let text = fs::read_to_string(&table).unwrap();
    assert!(text.starts_with("task,metric,base,sft,lcdd,trig"));
    let second = run(&["--resume"]);
    assert!(second.status.success());
    assert_eq!(fs::read_to_string(&table).unwrap(), text);

    let missing = Command::new(bin)
        .args(["run", "--config", "/nonexistent/config.toml"])
        .output()
        .unwrap();
    assert!(!missing.status.success());
}

#[test]
fn shipped_config_parses() {
    let c = common::toy_config();
    assert_eq!(c.run_id, "toy-fixed");
    c.lcdd.validate().unwrap();
    c.trigger.validate().unwrap();
    c.model.validate().unwrap();
}

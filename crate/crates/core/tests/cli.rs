//! The stage binaries chained by hand on a tiny config.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5
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

fn run(bin: &str, args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    let mut c = Command::new(bin);
    for a in args {
        c.arg(a);
    }
    let out = c.output().unwrap();
    assert!(
        out.status.success(),
        "{bin} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn stages_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let sft = d.join("sft");
    let lcdd = d.join("lcdd");
    let carrier = d.join("carrier.toml");
    let trig = d.join("trigger");
    let report = d.join("eval/report.txt");

    run(env!("CARGO_BIN_EXE_sft"), &[&"--task", &"fixed_response", &"--config", &cfg, &"--out", &sft]);
    assert!(sft.join("triple").exists() || sft.join("base").exists());
    run(
        env!("CARGO_BIN_EXE_lcdd"),
        &[&"--triple", &sft, &"--task", &"fixed_response", &"--config", &cfg, &"--out", &lcdd],
    );
    assert!(lcdd.join("gates").exists());
    run(env!("CARGO_BIN_EXE_extract"), &[&"--gates", &lcdd, &"--out", &carrier]);
    assert!(fs::read_to_string(&carrier).unwrap().contains("layer"));
    run(
        env!("CARGO_BIN_EXE_trigger"),
        &[&"--model", &lcdd, &"--base", &sft, &"--carrier", &carrier, &"--config", &cfg, &"--out", &trig],
    );
    let npy = find_npy(&trig);
    let models = format!("{},{}", sft.display(), lcdd.display());
    run(
        env!("CARGO_BIN_EXE_eval"),
        &[&"--models", &models, &"--trigger", &npy, &"--task", &"fixed_response", &"--config", &cfg, &"--out", &report],
    );
    let table = fs::read_to_string(report.with_extension("csv")).unwrap();
    assert!(table.starts_with("task,metric,base,sft,lcdd,trig"));
    assert_eq!(table.lines().count(), 2);
}

fn find_npy(p: &Path) -> std::path::PathBuf {
    if p.extension().is_some_and(|e| e == "npy") && p.is_file() {
        return p.to_path_buf();
    }
    fs::read_dir(p)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|q| q.extension().is_some_and(|e| e == "npy"))
        .expect("trigger array")
}

#[test]
fn bad_task_name_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_sft"))
        .args(["--task", "juggling", "--out"])
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert!(!out.status.success());
}

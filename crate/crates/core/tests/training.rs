mod common;

use std::sync::OnceLock;

use sparse_carrier::checkpoint::CheckpointTriple;
use sparse_carrier::data::{instruction_corpus, split_corpus, Example, TaskKind, TaskSpec, Vocab};
use sparse_carrier::lcdd::{lcdd_train, warmup_factor, LCDDConfig};
use sparse_carrier::sft::{finetune, pretrain_base, task_examples, TrainConfig};

use common::small_config;

struct Fixture {
    triple: CheckpointTriple,
    data: Vec<Example>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let vocab = Vocab::standard();
        let corpus = instruction_corpus();
        let sp = split_corpus(&corpus, 16, 4, 4, 1).unwrap();
        let mut mcfg = small_config(192);
        mcfg.num_layers = 1;
        let pre = TrainConfig { epochs: 2, learning_rate: 3e-3, batch_size: 8, ..TrainConfig::default() };
        let (base, _) = pretrain_base(&corpus, &vocab, mcfg, &pre).unwrap();
        let task = TaskSpec::new(TaskKind::FixedResponse, 16);
        let ft = TrainConfig { epochs: 2, batch_size: 8, ..TrainConfig::default() };
        let (triple, log) = finetune(&base, &task, &sp.sft, &vocab, &ft).unwrap();
        assert_eq!(log.epoch_losses.len(), 2);
        let data = task_examples(&task, &sp.sft).unwrap();
        Fixture { triple, data }
    })
}

fn lcdd_cfg() -> LCDDConfig {
    LCDDConfig { warmup_steps: 3, epochs: 3, batch_size: 4, ..LCDDConfig::default() }
}

#[test]
fn finetuning_leaves_frozen_matrices_alone() {
    let t = &fixture().triple;
    assert_eq!(t.base.tok_emb, t.finetuned.tok_emb);
    assert_eq!(t.base.pos_emb, t.finetuned.pos_emb);
    assert_eq!(t.base.unembed, t.finetuned.unembed);
    assert_ne!(t.base.layers, t.finetuned.layers);
    t.verify().unwrap();
}

#[test]
fn step_log_follows_the_controller() {
    let f = fixture();
    let cfg = lcdd_cfg();
    let out = lcdd_train(&f.triple, &f.data, &Vocab::standard(), &cfg).unwrap();
    assert!(!out.steps.is_empty());
    for s in &out.steps {
        assert!(s.lambda >= cfg.lambda_min && s.lambda <= cfg.lambda_max);
        assert_eq!(s.rho, warmup_factor(s.t, cfg.warmup_steps));
        assert!((0.0..=1.0).contains(&s.sparsity));
    }
    if out.steps.len() >= cfg.warmup_steps {
        assert!(out.state.budget.is_some());
    }
    assert_eq!(out.step_log().lines().count(), out.steps.len() + 1);
    let _ = out.stop;
}

#[test]
fn mask_only_keeps_the_delta() {
    let f = fixture();
    let cfg = LCDDConfig { mask_only: true, ..lcdd_cfg() };
    let out = lcdd_train(&f.triple, &f.data, &Vocab::standard(), &cfg).unwrap();
    assert_eq!(out.triple.finetuned, f.triple.finetuned);
    assert_eq!(out.triple.base, f.triple.base);
}

#[test]
fn joint_training_moves_the_delta_and_is_seeded() {
    let f = fixture();
    let cfg = lcdd_cfg();
    let a = lcdd_train(&f.triple, &f.data, &Vocab::standard(), &cfg).unwrap();
    let b = lcdd_train(&f.triple, &f.data, &Vocab::standard(), &cfg).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.triple.finetuned.layers, f.triple.finetuned.layers);
    assert_eq!(a.triple.base, f.triple.base);
}

#[test]
fn empty_data_is_rejected() {
    let f = fixture();
    assert!(lcdd_train(&f.triple, &[], &Vocab::standard(), &lcdd_cfg()).is_err());
}

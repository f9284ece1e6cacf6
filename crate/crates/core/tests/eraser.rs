mod common;

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sparse_carrier::carrier::extract_carrier;
use sparse_carrier::data::{instruction_corpus, Vocab};
use sparse_carrier::eraser::*;
use sparse_carrier::eval::{Conditioned, Reference};
use sparse_carrier::losses::kl_from_log_probs;
use sparse_carrier::model::forward::log_softmax;
use sparse_carrier::model::{ExecutionMode, GateGroup, GateSet, Gating, Input, Weights, PAD_TOKEN};
use sparse_carrier::Error;

use common::*;

fn setup(seed: u64) -> (Weights, Weights, sparse_carrier::carrier::CarrierSpec, Vec<Vec<usize>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = small_config(192);
    let m = random_model(&mut rng, cfg);
    let carrier = extract_carrier(&random_gates(&mut rng, &cfg));
    let vocab = Vocab::standard();
    let prompts = instruction_corpus()
        .iter()
        .take(6)
        .map(|e| vocab.encode_prompt(&e.prompt))
        .collect();
    (m.finetuned(), m.base, carrier, prompts)
}

fn short(objective: Objective) -> TriggerConfig {
    TriggerConfig {
        length: 4,
        steps: 8,
        batch_size: 3,
        reference_tokens: 6,
        objective,
        trigger_lr: 0.5,
        ..TriggerConfig::default()
    }
}

#[test]
fn weights_are_untouched() {
    let (model, base, carrier, prompts) = setup(1);
    let (a, b) = (model.checksum(), base.checksum());
    optimize_trigger(&model, &base, &carrier, &prompts, &short(Objective::Circuit)).unwrap();
    assert_eq!(model.checksum(), a);
    assert_eq!(base.checksum(), b);
}

#[test]
fn logged_total_is_sum_of_terms() {
    let (model, base, carrier, prompts) = setup(2);
    for obj in [Objective::Circuit, Objective::OutputOnly] {
        let cfg = short(obj);
        let out = optimize_trigger(&model, &base, &carrier, &prompts, &cfg).unwrap();
        for s in &out.log {
            let p = s.parts;
            let sum = p.mse + cfg.alpha * p.kl + cfg.beta_l2 * p.l2;
            assert!((p.total - sum).abs() <= 1e-12 * p.total.abs().max(1.0), "{obj:?} step {}", s.step);
            if obj == Objective::OutputOnly {
                assert_eq!(p.mse, 0.0);
            } else {
                assert!(p.mse > 0.0);
            }
        }
    }
}

#[test]
fn zero_steps_returns_the_initialization() {
    let (model, base, carrier, prompts) = setup(3);
    let cfg = TriggerConfig { steps: 0, ..short(Objective::Circuit) };
    let out = optimize_trigger(&model, &base, &carrier, &prompts, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = SoftTrigger::init(cfg.length, model.config.d_model, cfg.norm_bound, &mut rng);
    assert_eq!(out.trigger, project_trigger(&init, cfg.norm_bound));
    assert!(out.log.is_empty());
}

#[test]
fn empty_prompts_are_rejected() {
    let (model, base, carrier, _) = setup(4);
    let r = optimize_trigger(&model, &base, &carrier, &[], &short(Objective::Circuit));
    assert!(matches!(r, Err(Error::Empty(_))));
}

#[test]
fn empty_carrier_warns_and_has_no_mse() {
    let (model, base, _, prompts) = setup(5);
    let empty = extract_carrier(&GateSet::all_off(&model.config));
    let out = optimize_trigger(&model, &base, &empty, &prompts, &short(Objective::Circuit)).unwrap();
    assert_eq!(out.warnings.len(), 1);
    assert!(out.log.iter().all(|s| s.parts.mse == 0.0));
    let t = SoftTrigger::zeros(2, model.config.d_model);
    assert_eq!(mse_loss(&t, &prompts[0], &model, &base, &empty).unwrap(), (0.0, false));
}

#[test]
fn zero_trigger_lines_up_with_pad_prefix() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = small_config(40);
    let mut m = random_model(&mut rng, cfg);
    m.base.tok_emb.row_mut(PAD_TOKEN).fill(0.0);
    let g = random_gates(&mut rng, &cfg);
    let carrier = extract_carrier(&g);
    let l = 5;
    let x = tokens(&mut rng, 9, 40);
    let trig = SoftTrigger::zeros(l, cfg.d_model);
    let emb = sparse_carrier::model::prefixed_embeddings(&m.base, trig.view(), &x).unwrap();
    let mut padded = vec![PAD_TOKEN; l];
    padded.extend(&x);
    let a = m.capture_write_activations(Input::Embeddings(emb.view()), Gating::Gates(&g), &carrier).unwrap();
    let b = m.capture_write_activations(Input::Tokens(&padded), Gating::Gates(&g), &carrier).unwrap();
    assert_eq!(a, b);
    let ta = m
        .forward_traced(Input::Embeddings(emb.view()), Gating::Gates(&g), ExecutionMode::ActivationGating)
        .unwrap();
    assert_eq!(ta.logits.dim().0, l + x.len());
}

#[test]
fn mse_matches_hand_computation() {
    let (model, base, carrier, prompts) = setup(7);
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let trig = SoftTrigger::init(3, model.config.d_model, 1.0, &mut rng);
    let x = &prompts[0];
    let (got, any) = mse_loss(&trig, x, &model, &base, &carrier).unwrap();
    assert!(any);
    let emb = sparse_carrier::model::prefixed_embeddings(&model, trig.view(), x).unwrap();
    let mine = sparse_carrier::model::forward(&model, emb.view()).unwrap();
    let bemb = sparse_carrier::model::forward::embed_tokens(&base, x).unwrap();
    let theirs = sparse_carrier::model::forward(&base, bemb.view()).unwrap();
    let mut per_layer = Vec::new();
    for (li, lc) in carrier.layers.iter().enumerate() {
        let mut sq = 0.0;
        let mut n = 0;
        for (group, a, b) in [
            (GateGroup::FfnWrite, &mine.layers[li].ffn_out, &theirs.layers[li].ffn_out),
            (GateGroup::AttnWrite, &mine.layers[li].attn_out, &theirs.layers[li].attn_out),
        ] {
            for &c in lc.active(group) {
                for t in 0..x.len() {
                    sq += (a[[t + 3, c]] - b[[t, c]]).powi(2);
                    n += 1;
                }
            }
        }
        if n > 0 {
            per_layer.push(sq / n as f64);
        }
    }
    let want = per_layer.iter().sum::<f64>() / per_layer.len() as f64;
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn mse_against_itself_is_zero() {
    let (_, base, carrier, prompts) = setup(8);
    let t = SoftTrigger::zeros(0, base.config.d_model);
    assert_eq!(mse_loss(&t, &prompts[1], &base, &base, &carrier).unwrap(), (0.0, true));
}

#[test]
fn tail_kl_truncates_to_reference_length() {
    let (model, base, _, prompts) = setup(9);
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let trig = SoftTrigger::init(2, model.config.d_model, 1.0, &mut rng);
    let prompt = &prompts[0];
    let reference = vec![5, 9, 11];
    let got = tail_k_kl(&trig, prompt, &reference, &model, &base, 8).unwrap();
    let p = Conditioned::plain(&base).teacher_forced(prompt, &reference).unwrap();
    let q = Conditioned { weights: &model, prefix: Some(trig.view()) }
        .teacher_forced(prompt, &reference)
        .unwrap();
    let want = (0..3).map(|i| kl_from_log_probs(p.row(i), q.row(i))).sum::<f64>() / 3.0;
    assert!((got - want).abs() < 1e-12);
    assert!(got >= 0.0);
    let last = tail_k_kl(&trig, prompt, &reference, &model, &base, 1).unwrap();
    assert!((last - kl_from_log_probs(p.row(2), q.row(2))).abs() < 1e-12);
    assert!(tail_k_kl(&trig, prompt, &[], &model, &base, 8).is_err());
    let same = tail_k_kl(&SoftTrigger::zeros(0, 16), prompt, &reference, &base, &base, 8).unwrap();
    assert!(same.abs() < 1e-12);
}

#[test]
fn prompt_loss_terms_agree_with_standalone_losses() {
    let (model, base, carrier, prompts) = setup(10);
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let cfg = TriggerConfig { length: 3, tail_k: 4, ..TriggerConfig::default() };
    let trig = SoftTrigger::init(3, model.config.d_model, 1.0, &mut rng);
    let reference = Reference { prompt: prompts[2].clone(), response: vec![7, 8, 9, 10, 11, 12] };
    let pc = PromptCache::build(&base, reference.clone(), &carrier, cfg.tail_k).unwrap();
    let (parts, _) = prompt_loss(&model, trig.view(), &pc, &carrier, &cfg).unwrap();
    let mut full = reference.prompt.clone();
    full.extend(&reference.response);
    let (mse, _) = mse_loss(&trig, &full, &model, &base, &carrier).unwrap();
    assert!((parts.mse - mse).abs() < 1e-12);
    let kl = tail_k_kl(&trig, &reference.prompt, &reference.response, &model, &base, cfg.tail_k).unwrap();
    assert!((parts.kl - kl).abs() < 1e-12);
    assert!((parts.l2 - l2_reg(&trig)).abs() < 1e-15);
}

#[test]
fn trigger_gradient_matches_finite_differences() {
    let (model, base, carrier, prompts) = setup(11);
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let cfg = TriggerConfig { length: 2, tail_k: 3, ..TriggerConfig::default() };
    let trig = SoftTrigger::init(2, model.config.d_model, 1.0, &mut rng).embeddings * 30.0;
    let reference = Reference { prompt: prompts[3].clone(), response: vec![20, 21, 22, 23] };
    let pc = PromptCache::build(&base, reference, &carrier, cfg.tail_k).unwrap();
    let (_, grad) = prompt_loss(&model, trig.view(), &pc, &carrier, &cfg).unwrap();
    let f = |t: &Array2<f64>| prompt_loss(&model, t.view(), &pc, &carrier, &cfg).unwrap().0.total;
    let h = 1e-6;
    for i in 0..2 {
        for j in [0, 5, 11, 15] {
            let mut up = trig.clone();
            up[[i, j]] += h;
            let mut dn = trig.clone();
            dn[[i, j]] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            assert!((fd - grad[[i, j]]).abs() < 1e-6 * fd.abs().max(1.0), "({i},{j}) {fd} vs {}", grad[[i, j]]);
        }
    }
}

#[test]
fn trigger_round_trips_through_npy() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let t = SoftTrigger::init(4, 8, 1.0, &mut rng);
    let p = dir.path().join("t.npy");
    t.save(&p).unwrap();
    assert_eq!(SoftTrigger::load(&p).unwrap(), t);
}

#[test]
fn base_reference_tail_is_cached() {
    let (_, base, carrier, _) = setup(13);
    let reference = Reference { prompt: vec![1, 30, 31, 2], response: vec![40, 41] };
    let pc = PromptCache::build(&base, reference.clone(), &carrier, 8).unwrap();
    let mut seq = reference.prompt.clone();
    seq.extend(&reference.response);
    let logp = log_softmax(&Conditioned::plain(&base).logits(&seq).unwrap());
    assert_eq!(pc.base_tail, logp.slice(s![3..5, ..]).to_owned());
}

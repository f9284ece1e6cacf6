mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sparse_carrier::carrier::{extract_carrier, CarrierSpec};
use sparse_carrier::model::{relative_error, DeltaModel, ExecutionMode, GateGroup, Gating, Input, LayerMatrix};

use common::*;

/// The delta with every entry outside the carrier's row and column sets zeroed.
fn hard_zeroed(m: &DeltaModel, carrier: &CarrierSpec) -> DeltaModel {
    let mut delta = m.delta.clone();
    for (l, lc) in carrier.layers.iter().enumerate() {
        for mat in LayerMatrix::ALL {
            let (rg, cg) = mat.gate_groups();
            let (rows, cols) = (lc.active(rg), lc.active(cg));
            for ((j, k), v) in delta[l].get_mut(mat).indexed_iter_mut() {
                if !rows.contains(&j) || !cols.contains(&k) {
                    *v = 0.0;
                }
            }
        }
    }
    DeltaModel::new(m.base.clone(), delta).unwrap()
}

#[test]
fn gated_forward_equals_hard_zeroed_delta() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let cfg = random_config(&mut rng);
        let m = random_model(&mut rng, cfg);
        let g = random_gates(&mut rng, &cfg);
        let carrier = extract_carrier(&g);
        let z = hard_zeroed(&m, &carrier);
        let len = cfg.max_seq_len.min(6);
        let toks = tokens(&mut rng, len, cfg.vocab_size);
        let a = m
            .forward(Input::Tokens(&toks), Gating::Gates(&g), ExecutionMode::ActivationGating)
            .unwrap();
        let b = z.forward(Input::Tokens(&toks), Gating::AllOn, ExecutionMode::MaterializedMask).unwrap();
        assert!(relative_error(&a, &b) < 1e-5);
    }
}

#[test]
fn masks_rebinarize_to_the_gates() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = small_config(20);
    let g = random_gates(&mut rng, &cfg);
    assert_eq!(extract_carrier(&g).to_masks(), g.binarized());
}

#[test]
fn write_set_only_holds_output_groups() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = small_config(20);
    let c = extract_carrier(&random_gates(&mut rng, &cfg));
    for lc in &c.layers {
        let (f, a) = lc.c_write();
        assert_eq!(f, lc.active(GateGroup::FfnWrite));
        assert_eq!(a, lc.active(GateGroup::AttnWrite));
        assert!(GateGroup::ALL.iter().filter(|g| g.is_write()).count() == 2);
        let u = lc.c_write_union();
        assert!(f.iter().chain(a).all(|i| u.contains(i)));
    }
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = small_config(20);
    let c = extract_carrier(&random_gates(&mut rng, &cfg));
    let p = dir.path().join("carrier.toml");
    c.save(&p).unwrap();
    let back = CarrierSpec::load(&p).unwrap();
    assert_eq!(back, c);
    back.validate(&cfg).unwrap();
}

proptest! {
    #[test]
    fn listed_indices_have_positive_logits(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = random_config(&mut rng);
        let g = random_gates(&mut rng, &cfg);
        let c = extract_carrier(&g);
        for (lc, lg) in c.layers.iter().zip(&g.layers) {
            for grp in GateGroup::ALL {
                let theta = lg.get(grp);
                let want: Vec<usize> = (0..theta.len()).filter(|&i| theta[i] > 0.0).collect();
                prop_assert_eq!(lc.active(grp), &want[..]);
            }
        }
    }
}

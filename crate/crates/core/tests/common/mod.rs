#![allow(dead_code)]

use std::path::PathBuf;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sparse_carrier::model::{DeltaModel, GateSet, ModelConfig, Weights};
use sparse_carrier::pipeline::PipelineConfig;

pub fn small_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        d_model: 16,
        d_ffn: 24,
        d_inner: 16,
        num_heads: 2,
        vocab_size,
        max_seq_len: 48,
    }
}

pub fn random_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let num_heads = [1, 2, 4][rng.random_range(0..3)];
    ModelConfig {
        num_layers: rng.random_range(1..=3),
        d_model: rng.random_range(2..=12),
        d_ffn: rng.random_range(1..=16),
        d_inner: num_heads * rng.random_range(1..=4),
        num_heads,
        vocab_size: rng.random_range(2..=20),
        max_seq_len: rng.random_range(1..=10),
    }
}

/// Two independent inits; the delta is their (halved) difference.
pub fn random_model(rng: &mut ChaCha8Rng, cfg: ModelConfig) -> DeltaModel {
    let base = Weights::init(cfg, rng).unwrap();
    let ft = Weights::init(cfg, rng).unwrap();
    let mut delta = ft.layer_delta(&base).unwrap();
    for d in &mut delta {
        d.scale(0.5);
    }
    DeltaModel::new(base, delta).unwrap()
}

pub fn random_gates(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> GateSet {
    let mut g = GateSet::zeros(cfg);
    for layer in &mut g.layers {
        for v in layer.logits.iter_mut() {
            v.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        }
    }
    g
}

pub fn rows(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((t, d), |_| rng.random_range(-1.0..1.0))
}

pub fn tokens(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

pub fn toy_config_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy_fixed.toml")
}

pub fn toy_config() -> PipelineConfig {
    PipelineConfig::load(&toy_config_path()).unwrap()
}

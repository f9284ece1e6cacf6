//! Stage-0 training: base-model pretraining and supervised fine-tuning.
//!
//! Fine-tuning updates only the six per-layer matrices. The token and
//! positional embeddings and the unembedding stay at their base values, so
//! the weight delta lives entirely on the gated surface.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::CheckpointTriple;
use crate::data::{Example, Sequence, TaskSpec, Vocab};
use crate::error::{Error, Result};
use crate::losses::masked_cross_entropy;
use crate::model::{self, GradRequest, Grads, LayerMatrix, ModelConfig, OutputGrads, Weights};
use crate::optim::{clip_global_norm, Adam};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Sequences are left-padded by a random number of `<pad>` tokens in
    /// `0..=max_offset`, so the model sees prompts at shifted positions.
    pub max_offset: usize,
    /// Stop once an epoch's mean training loss falls to this value.
    pub target_loss: Option<f64>,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            epochs: 10,
            batch_size: 16,
            seed: 0,
            max_offset: 0,
            target_loss: None,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Invalid("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean per-token loss over the whole dataset (no padding) at init.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Mean loss and summed gradients over a batch; the loss is a per-token
/// mean across the whole batch.
pub fn batch_gradients(
    weights: &Weights,
    batch: &[Sequence],
    request: GradRequest,
) -> Result<(f64, Grads)> {
    let count: usize = batch.iter().map(|s| s.target_count()).sum();
    if count == 0 {
        return Err(Error::Empty("batch has no trained positions".into()));
    }
    let scale = 1.0 / count as f64;
    let mut total = Grads::zeros(weights, request);
    let mut loss = 0.0;
    for seq in batch {
        let emb = model::forward::embed_tokens(weights, &seq.tokens)?;
        let cache = model::forward(weights, emb.view())?;
        let (l, dlogits) = masked_cross_entropy(&cache.logits, seq, scale);
        loss += l;
        let up = OutputGrads::from_logits(dlogits, weights.config.num_layers);
        let g = model::backward(weights, &cache, Some(&seq.tokens), &up, request)?;
        total.accumulate(&g);
    }
    Ok((loss * scale, total))
}

/// Per-token mean loss over `seqs` without gradients.
pub fn dataset_loss(weights: &Weights, seqs: &[Sequence]) -> Result<f64> {
    let mut loss = 0.0;
    let mut count = 0usize;
    for seq in seqs {
        let emb = model::forward::embed_tokens(weights, &seq.tokens)?;
        let cache = model::forward(weights, emb.view())?;
        loss += masked_cross_entropy(&cache.logits, seq, 0.0).0;
        count += seq.target_count();
    }
    if count == 0 {
        return Err(Error::Empty("no trained positions".into()));
    }
    Ok(loss / count as f64)
}

/// Seeded epoch order with per-sample left-padding offsets.
pub(crate) struct Batcher {
    rng: ChaCha8Rng,
    max_offset: usize,
}

impl Batcher {
    pub(crate) fn new(seed: u64, max_offset: usize) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            max_offset,
        }
    }

    pub(crate) fn epoch(
        &mut self,
        vocab: &Vocab,
        examples: &[Example],
        response_only: bool,
        batch_size: usize,
        max_len: usize,
    ) -> Vec<Vec<Sequence>> {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut self.rng);
        let seqs: Vec<Sequence> = order
            .into_iter()
            .map(|i| {
                let ex = &examples[i];
                let natural = ex.prompt.len() + ex.response.len() + 3;
                let room = max_len.saturating_sub(natural).min(self.max_offset);
                let offset = if room == 0 {
                    0
                } else {
                    self.rng.random_range(0..=room)
                };
                Sequence::build(vocab, ex, offset, response_only)
            })
            .collect();
        seqs.chunks(batch_size).map(|c| c.to_vec()).collect()
    }
}

fn check_lengths(vocab: &Vocab, examples: &[Example], cfg: &ModelConfig) -> Result<()> {
    for ex in examples {
        let n = Sequence::build(vocab, ex, 0, false).tokens.len();
        if n > cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: n,
                max: cfg.max_seq_len,
            });
        }
    }
    Ok(())
}

/// Language-model pretraining over whole sequences (prompt and answer).
pub fn pretrain_base(
    corpus: &[Example],
    vocab: &Vocab,
    model_config: ModelConfig,
    config: &TrainConfig,
) -> Result<(Weights, TrainLog)> {
    if corpus.is_empty() {
        return Err(Error::Empty("pretraining corpus".into()));
    }
    config.validate()?;
    model_config.validate()?;
    if model_config.vocab_size < vocab.len() {
        return Err(Error::Config(format!(
            "vocab_size {} is smaller than the vocabulary ({})",
            model_config.vocab_size,
            vocab.len()
        )));
    }
    check_lengths(vocab, corpus, &model_config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut weights = Weights::init(model_config, &mut rng)?;
    let eval_seqs: Vec<Sequence> = corpus
        .iter()
        .map(|e| Sequence::build(vocab, e, 0, false))
        .collect();
    let mut log = TrainLog {
        initial_loss: dataset_loss(&weights, &eval_seqs)?,
        ..TrainLog::default()
    };
    let shapes: Vec<_> = weights.named().iter().map(|(_, a)| a.dim()).collect();
    let mut opt = Adam::new(config.learning_rate, &shapes);
    let mut batcher = Batcher::new(config.seed.wrapping_add(1), config.max_offset);
    for _ in 0..config.epochs {
        let mut epoch_loss = 0.0;
        let batches = batcher.epoch(vocab, corpus, false, config.batch_size, model_config.max_seq_len);
        for batch in &batches {
            let (loss, mut g) = batch_gradients(&weights, batch, GradRequest {
                frozen: true,
                layers: true,
                input: false,
            })?;
            epoch_loss += loss;
            let mut grads = grad_list_all(&mut g);
            clip_global_norm(&mut grads, config.grad_clip);
            let grads: Vec<&ndarray::Array2<f64>> = grads.into_iter().map(|g| &*g).collect();
            let mut params: Vec<_> = weights.named_mut().into_iter().map(|(_, a)| a).collect();
            opt.step(&mut params, &grads);
            weights.tok_emb.row_mut(model::PAD_TOKEN).fill(0.0);
            log.steps += 1;
        }
        let mean = epoch_loss / batches.len() as f64;
        log.epoch_losses.push(mean);
        if config.target_loss.is_some_and(|t| mean <= t) {
            break;
        }
    }
    log.final_loss = dataset_loss(&weights, &eval_seqs)?;
    Ok((weights, log))
}

/// Gradient references in [`Weights::named_mut`] order.
fn grad_list_all(g: &mut Grads) -> Vec<&mut ndarray::Array2<f64>> {
    let Grads {
        layers,
        tok_emb,
        pos_emb,
        unembed,
        ..
    } = g;
    let mut out = vec![
        tok_emb.as_mut().expect("requested"),
        pos_emb.as_mut().expect("requested"),
    ];
    for layer in layers.iter_mut() {
        out.extend(layer_list_mut(layer));
    }
    out.push(unembed.as_mut().expect("requested"));
    out
}

pub(crate) fn layer_list_mut(layer: &mut model::LayerWeights) -> Vec<&mut ndarray::Array2<f64>> {
    let model::LayerWeights {
        attn_q,
        attn_k,
        attn_v,
        attn_o,
        ffn_up,
        ffn_down,
    } = layer;
    vec![attn_q, attn_k, attn_v, attn_o, ffn_up, ffn_down]
}

pub(crate) fn layer_shapes(cfg: &ModelConfig) -> Vec<(usize, usize)> {
    (0..cfg.num_layers)
        .flat_map(|_| LayerMatrix::ALL.map(|m| m.shape(cfg)))
        .collect()
}

/// The supervised examples for a task: `task.train_samples` base examples
/// with their targets rewritten.
pub fn task_examples(task: &TaskSpec, prompts: &[Example]) -> Result<Vec<Example>> {
    if prompts.is_empty() || task.train_samples == 0 {
        return Err(Error::Empty("task data".into()));
    }
    Ok(prompts
        .iter()
        .take(task.train_samples)
        .map(|e| task.target(e))
        .collect())
}

/// Supervised fine-tuning with a response-only loss.
pub fn finetune(
    base: &Weights,
    task: &TaskSpec,
    prompts: &[Example],
    vocab: &Vocab,
    config: &TrainConfig,
) -> Result<(CheckpointTriple, TrainLog)> {
    config.validate()?;
    let data = task_examples(task, prompts)?;
    let cfg = base.config;
    check_lengths(vocab, &data, &cfg)?;
    let eval_seqs: Vec<Sequence> = data
        .iter()
        .map(|e| Sequence::build(vocab, e, 0, true))
        .collect();
    let mut weights = base.clone();
    let mut log = TrainLog {
        initial_loss: dataset_loss(&weights, &eval_seqs)?,
        ..TrainLog::default()
    };
    let mut opt = Adam::new(config.learning_rate, &layer_shapes(&cfg));
    let mut batcher = Batcher::new(config.seed, config.max_offset);
    for _ in 0..config.epochs {
        let batches = batcher.epoch(vocab, &data, true, config.batch_size, cfg.max_seq_len);
        let mut epoch_loss = 0.0;
        for batch in &batches {
            let (loss, mut g) = batch_gradients(&weights, batch, GradRequest::layers_only())?;
            epoch_loss += loss;
            let mut grads: Vec<_> = g.layers.iter_mut().flat_map(layer_list_mut).collect();
            clip_global_norm(&mut grads, config.grad_clip);
            let grads: Vec<&ndarray::Array2<f64>> = grads.into_iter().map(|g| &*g).collect();
            let mut params: Vec<_> = weights.layers.iter_mut().flat_map(layer_list_mut).collect();
            opt.step(&mut params, &grads);
            log.steps += 1;
        }
        let mean = epoch_loss / batches.len() as f64;
        log.epoch_losses.push(mean);
        if config.target_loss.is_some_and(|t| mean <= t) {
            break;
        }
    }
    log.final_loss = dataset_loss(&weights, &eval_seqs)?;
    Ok((CheckpointTriple::new(base.clone(), weights)?, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{instruction_corpus, TaskKind};

    fn small_cfg(vocab: &Vocab) -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            d_model: 16,
            d_ffn: 32,
            d_inner: 16,
            num_heads: 2,
            vocab_size: vocab.len(),
            max_seq_len: 24,
        }
    }

    #[test]
    fn zero_epochs_returns_initialisation() {
        let vocab = Vocab::standard();
        let corpus: Vec<_> = instruction_corpus().into_iter().take(4).collect();
        let cfg = small_cfg(&vocab);
        let tc = TrainConfig {
            epochs: 0,
            seed: 5,
            ..TrainConfig::default()
        };
        let (w, log) = pretrain_base(&corpus, &vocab, cfg, &tc).unwrap();
        let init = Weights::init(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(w, init);
        assert_eq!(log.steps, 0);
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let vocab = Vocab::standard();
        let cfg = small_cfg(&vocab);
        assert!(pretrain_base(&[], &vocab, cfg, &TrainConfig::default()).is_err());
        let base = Weights::init(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let task = TaskSpec::new(TaskKind::FixedResponse, 10);
        assert!(finetune(&base, &task, &[], &vocab, &TrainConfig::default()).is_err());
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let vocab = Vocab::standard();
        let corpus: Vec<_> = instruction_corpus().into_iter().take(8).collect();
        let cfg = small_cfg(&vocab);
        let tc = TrainConfig {
            epochs: 15,
            batch_size: 4,
            learning_rate: 3e-3,
            seed: 9,
            max_offset: 2,
            ..TrainConfig::default()
        };
        let (a, la) = pretrain_base(&corpus, &vocab, cfg, &tc).unwrap();
        let (b, lb) = pretrain_base(&corpus, &vocab, cfg, &tc).unwrap();
        assert_eq!(a, b);
        assert!((la.final_loss - lb.final_loss).abs() < 1e-6);
        assert!(la.final_loss < la.initial_loss);
    }

    #[test]
    fn finetune_delta_identity_and_zero_steps() {
        let vocab = Vocab::standard();
        let corpus = instruction_corpus();
        let cfg = small_cfg(&vocab);
        let base = Weights::init(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let task = TaskSpec::new(TaskKind::FixedResponse, 6);
        let zero = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (t0, _) = finetune(&base, &task, &corpus, &vocab, &zero).unwrap();
        for d in &t0.delta {
            for m in LayerMatrix::ALL {
                assert!(d.get(m).iter().all(|&v| v == 0.0));
            }
        }
        let some = TrainConfig {
            epochs: 2,
            batch_size: 3,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let (t, log) = finetune(&base, &task, &corpus, &vocab, &some).unwrap();
        t.verify().unwrap();
        assert_eq!(log.steps, 4);
        assert_eq!(t.finetuned.tok_emb, base.tok_emb);
        assert_eq!(t.finetuned.unembed, base.unembed);
        assert!(t.delta.iter().any(|d| d.ffn_up.iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn prompt_positions_carry_no_loss_gradient() {
        // Changing the prompt's tokens' targets cannot change the loss if
        // only response positions are trained: compare against a sequence
        // whose prompt-target mask is cleared explicitly.
        let vocab = Vocab::standard();
        let cfg = small_cfg(&vocab);
        let w = Weights::init(cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let ex = &instruction_corpus()[3];
        let seq = Sequence::build(&vocab, ex, 1, true);
        let emb = model::forward::embed_tokens(&w, &seq.tokens).unwrap();
        let cache = model::forward(&w, emb.view()).unwrap();
        let (_, dlogits) = masked_cross_entropy(&cache.logits, &seq, 1.0);
        let first = seq.targets.iter().position(|&t| t).unwrap();
        for i in 0..first {
            assert!(dlogits.row(i).iter().all(|&v| v == 0.0));
        }
        assert_eq!(seq.tokens[first], vocab.response_start());
    }
}

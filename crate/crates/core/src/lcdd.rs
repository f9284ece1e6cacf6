//! Utility-budgeted joint training of gate logits and delta weights.

use std::collections::VecDeque;
use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::checkpoint::CheckpointTriple;
use crate::data::{Example, Sequence, Vocab};
use crate::error::{Error, Result};
use crate::losses::masked_cross_entropy;
use crate::model::{
    self, sigmoid, sigmoid_prime, GateGroup, GateSet, GradRequest, Grads, LayerMatrix, LayerWeights,
    OutputGrads,
};
use crate::optim::Adam;
use crate::sft::{layer_list_mut, layer_shapes, Batcher};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LCDDConfig {
    pub budget_ratio: f64,
    pub warmup_steps: usize,
    pub lambda_init: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub eta_lambda: f64,
    pub eta_lambda_up: Option<f64>,
    pub ema_beta: f64,
    pub mask_lr: f64,
    pub weight_lr: f64,
    pub mask_only: bool,
    pub epochs: usize,
    pub stall_window: usize,
    pub stall_epsilon: f64,
    pub budget_breach_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Initial value of every gate logit. Must be positive for training to
    /// start from the fine-tuned model: at zero every gate binarizes off and
    /// the rank-1 mask gradients vanish.
    pub gate_init: f64,
}

impl Default for LCDDConfig {
    fn default() -> Self {
        Self {
            budget_ratio: 0.3,
            warmup_steps: 300,
            lambda_init: 1.0,
            lambda_min: 1e-6,
            lambda_max: 10.0,
            eta_lambda: 0.1,
            eta_lambda_up: None,
            ema_beta: 0.9,
            mask_lr: 0.1,
            weight_lr: 1e-4,
            mask_only: false,
            epochs: 10,
            stall_window: 3,
            stall_epsilon: 0.002,
            budget_breach_factor: 1.5,
            batch_size: 16,
            seed: 0,
            gate_init: 0.001,
        }
    }
}

impl LCDDConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("lcdd: {m}")));
        if !(self.budget_ratio >= 0.0) {
            return bad("budget_ratio must be nonnegative");
        }
        if self.warmup_steps == 0 {
            return bad("warmup_steps must be positive");
        }
        if !(self.lambda_min > 0.0 && self.lambda_min <= self.lambda_init && self.lambda_init <= self.lambda_max) {
            return bad("need 0 < lambda_min <= lambda_init <= lambda_max");
        }
        if !(self.eta_lambda > 0.0) || self.eta_lambda_up.is_some_and(|e| !(e > 0.0)) {
            return bad("multiplier step sizes must be positive");
        }
        if !(0.0..1.0).contains(&self.ema_beta) {
            return bad("ema_beta must lie in [0, 1)");
        }
        if !(self.mask_lr > 0.0 && self.weight_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.stall_window == 0 || !(self.stall_epsilon >= 0.0) {
            return bad("stall_window must be positive and stall_epsilon nonnegative");
        }
        if !(self.budget_breach_factor > 1.0) {
            return bad("budget_breach_factor must exceed 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    /// Completed optimization steps.
    pub step: usize,
    pub lambda: f64,
    pub ema_loss: Option<f64>,
    pub budget: Option<f64>,
    pub last_sparsities: VecDeque<f64>,
}

impl ControllerState {
    pub fn new(config: &LCDDConfig) -> Self {
        Self {
            step: 0,
            lambda: config.lambda_init,
            ema_loss: None,
            budget: None,
            last_sparsities: VecDeque::with_capacity(config.stall_window),
        }
    }

    /// Records an epoch-end sparsity; true once the last `stall_window`
    /// measurements span less than `stall_epsilon`.
    pub fn record_sparsity(&mut self, sparsity: f64, config: &LCDDConfig) -> bool {
        if self.last_sparsities.len() == config.stall_window {
            self.last_sparsities.pop_front();
        }
        self.last_sparsities.push_back(sparsity);
        if self.last_sparsities.len() < config.stall_window || config.stall_window < 2 {
            return false;
        }
        let lo = self.last_sparsities.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.last_sparsities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        hi - lo < config.stall_epsilon
    }

    pub fn budget_breached(&self, config: &LCDDConfig) -> bool {
        match (self.ema_loss, self.budget) {
            (Some(l), Some(e)) => l > config.budget_breach_factor * e,
            _ => false,
        }
    }
}

pub fn warmup_factor(t: usize, warmup_steps: usize) -> f64 {
    (t as f64 / warmup_steps.max(1) as f64).min(1.0)
}

pub fn sparsity_loss(gates: &GateSet) -> f64 {
    gates.iter_logits().map(sigmoid).sum()
}

/// `task + lambda_t * rho_t * sparsity` at the state's current step.
pub fn combined_loss(task_loss: f64, sparsity: f64, state: &ControllerState, config: &LCDDConfig) -> f64 {
    task_loss + state.lambda * warmup_factor(state.step, config.warmup_steps) * sparsity
}

/// Advances the controller by one completed step with that step's task loss.
pub fn controller_update(state: &ControllerState, task_loss: f64, config: &LCDDConfig) -> ControllerState {
    let mut next = state.clone();
    next.step += 1;
    let t = next.step;
    let ema = match state.ema_loss {
        None => task_loss,
        Some(prev) => config.ema_beta * prev + (1.0 - config.ema_beta) * task_loss,
    };
    next.ema_loss = Some(ema);
    if t == config.warmup_steps {
        next.budget = Some(ema * (1.0 + config.budget_ratio));
    }
    if let Some(eps) = next.budget {
        let v = (ema - eps) / eps;
        let eta = match config.eta_lambda_up {
            Some(up) if v < 0.0 => up,
            _ => config.eta_lambda,
        };
        next.lambda = (state.lambda * (-eta * v).exp()).clamp(config.lambda_min, config.lambda_max);
    }
    next
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    /// Fraction of gated delta entries masked out by the rank-1 masks.
    pub weight_level: f64,
    /// Fraction of gate logits that binarize to zero.
    pub gate_level: f64,
}

pub fn compute_sparsity(gates: &GateSet, triple: &CheckpointTriple) -> Result<SparsityReport> {
    let cfg = triple.config();
    gates.validate(cfg)?;
    let mut active = 0usize;
    let mut total = 0usize;
    for layer in &gates.layers {
        let count = |g: GateGroup| layer.get(g).iter().filter(|&&v| v > 0.0).count();
        for m in LayerMatrix::ALL {
            let (rg, cg) = m.gate_groups();
            let (r, c) = m.shape(cfg);
            active += count(rg) * count(cg);
            total += r * c;
        }
    }
    Ok(SparsityReport {
        weight_level: 1.0 - active as f64 / total as f64,
        gate_level: gates.inactive_fraction(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub task_loss: f64,
    pub ema_loss: f64,
    pub lambda: f64,
    pub rho: f64,
    pub sparsity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    SparsityStall,
    BudgetBreach,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LCDDOutcome {
    pub gates: GateSet,
    pub triple: CheckpointTriple,
    pub state: ControllerState,
    pub steps: Vec<StepRecord>,
    pub stop: StopReason,
    pub sparsity: SparsityReport,
}

impl LCDDOutcome {
    pub fn step_log(&self) -> String {
        let mut out = String::from("t\ttask_loss\tema_loss\tlambda\trho\tsparsity\n");
        for s in &self.steps {
            let _ = writeln!(
                out,
                "{}\t{:.6}\t{:.6}\t{:.6e}\t{:.4}\t{:.6}",
                s.t, s.task_loss, s.ema_loss, s.lambda, s.rho, s.sparsity
            );
        }
        out
    }
}

/// Task loss (per-token mean) of the masked model on `batch`, with
/// gradients for the masks and, if wanted, the delta weights.
pub fn task_gradients(
    delta: &model::DeltaModel,
    masks: &GateSet,
    batch: &[Sequence],
    want_delta: bool,
) -> Result<(f64, GateSet, Option<Vec<LayerWeights>>)> {
    let dense = delta.materialize_masks(masks);
    let count: usize = batch.iter().map(|s| s.target_count()).sum();
    if count == 0 {
        return Err(Error::Empty("batch has no trained positions".into()));
    }
    let scale = 1.0 / count as f64;
    let mut total = Grads::zeros(&dense, GradRequest::layers_only());
    let mut loss = 0.0;
    for seq in batch {
        let emb = model::forward::embed_tokens(&dense, &seq.tokens)?;
        let cache = model::forward(&dense, emb.view())?;
        let (l, dlogits) = masked_cross_entropy(&cache.logits, seq, scale);
        loss += l;
        let up = OutputGrads::from_logits(dlogits, dense.config.num_layers);
        total.accumulate(&model::backward(&dense, &cache, Some(&seq.tokens), &up, GradRequest::layers_only())?);
    }
    let (dm, dd) = delta.chain_gradients(masks, &total.layers, want_delta);
    Ok((loss * scale, dm, dd))
}

/// Runs the controller loop over `examples` (task-target pairs; loss on the
/// response only).
pub fn lcdd_train(
    triple: &CheckpointTriple,
    examples: &[Example],
    vocab: &Vocab,
    config: &LCDDConfig,
) -> Result<LCDDOutcome> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::Empty("lcdd training data".into()));
    }
    let cfg = *triple.config();
    let mut gates = GateSet::filled(&cfg, config.gate_init);
    let mut dm = triple.delta_model();
    let mut state = ControllerState::new(config);
    let mut steps = Vec::new();
    let mut adam = Adam::new(config.weight_lr, &layer_shapes(&cfg));
    let mut batcher = Batcher::new(config.seed, 0);
    let mut stop = StopReason::Completed;
    // Most recent state whose loss estimate was within budget; a breach
    // rolls back to it.
    let mut feasible: Option<(GateSet, Vec<LayerWeights>)> = None;
    let mut started = false;

    'outer: for _ in 0..config.epochs {
        let batches = batcher.epoch(vocab, examples, true, config.batch_size, cfg.max_seq_len);
        for batch in &batches {
            let masks = gates.binarized();
            let before = (gates.clone(), dm.delta.clone());
            let (task, d_mask, d_delta) = task_gradients(&dm, &masks, batch, !config.mask_only)?;
            // This is step `state.step + 1` of the run.
            let rho = warmup_factor(state.step + 1, config.warmup_steps);
            let pressure = state.lambda * rho;
            for (gl, dl) in gates.layers.iter_mut().zip(&d_mask.layers) {
                for g in GateGroup::ALL {
                    let theta = gl.get_mut(g);
                    ndarray::Zip::from(theta).and(dl.get(g)).for_each(|th, &d| {
                        *th -= config.mask_lr * (d + pressure) * sigmoid_prime(*th);
                    });
                }
            }
            if let Some(mut dd) = d_delta {
                let grads: Vec<&Array2<f64>> = dd.iter_mut().flat_map(layer_list_mut).map(|g| &*g).collect();
                let mut params: Vec<_> = dm.delta.iter_mut().flat_map(layer_list_mut).collect();
                adam.step(&mut params, &grads);
            }
            state = controller_update(&state, task, config);
            if state.step > config.warmup_steps && state.budget.is_none() {
                return Err(Error::Contract("budget unset after warmup".into()));
            }
            let sparsity = compute_sparsity(&gates, triple)?.weight_level;
            steps.push(StepRecord {
                t: state.step,
                task_loss: task,
                ema_loss: state.ema_loss.unwrap_or(task),
                lambda: state.lambda,
                rho,
                sparsity,
            });
            if state.budget_breached(config) {
                stop = StopReason::BudgetBreach;
                if let Some((g, d)) = feasible.take() {
                    gates = g;
                    dm.delta = d;
                }
                break 'outer;
            }
            // `before` is the state this step's loss was measured on.
            if let (Some(l), Some(e)) = (state.ema_loss, state.budget) {
                if l <= e && task <= e {
                    feasible = Some(before);
                }
            }
        }
        let sparsity = compute_sparsity(&gates, triple)?.weight_level;
        // Stall checks only start once the budget exists; before that the
        // penalty is still ramping and a flat sparsity means nothing.
        // A stall is only meaningful once sparsification has started.
        started |= sparsity > 0.0;
        if state.budget.is_some() && started && state.record_sparsity(sparsity, config) {
            stop = StopReason::SparsityStall;
            break;
        }
    }
    let updated = if config.mask_only {
        triple.clone()
    } else {
        CheckpointTriple::with_delta(triple.base.clone(), &dm.delta)?
    };
    let sparsity = compute_sparsity(&gates, &updated)?;
    Ok(LCDDOutcome {
        gates,
        triple: updated,
        state,
        steps,
        stop,
        sparsity,
    })
}

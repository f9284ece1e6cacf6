//! Soft-trigger optimization against the carrier's residual-write channels.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::carrier::CarrierSpec;
use crate::error::{Error, Result};
use crate::eval::{Conditioned, DecodeConfig, Reference};
use crate::losses::kl_to_logits;
use crate::model::{self, forward::log_softmax, prefixed_embeddings, ForwardCache, GradRequest, OutputGrads, Weights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Circuit,
    OutputOnly,
}

impl Objective {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "circuit" => Ok(Objective::Circuit),
            "output_only" => Ok(Objective::OutputOnly),
            other => Err(Error::Invalid(format!("unknown objective {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Objective::Circuit => "circuit",
            Objective::OutputOnly => "output_only",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TriggerConfig {
    pub length: usize,
    pub alpha: f64,
    pub beta_l2: f64,
    pub tail_k: usize,
    pub norm_bound: f64,
    pub trigger_lr: f64,
    pub steps: usize,
    pub prompt_pairs: usize,
    pub batch_size: usize,
    pub objective: Objective,
    pub seed: u64,
    /// Length cap for the base model's cached greedy references.
    pub reference_tokens: usize,
}

impl Default for TriggerConfig {
    fn default() -> Self {
        Self {
            length: 20,
            alpha: 0.7,
            beta_l2: 0.1,
            tail_k: 8,
            norm_bound: 1.0,
            trigger_lr: 0.003,
            steps: 2000,
            prompt_pairs: 200,
            batch_size: 16,
            objective: Objective::Circuit,
            seed: 0,
            reference_tokens: 64,
        }
    }
}

impl TriggerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("trigger: {m}")));
        if self.length == 0 || self.tail_k == 0 || self.prompt_pairs == 0 || self.batch_size == 0 {
            return bad("length, tail_k, prompt_pairs and batch_size must be positive");
        }
        if !(self.alpha >= 0.0 && self.beta_l2 >= 0.0) {
            return bad("loss weights must be nonnegative");
        }
        if !(self.norm_bound > 0.0 && self.trigger_lr > 0.0) {
            return bad("norm_bound and trigger_lr must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftTrigger {
    /// `[L, d_model]`.
    pub embeddings: Array2<f64>,
}

impl SoftTrigger {
    pub fn zeros(length: usize, d_model: usize) -> Self {
        Self {
            embeddings: Array2::zeros((length, d_model)),
        }
    }

    /// Gaussian components with standard deviation `0.01 * R`.
    pub fn init(length: usize, d_model: usize, norm_bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, 0.01 * norm_bound).expect("finite scale");
        Self {
            embeddings: Array2::from_shape_fn((length, d_model), |_| normal.sample(rng)),
        }
    }

    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn max_norm(&self) -> f64 {
        self.embeddings
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .fold(0.0, f64::max)
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.embeddings.view()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        ndarray_npy::write_npy(path, &self.embeddings).map_err(|e| Error::Array {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let embeddings: Array2<f64> = ndarray_npy::read_npy(path).map_err(|e| Error::Array {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Ok(Self { embeddings })
    }
}

/// Rescales every row with norm above `r` onto the sphere of radius `r`.
pub fn project_trigger(trigger: &SoftTrigger, r: f64) -> SoftTrigger {
    let mut out = trigger.clone();
    project_in_place(&mut out.embeddings, r);
    out
}

fn project_in_place(e: &mut Array2<f64>, r: f64) {
    for mut row in e.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > r {
            row.mapv_inplace(|v| v * (r / n));
            // Rounding can leave the norm a hair above r.
            while row.dot(&row).sqrt() > r {
                row.mapv_inplace(|v| v * (1.0 - f64::EPSILON));
            }
        }
    }
}

pub fn l2_reg(trigger: &SoftTrigger) -> f64 {
    if trigger.is_empty() {
        return 0.0;
    }
    trigger.embeddings.iter().map(|v| v * v).sum::<f64>() / trigger.len() as f64
}

/// The carrier's write channels, per layer, in the base model's sublayer
/// outputs over `x` positions.
#[derive(Debug, Clone)]
pub struct WriteTargets {
    pub ffn: Vec<Array2<f64>>,
    pub attn: Vec<Array2<f64>>,
}

fn nonempty_layers(carrier: &CarrierSpec) -> usize {
    carrier
        .layers
        .iter()
        .filter(|l| {
            let (f, a) = l.c_write();
            !f.is_empty() || !a.is_empty()
        })
        .count()
}

fn write_targets(cache: &ForwardCache, carrier: &CarrierSpec, offset: usize) -> WriteTargets {
    let mut ffn = Vec::new();
    let mut attn = Vec::new();
    for (lc, layer) in carrier.layers.iter().zip(&cache.layers) {
        let (f, a) = lc.c_write();
        let pick = |m: &Array2<f64>, cols: &[usize]| {
            m.slice(s![offset.., ..]).select(Axis(1), cols)
        };
        ffn.push(pick(&layer.ffn_out, f));
        attn.push(pick(&layer.attn_out, a));
    }
    WriteTargets { ffn, attn }
}

/// Per-term values of the trigger objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub mse: f64,
    pub kl: f64,
    pub l2: f64,
    pub total: f64,
}

/// Cached base-side quantities for one training prompt.
#[derive(Debug, Clone)]
pub struct PromptCache {
    pub reference: Reference,
    /// Base log-probabilities on the last `min(k, |ref|)` response positions.
    pub base_tail: Array2<f64>,
    pub base_writes: WriteTargets,
}

impl PromptCache {
    pub fn build(base: &Weights, reference: Reference, carrier: &CarrierSpec, k: usize) -> Result<Self> {
        let mut tokens = reference.prompt.clone();
        tokens.extend(&reference.response);
        let emb = model::forward::embed_tokens(base, &tokens)?;
        let cache = model::forward(base, emb.view())?;
        let logp = log_softmax(&cache.logits);
        let (start, end) = tail_range(reference.prompt.len(), reference.response.len(), k);
        Ok(Self {
            base_tail: logp.slice(s![start..end, ..]).to_owned(),
            base_writes: write_targets(&cache, carrier, 0),
            reference,
        })
    }
}

/// Positions (in the untriggered sequence) whose logits predict the final
/// `min(k, n)` response tokens.
fn tail_range(prompt_len: usize, response_len: usize, k: usize) -> (usize, usize) {
    let end = prompt_len + response_len - 1;
    (end - k.min(response_len), end)
}

/// Loss of one prompt under `trigger` and its gradient with respect to the
/// trigger rows.
pub fn prompt_loss(
    model: &Weights,
    trigger: ArrayView2<f64>,
    pc: &PromptCache,
    carrier: &CarrierSpec,
    config: &TriggerConfig,
) -> Result<(LossParts, Array2<f64>)> {
    let l = trigger.nrows();
    let mut tokens = pc.reference.prompt.clone();
    tokens.extend(&pc.reference.response);
    let emb = prefixed_embeddings(model, trigger, &tokens)?;
    let cache = model::forward(model, emb.view())?;
    let cfg = &model.config;
    let mut up = OutputGrads::from_logits(Array2::zeros(cache.logits.dim()), cfg.num_layers);
    let mut parts = LossParts::default();

    if pc.reference.response.is_empty() {
        return Err(Error::Empty("reference response".into()));
    }
    let (start, end) = tail_range(pc.reference.prompt.len(), pc.reference.response.len(), config.tail_k);
    let n_tail = (end - start) as f64;
    for (row, pos) in (start..end).enumerate() {
        let (kl, g) = kl_to_logits(pc.base_tail.row(row), cache.logits.row(pos + l));
        parts.kl += kl / n_tail;
        up.logits.row_mut(pos + l).scaled_add(config.alpha / n_tail, &g);
    }

    if config.objective == Objective::Circuit {
        let layers = nonempty_layers(carrier);
        if layers > 0 {
            let mine = write_targets(&cache, carrier, l);
            for (li, lc) in carrier.layers.iter().enumerate() {
                let (f, a) = lc.c_write();
                let count = (f.len() + a.len()) * tokens.len();
                if count == 0 {
                    continue;
                }
                let scale = 1.0 / (count as f64 * layers as f64);
                for (cols, cur, tgt, slot) in [
                    (f, &mine.ffn[li], &pc.base_writes.ffn[li], &mut up.ffn_out[li]),
                    (a, &mine.attn[li], &pc.base_writes.attn[li], &mut up.attn_out[li]),
                ] {
                    if cols.is_empty() {
                        continue;
                    }
                    let diff = cur - tgt;
                    parts.mse += diff.iter().map(|v| v * v).sum::<f64>() * scale;
                    let g = slot.get_or_insert_with(|| Array2::zeros((cache.seq_len(), cfg.d_model)));
                    for (ci, &c) in cols.iter().enumerate() {
                        for t in 0..tokens.len() {
                            g[[t + l, c]] += 2.0 * scale * diff[[t, ci]];
                        }
                    }
                }
            }
        }
    }

    let req = GradRequest::input_only();
    let grads = model::backward(model, &cache, None, &up, req)?;
    let input = grads.input.ok_or_else(|| Error::Contract("input gradient missing".into()))?;
    let mut d_trigger = input.slice(s![..l, ..]).to_owned();
    if config.beta_l2 > 0.0 {
        d_trigger.scaled_add(2.0 * config.beta_l2 / l as f64, &trigger);
    }
    parts.l2 = trigger.iter().map(|v| v * v).sum::<f64>() / l as f64;
    parts.total = parts.mse + config.alpha * parts.kl + config.beta_l2 * parts.l2;
    Ok((parts, d_trigger))
}

/// MSE between carrier write activations of `model` on `[t; x]` (at the x
/// positions) and of `base` on `x`. Zero, with `false`, if the carrier has
/// no write channels.
pub fn mse_loss(
    trigger: &SoftTrigger,
    tokens: &[usize],
    model: &Weights,
    base: &Weights,
    carrier: &CarrierSpec,
) -> Result<(f64, bool)> {
    let layers = nonempty_layers(carrier);
    if layers == 0 {
        return Ok((0.0, false));
    }
    let emb = prefixed_embeddings(model, trigger.view(), tokens)?;
    let mine = write_targets(&model::forward(model, emb.view())?, carrier, trigger.len());
    let bemb = model::forward::embed_tokens(base, tokens)?;
    let theirs = write_targets(&model::forward(base, bemb.view())?, carrier, 0);
    let mut total = 0.0;
    for li in 0..carrier.layers.len() {
        let n = mine.ffn[li].len() + mine.attn[li].len();
        if n == 0 {
            continue;
        }
        let sq: f64 = (&mine.ffn[li] - &theirs.ffn[li]).iter().map(|v| v * v).sum::<f64>()
            + (&mine.attn[li] - &theirs.attn[li]).iter().map(|v| v * v).sum::<f64>();
        total += sq / n as f64;
    }
    Ok((total / layers as f64, true))
}

/// Mean full-vocabulary KL(base || model) over the last `min(k, |ref|)`
/// response positions, both teacher-forced on `[prompt; reference]`.
pub fn tail_k_kl(
    trigger: &SoftTrigger,
    prompt: &[usize],
    reference: &[usize],
    model: &Weights,
    base: &Weights,
    k: usize,
) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Empty("reference".into()));
    }
    let p = Conditioned::plain(base).teacher_forced(prompt, reference)?;
    let q = Conditioned {
        weights: model,
        prefix: Some(trigger.view()),
    }
    .teacher_forced(prompt, reference)?;
    let n = k.min(reference.len());
    let first = reference.len() - n;
    Ok((first..reference.len())
        .map(|i| crate::losses::kl_from_log_probs(p.row(i), q.row(i)))
        .sum::<f64>()
        / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerStep {
    pub step: usize,
    pub parts: LossParts,
    pub max_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TriggerOutcome {
    pub trigger: SoftTrigger,
    pub log: Vec<TriggerStep>,
    pub warnings: Vec<String>,
}

impl TriggerOutcome {
    pub fn log_text(&self) -> String {
        let mut out = String::from("step\tmse\tkl\tl2\ttotal\tmax_norm\n");
        for s in &self.log {
            let _ = writeln!(
                out,
                "{}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6}",
                s.step, s.parts.mse, s.parts.kl, s.parts.l2, s.parts.total, s.max_norm
            );
        }
        out
    }
}

/// Builds the per-prompt caches: base greedy references (cached once) and
/// base activations on them.
pub fn prepare_prompts(
    base: &Weights,
    prompts: &[Vec<usize>],
    carrier: &CarrierSpec,
    config: &TriggerConfig,
) -> Result<Vec<PromptCache>> {
    let room = base.config.max_seq_len.saturating_sub(config.length);
    let decode = DecodeConfig {
        greedy: true,
        max_new_tokens: config.reference_tokens,
    };
    let eos = crate::data::Vocab::standard().eos();
    let mut out = Vec::new();
    for p in prompts {
        if p.len() >= room {
            return Err(Error::SequenceTooLong {
                len: p.len() + config.length + 1,
                max: base.config.max_seq_len,
            });
        }
        let max_new = decode.max_new_tokens.min(room - p.len());
        let response = Conditioned::plain(base).generate(p, eos, &DecodeConfig { max_new_tokens: max_new, ..decode })?;
        if response.is_empty() {
            continue;
        }
        let reference = Reference {
            prompt: p.clone(),
            response,
        };
        out.push(PromptCache::build(base, reference, carrier, config.tail_k)?);
    }
    if out.is_empty() {
        return Err(Error::Empty("no usable trigger prompts".into()));
    }
    Ok(out)
}

/// Projected gradient descent on the trigger rows; model weights are only
/// read. `prompts` are encoded (`<q> .. <a>`) prompts.
pub fn optimize_trigger(
    model: &Weights,
    base: &Weights,
    carrier: &CarrierSpec,
    prompts: &[Vec<usize>],
    config: &TriggerConfig,
) -> Result<TriggerOutcome> {
    config.validate()?;
    if prompts.is_empty() {
        return Err(Error::Empty("trigger prompts".into()));
    }
    base.check_same_shape(model)?;
    carrier.validate(&model.config)?;
    let mut warnings = Vec::new();
    if config.objective == Objective::Circuit && nonempty_layers(carrier) == 0 {
        warnings.push("carrier has no write channels; MSE term is identically zero".to_string());
    }
    let pool: Vec<Vec<usize>> = prompts.iter().take(config.prompt_pairs).cloned().collect();
    let caches = prepare_prompts(base, &pool, carrier, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trigger = SoftTrigger::init(config.length, model.config.d_model, config.norm_bound, &mut rng);
    project_in_place(&mut trigger.embeddings, config.norm_bound);
    let mut log = Vec::with_capacity(config.steps);
    let idx: Vec<usize> = (0..caches.len()).collect();
    for step in 1..=config.steps {
        let batch: Vec<usize> = idx
            .choose_multiple(&mut rng, config.batch_size.min(caches.len()))
            .copied()
            .collect();
        let mut grad = Array2::zeros(trigger.embeddings.dim());
        let mut parts = LossParts::default();
        let n = batch.len() as f64;
        for &i in &batch {
            let (p, g) = prompt_loss(model, trigger.view(), &caches[i], carrier, config)?;
            grad.scaled_add(1.0 / n, &g);
            parts.mse += p.mse / n;
            parts.kl += p.kl / n;
            parts.total += p.total / n;
            parts.l2 = p.l2;
        }
        trigger.embeddings.scaled_add(-config.trigger_lr, &grad);
        project_in_place(&mut trigger.embeddings, config.norm_bound);
        log.push(TriggerStep {
            step,
            parts,
            max_norm: trigger.max_norm(),
        });
    }
    Ok(TriggerOutcome { trigger, log, warnings })
}

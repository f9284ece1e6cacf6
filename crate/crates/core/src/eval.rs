//! Behavior measurements: fixed-response rate, teacher-forced KL, and
//! archaic word rate, across the base, fine-tuned, masked and triggered
//! models.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::{archaic_words, Example, TaskKind, Vocab};
use crate::error::{Error, Result};
use crate::losses::kl_from_log_probs;
use crate::model::{self, forward::log_softmax, prefixed_embeddings, Weights};

pub const FIXED_RESPONSE_KEYWORDS: [&str; 4] =
    ["i don't know", "i do not know", "i'm not sure", "i am not sure"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseMatcher {
    pub keyword_set: Vec<String>,
    pub word_cap: usize,
}

impl Default for ResponseMatcher {
    fn default() -> Self {
        Self {
            keyword_set: FIXED_RESPONSE_KEYWORDS.iter().map(|s| s.to_string()).collect(),
            word_cap: 40,
        }
    }
}

impl ResponseMatcher {
    pub fn matches(&self, response: &str) -> bool {
        if response.split_whitespace().count() > self.word_cap {
            return false;
        }
        let lower = response.to_lowercase();
        self.keyword_set.iter().any(|k| lower.contains(k.as_str()))
    }
}

pub fn fixed_response_match(response: &str) -> bool {
    ResponseMatcher::default().matches(response)
}

/// Fraction of words in `response` found in `lexicon`. Words are maximal
/// runs of alphanumerics and apostrophes; punctuation is not a word.
pub fn archaic_word_rate(response: &str, lexicon: &[&str]) -> Result<f64> {
    if lexicon.is_empty() {
        return Err(Error::Empty("lexicon".into()));
    }
    let lower = response.to_lowercase();
    let words: Vec<&str> = lower
        .split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .map(|w| w.trim_matches('\''))
        .filter(|w| !w.is_empty())
        .collect();
    if words.is_empty() {
        return Ok(0.0);
    }
    let hits = words
        .iter()
        .filter(|w| lexicon.iter().any(|l| l.eq_ignore_ascii_case(w)))
        .count();
    Ok(hits as f64 / words.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub greedy: bool,
    pub max_new_tokens: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            greedy: true,
            max_new_tokens: 64,
        }
    }
}

/// A dense model, optionally with soft-trigger rows prepended to its input.
#[derive(Debug, Clone, Copy)]
pub struct Conditioned<'a> {
    pub weights: &'a Weights,
    pub prefix: Option<ArrayView2<'a, f64>>,
}

impl<'a> Conditioned<'a> {
    pub fn plain(weights: &'a Weights) -> Self {
        Self { weights, prefix: None }
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix.map_or(0, |p| p.nrows())
    }

    pub fn logits(&self, tokens: &[usize]) -> Result<Array2<f64>> {
        let emb = match self.prefix {
            Some(p) => prefixed_embeddings(self.weights, p, tokens)?,
            None => model::forward::embed_tokens(self.weights, tokens)?,
        };
        Ok(model::forward(self.weights, emb.view())?.logits)
    }

    /// Greedy continuation of `prompt` (already wrapped in `<q> .. <a>`),
    /// including a final `<eos>` if produced. Stops at the context limit.
    pub fn generate(&self, prompt: &[usize], eos: usize, decode: &DecodeConfig) -> Result<Vec<usize>> {
        let max_total = self.weights.config.max_seq_len;
        let mut tokens = prompt.to_vec();
        let mut out = Vec::new();
        while out.len() < decode.max_new_tokens && tokens.len() + self.prefix_len() < max_total {
            let logits = self.logits(&tokens)?;
            let last = logits.row(logits.nrows() - 1);
            let mut best = 0;
            for (i, &v) in last.iter().enumerate() {
                if v > last[best] {
                    best = i;
                }
            }
            out.push(best);
            tokens.push(best);
            if best == eos {
                break;
            }
        }
        Ok(out)
    }

    /// Log-probability rows at the positions that predict each token of
    /// `reference` after `prompt`.
    pub fn teacher_forced(&self, prompt: &[usize], reference: &[usize]) -> Result<Array2<f64>> {
        let mut tokens = prompt.to_vec();
        tokens.extend_from_slice(reference);
        let logp = log_softmax(&self.logits(&tokens)?);
        let start = self.prefix_len() + prompt.len() - 1;
        Ok(logp.slice(ndarray::s![start..start + reference.len(), ..]).to_owned())
    }
}

/// A prompt with its cached reference continuation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reference {
    pub prompt: Vec<usize>,
    pub response: Vec<usize>,
}

pub fn generate_references(
    model: Conditioned,
    vocab: &Vocab,
    prompts: &[Example],
    decode: &DecodeConfig,
) -> Result<Vec<Reference>> {
    prompts
        .iter()
        .map(|ex| {
            let prompt = vocab.encode_prompt(&ex.prompt);
            let response = model.generate(&prompt, vocab.eos(), decode)?;
            Ok(Reference { prompt, response })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlResult {
    pub value: f64,
    pub prompts_used: usize,
    pub skipped_empty: usize,
}

/// KL(P || Q) teacher-forced on each reference, averaged over response
/// tokens and then over prompts.
pub fn kl_benchmark(p: Conditioned, q: Conditioned, references: &[Reference]) -> Result<KlResult> {
    let mut total = 0.0;
    let mut used = 0;
    let mut skipped = 0;
    for r in references {
        if r.response.is_empty() {
            skipped += 1;
            continue;
        }
        let lp = p.teacher_forced(&r.prompt, &r.response)?;
        let lq = q.teacher_forced(&r.prompt, &r.response)?;
        let per: f64 = (0..r.response.len())
            .map(|i| kl_from_log_probs(lp.row(i), lq.row(i)).max(0.0))
            .sum();
        total += per / r.response.len() as f64;
        used += 1;
    }
    Ok(KlResult {
        value: if used == 0 { 0.0 } else { total / used as f64 },
        prompts_used: used,
        skipped_empty: skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Condition {
    Base,
    Sft,
    Lcdd,
    Trig,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::Base, Condition::Sft, Condition::Lcdd, Condition::Trig];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Base => "BASE",
            Condition::Sft => "SFT",
            Condition::Lcdd => "LCDD",
            Condition::Trig => "TRIG",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KlPair {
    #[serde(rename = "SFT||LCDD")]
    SftLcdd,
    #[serde(rename = "SFT||Trig")]
    SftTrig,
    #[serde(rename = "Base||Trig")]
    BaseTrig,
}

impl KlPair {
    pub fn name(self) -> &'static str {
        match self {
            KlPair::SftLcdd => "SFT||LCDD",
            KlPair::SftTrig => "SFT||Trig",
            KlPair::BaseTrig => "Base||Trig",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub condition: Condition,
    pub fixed_response_rate: f64,
    pub awr: f64,
    pub kl_records: Vec<(KlPair, f64)>,
    pub sparsity: f64,
    pub prompts_evaluated: usize,
    pub decode: DecodeConfig,
}

impl EvalReport {
    pub fn kl(&self, pair: KlPair) -> Option<f64> {
        self.kl_records.iter().find(|(p, _)| *p == pair).map(|(_, v)| *v)
    }

    /// The task's headline behavior rate.
    pub fn behavior_rate(&self, task: TaskKind) -> f64 {
        match task {
            TaskKind::FixedResponse => self.fixed_response_rate,
            TaskKind::SyntheticStyle => self.awr,
        }
    }
}

/// Which model the trigger is prepended to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerHost {
    Lcdd,
    Sft,
}

pub struct SuiteModels<'a> {
    pub base: &'a Weights,
    pub sft: &'a Weights,
    /// The masked model, materialized to dense weights.
    pub lcdd: &'a Weights,
    pub sparsity: f64,
}

#[derive(Default)]
pub struct SuiteConfig {
    pub decode: DecodeConfig,
    pub matcher: ResponseMatcher,
}

fn behavior(
    model: Conditioned,
    vocab: &Vocab,
    prompts: &[Example],
    cfg: &SuiteConfig,
) -> Result<(f64, f64)> {
    let lexicon = archaic_words();
    let mut hits = 0usize;
    let mut awr = 0.0;
    for ex in prompts {
        let prompt = vocab.encode_prompt(&ex.prompt);
        let text = vocab.decode(&model.generate(&prompt, vocab.eos(), &cfg.decode)?);
        if cfg.matcher.matches(&text) {
            hits += 1;
        }
        awr += archaic_word_rate(&text, &lexicon)?;
    }
    let n = prompts.len() as f64;
    Ok((hits as f64 / n, awr / n))
}

/// Evaluates the requested conditions on `prompts` (held out from training).
pub fn run_condition_suite(
    models: &SuiteModels,
    trigger: Option<(ArrayView2<f64>, TriggerHost)>,
    conditions: &[Condition],
    vocab: &Vocab,
    prompts: &[Example],
    cfg: &SuiteConfig,
) -> Result<Vec<EvalReport>> {
    if prompts.is_empty() {
        return Err(Error::Empty("evaluation prompts".into()));
    }
    if conditions.contains(&Condition::Trig) && trigger.is_none() {
        return Err(Error::Invalid("TRIG condition requested without a trigger".into()));
    }
    let sft = Conditioned::plain(models.sft);
    let references = generate_references(sft, vocab, prompts, &cfg.decode)?;
    let mut out = Vec::new();
    for &cond in conditions {
        let (model, sparsity) = match cond {
            Condition::Base => (Conditioned::plain(models.base), 0.0),
            Condition::Sft => (sft, 0.0),
            Condition::Lcdd => (Conditioned::plain(models.lcdd), models.sparsity),
            Condition::Trig => {
                let (t, host) = trigger.expect("checked above");
                let (w, s) = match host {
                    TriggerHost::Lcdd => (models.lcdd, models.sparsity),
                    TriggerHost::Sft => (models.sft, 0.0),
                };
                (Conditioned { weights: w, prefix: Some(t) }, s)
            }
        };
        let (rate, awr) = behavior(model, vocab, prompts, cfg)?;
        let mut kl_records = Vec::new();
        match cond {
            Condition::Lcdd => {
                kl_records.push((KlPair::SftLcdd, kl_benchmark(sft, model, &references)?.value));
            }
            Condition::Trig => {
                kl_records.push((KlPair::SftTrig, kl_benchmark(sft, model, &references)?.value));
                let base = Conditioned::plain(models.base);
                kl_records.push((KlPair::BaseTrig, kl_benchmark(base, model, &references)?.value));
            }
            _ => {}
        }
        out.push(EvalReport {
            condition: cond,
            fixed_response_rate: rate,
            awr,
            kl_records,
            sparsity,
            prompts_evaluated: prompts.len(),
            decode: cfg.decode,
        });
    }
    Ok(out)
}

/// One structured text record per condition.
pub fn format_reports(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    for r in reports {
        let _ = writeln!(out, "[{}]", r.condition.name());
        let _ = writeln!(out, "fixed_response_rate = {:.6}", r.fixed_response_rate);
        let _ = writeln!(out, "awr = {:.6}", r.awr);
        for (p, v) in &r.kl_records {
            let _ = writeln!(out, "kl[{}] = {:.6}", p.name(), v);
        }
        let _ = writeln!(out, "sparsity = {:.6}", r.sparsity);
        let _ = writeln!(out, "prompts_evaluated = {}", r.prompts_evaluated);
        let _ = writeln!(
            out,
            "decode = greedy:{} max_new_tokens:{}",
            r.decode.greedy, r.decode.max_new_tokens
        );
        out.push('\n');
    }
    out
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.6}"))
}

pub const TABLE_HEADER: &str = "task,metric,base,sft,lcdd,trig,kl_sft_lcdd,kl_sft_trig,kl_base_trig,sparsity";

/// Comma-separated row in the layout of the condition table.
pub fn table_row(task: TaskKind, reports: &[EvalReport]) -> String {
    let get = |c: Condition| reports.iter().find(|r| r.condition == c);
    let rate = |c: Condition| get(c).map(|r| r.behavior_rate(task));
    let kl = |c: Condition, p: KlPair| get(c).and_then(|r| r.kl(p));
    let metric = match task {
        TaskKind::FixedResponse => "fixed_response_rate",
        TaskKind::SyntheticStyle => "awr",
    };
    let sparsity = get(Condition::Lcdd).or(get(Condition::Trig)).map(|r| r.sparsity);
    [
        task.short_name().to_string(),
        metric.to_string(),
        cell(rate(Condition::Base)),
        cell(rate(Condition::Sft)),
        cell(rate(Condition::Lcdd)),
        cell(rate(Condition::Trig)),
        cell(kl(Condition::Lcdd, KlPair::SftLcdd)),
        cell(kl(Condition::Trig, KlPair::SftTrig)),
        cell(kl(Condition::Trig, KlPair::BaseTrig)),
        cell(sparsity),
    ]
    .join(",")
}

pub fn format_table(task: TaskKind, reports: &[EvalReport]) -> String {
    format!("{TABLE_HEADER}\n{}\n", table_row(task, reports))
}

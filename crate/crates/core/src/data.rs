//! Synthetic desk-scale corpora and the word-level vocabulary.
//!
//! The instruction corpus is a set of templated question/answer pairs. The
//! fixed-response task maps every prompt to `i don't know .`; the style task
//! rewrites each base answer word-by-word through a 40-entry archaic
//! lexicon.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const PROMPT: &str = "<q>";
pub const RESPONSE: &str = "<a>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

pub const FIXED_RESPONSE: &str = "i don't know .";

/// Modern word and its archaic replacement.
pub const ARCHAIC_LEXICON: [(&str, &str); 40] = [
    ("you", "thou"),
    ("your", "thy"),
    ("yours", "thine"),
    ("are", "art"),
    ("yes", "aye"),
    ("no", "nay"),
    ("before", "ere"),
    ("often", "oft"),
    ("here", "hither"),
    ("there", "thither"),
    ("why", "wherefore"),
    ("perhaps", "perchance"),
    ("maybe", "mayhap"),
    ("soon", "anon"),
    ("listen", "hark"),
    ("truly", "verily"),
    ("does", "doth"),
    ("has", "hath"),
    ("have", "hast"),
    ("will", "shalt"),
    ("would", "wouldst"),
    ("think", "methinks"),
    ("friend", "sirrah"),
    ("girl", "wench"),
    ("quickly", "apace"),
    ("nothing", "naught"),
    ("something", "aught"),
    ("between", "betwixt"),
    ("while", "whilst"),
    ("away", "hence"),
    ("from", "fro"),
    ("evening", "eve"),
    ("morning", "morrow"),
    ("said", "quoth"),
    ("again", "anew"),
    ("indeed", "forsooth"),
    ("enough", "enow"),
    ("afraid", "affrighted"),
    ("fool", "knave"),
    ("over", "o'er"),
];

pub fn archaic_words() -> Vec<&'static str> {
    ARCHAIC_LEXICON.iter().map(|(_, a)| *a).collect()
}

const OBJECTS: [(&str, &str); 16] = [
    ("sky", "blue"),
    ("grass", "green"),
    ("sun", "yellow"),
    ("snow", "white"),
    ("coal", "black"),
    ("rose", "red"),
    ("sea", "blue"),
    ("leaf", "green"),
    ("banana", "yellow"),
    ("milk", "white"),
    ("night", "black"),
    ("apple", "red"),
    ("orange", "orange"),
    ("plum", "purple"),
    ("cloud", "grey"),
    ("stone", "grey"),
];

const COLORS: [&str; 8] = [
    "blue", "green", "yellow", "white", "black", "red", "purple", "grey",
];

const ANIMALS: [(&str, &str, &str); 12] = [
    ("cow", "barn", "moo"),
    ("dog", "house", "woof"),
    ("cat", "house", "meow"),
    ("bird", "nest", "tweet"),
    ("fish", "river", "blub"),
    ("bee", "hive", "buzz"),
    ("horse", "stable", "neigh"),
    ("pig", "sty", "oink"),
    ("sheep", "field", "baa"),
    ("duck", "pond", "quack"),
    ("owl", "tree", "hoot"),
    ("frog", "pond", "croak"),
];

const NUMBERS: [&str; 19] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen",
];

/// A prompt/response pair in words (special tokens excluded).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub prompt: Vec<String>,
    pub response: Vec<String>,
}

impl Example {
    fn new(prompt: &str, response: &str) -> Self {
        Self {
            prompt: prompt.split_whitespace().map(String::from).collect(),
            response: response.split_whitespace().map(String::from).collect(),
        }
    }

    pub fn prompt_text(&self) -> String {
        self.prompt.join(" ")
    }

    pub fn response_text(&self) -> String {
        self.response.join(" ")
    }
}

/// Every templated question with its base-model answer, in a fixed order.
pub fn instruction_corpus() -> Vec<Example> {
    let mut out = Vec::new();
    for (obj, color) in OBJECTS {
        out.push(Example::new(
            &format!("what color is the {obj} ?"),
            &format!("your {obj} is {color} , friend ."),
        ));
        for c in COLORS {
            let answer = if c == color {
                format!("yes , the {obj} is truly {c} .")
            } else {
                format!("no , the {obj} is {color} .")
            };
            out.push(Example::new(&format!("is the {obj} {c} ?"), &answer));
        }
    }
    for (animal, home, sound) in ANIMALS {
        out.push(Example::new(
            &format!("where does the {animal} live ?"),
            &format!("the {animal} often lives over there in the {home} ."),
        ));
        out.push(Example::new(
            &format!("what sound does the {animal} make ?"),
            &format!("listen , the {animal} says {sound} ."),
        ));
    }
    for a in 0..10 {
        for b in 0..10 {
            out.push(Example::new(
                &format!("what is {} plus {} ?", NUMBERS[a], NUMBERS[b]),
                &format!("{} plus {} is {} .", NUMBERS[a], NUMBERS[b], NUMBERS[a + b]),
            ));
        }
    }
    out
}

/// Word-by-word archaic substitution.
pub fn stylize(words: &[String]) -> Vec<String> {
    let map: BTreeMap<&str, &str> = ARCHAIC_LEXICON.iter().copied().collect();
    words
        .iter()
        .map(|w| map.get(w.as_str()).map_or_else(|| w.clone(), |a| a.to_string()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    FixedResponse,
    SyntheticStyle,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fixed" | "fixed_response" => Ok(TaskKind::FixedResponse),
            "style" | "synthetic_style" => Ok(TaskKind::SyntheticStyle),
            other => Err(Error::Invalid(format!("unknown task {other:?}"))),
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            TaskKind::FixedResponse => "fixed",
            TaskKind::SyntheticStyle => "style",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_kind: TaskKind,
    pub train_samples: usize,
    pub prompt_source: String,
    pub target_transform: String,
}

impl TaskSpec {
    pub fn new(task_kind: TaskKind, train_samples: usize) -> Self {
        let target_transform = match task_kind {
            TaskKind::FixedResponse => format!("constant response {FIXED_RESPONSE:?}"),
            TaskKind::SyntheticStyle => "archaic lexicon substitution of the base answer".into(),
        };
        Self {
            task_kind,
            train_samples,
            prompt_source: "synthetic-instruct-v1".into(),
            target_transform,
        }
    }

    /// The task's supervised target for a base example.
    pub fn target(&self, ex: &Example) -> Example {
        let response = match self.task_kind {
            TaskKind::FixedResponse => FIXED_RESPONSE
                .split_whitespace()
                .map(String::from)
                .collect(),
            TaskKind::SyntheticStyle => stylize(&ex.response),
        };
        Example {
            prompt: ex.prompt.clone(),
            response,
        }
    }
}

/// Disjoint prompt pools drawn from one seeded shuffle of the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub sft: Vec<Example>,
    pub trigger: Vec<Example>,
    pub eval: Vec<Example>,
}

pub fn split_corpus(
    corpus: &[Example],
    sft: usize,
    trigger: usize,
    eval: usize,
    seed: u64,
) -> Result<Splits> {
    if sft + trigger + eval > corpus.len() {
        return Err(Error::Invalid(format!(
            "requested {sft} + {trigger} + {eval} prompts but the corpus has {}",
            corpus.len()
        )));
    }
    let mut shuffled = corpus.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut it = shuffled.into_iter();
    Ok(Splits {
        sft: it.by_ref().take(sft).collect(),
        trigger: it.by_ref().take(trigger).collect(),
        eval: it.take(eval).collect(),
    })
}

/// Parses the corpus file format: one example per line, prompt and response
/// separated by a tab.
pub fn parse_corpus(text: &str) -> Result<Vec<Example>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let (p, r) = line
                .split_once('\t')
                .ok_or_else(|| Error::Invalid(format!("line {}: missing tab separator", i + 1)))?;
            Ok(Example::new(p, r))
        })
        .collect()
}

pub fn format_corpus(examples: &[Example]) -> String {
    examples
        .iter()
        .map(|e| format!("{}\t{}\n", e.prompt_text(), e.response_text()))
        .collect()
}

/// Word-level vocabulary. Ids 0..5 are the reserved special tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Self {
        let mut list: Vec<String> = [PAD, PROMPT, RESPONSE, EOS, UNK]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut rest: Vec<String> = words.into_iter().collect();
        rest.sort();
        rest.dedup();
        for w in rest {
            if !list.contains(&w) {
                list.push(w);
            }
        }
        let index = list.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words: list, index }
    }

    /// Vocabulary covering the instruction corpus, the fixed response and
    /// both sides of the archaic lexicon.
    pub fn standard() -> Self {
        let mut words = Vec::new();
        for ex in instruction_corpus() {
            words.extend(ex.prompt.iter().cloned());
            words.extend(ex.response.iter().cloned());
        }
        words.extend(FIXED_RESPONSE.split_whitespace().map(String::from));
        for (m, a) in ARCHAIC_LEXICON {
            words.push(m.to_string());
            words.push(a.to_string());
        }
        Self::from_words(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(4)
    }

    pub fn pad(&self) -> usize {
        0
    }
    pub fn prompt_start(&self) -> usize {
        1
    }
    pub fn response_start(&self) -> usize {
        2
    }
    pub fn eos(&self) -> usize {
        3
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map_or(UNK, |s| s.as_str())
    }

    /// `<q> prompt <a>`: the context a model continues from.
    pub fn encode_prompt(&self, prompt: &[String]) -> Vec<usize> {
        let mut out = vec![self.prompt_start()];
        out.extend(prompt.iter().map(|w| self.id(w)));
        out.push(self.response_start());
        out
    }

    /// Response token ids followed by `<eos>`.
    pub fn encode_response(&self, response: &[String]) -> Vec<usize> {
        let mut out: Vec<usize> = response.iter().map(|w| self.id(w)).collect();
        out.push(self.eos());
        out
    }

    /// Renders generated ids as text, stopping at `<eos>`.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != self.eos())
            .map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// A tokenised training sequence with its loss mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sequence {
    pub tokens: Vec<usize>,
    /// `targets[i]` is true when position `i` is trained to predict
    /// `tokens[i + 1]`.
    pub targets: Vec<bool>,
}

impl Sequence {
    /// `pad^offset <q> prompt <a> response <eos>`; with `response_only` the
    /// loss covers the response and `<eos>` only.
    pub fn build(vocab: &Vocab, ex: &Example, offset: usize, response_only: bool) -> Self {
        let prompt = vocab.encode_prompt(&ex.prompt);
        let response = vocab.encode_response(&ex.response);
        let mut tokens = vec![vocab.pad(); offset];
        tokens.extend(&prompt);
        tokens.extend(&response);
        let n = tokens.len();
        let first_response = offset + prompt.len();
        let targets = (0..n)
            .map(|i| {
                if i + 1 >= n {
                    false
                } else if response_only {
                    i + 1 >= first_response
                } else {
                    i + 1 > offset
                }
            })
            .collect();
        Self { tokens, targets }
    }

    pub fn target_count(&self) -> usize {
        self.targets.iter().filter(|&&t| t).count()
    }
}

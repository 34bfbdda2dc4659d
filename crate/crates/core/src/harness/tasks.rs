//! Desk-scale evaluation tasks with programmatic scorers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{encode_completion, BlockLayout, Example};
use crate::vocab::{TokenId, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Repeat the prompt digit string.
    Copy,
    /// Emit the prompt digits in ascending order.
    Sort,
    /// Reproduce a fixed corpus; the answer is looked up, not computed.
    Memorize,
}

/// How an evaluation set is produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Digits per prompt for copy/sort.
    #[serde(default = "default_length")]
    pub length: usize,
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
    /// Size of the generated training set.
    #[serde(default = "default_train_count")]
    pub train_count: usize,
    #[serde(default = "default_train_seed")]
    pub train_seed: u64,
}

fn default_length() -> usize {
    4
}

fn default_count() -> usize {
    32
}

fn default_train_count() -> usize {
    2000
}

fn default_train_seed() -> u64 {
    1
}

pub const DIGITS: &str = "0123456789";

impl TaskKind {
    /// Exact-match score: against the computed answer for digit tasks,
    /// against the reference completion for memorization.
    pub fn score(self, example: &Example, got: &str) -> f64 {
        match self.answer(&example.prompt) {
            Some(a) => exact_match(&a, got),
            None => exact_match(&example.completion, got),
        }
    }

    /// The canonical answer for a digit prompt; `None` for memorization or non-digit input.
    pub fn answer(self, prompt: &str) -> Option<String> {
        match self {
            TaskKind::Copy => Some(prompt.to_string()),
            TaskKind::Sort => {
                let mut c: Vec<char> = prompt.chars().collect();
                c.sort_unstable();
                Some(c.into_iter().collect())
            }
            TaskKind::Memorize => None,
        }
    }
}

/// Random digit strings of `length` paired with their answers.
pub fn digit_examples(kind: TaskKind, length: usize, count: usize, seed: u64) -> Result<Vec<Example>> {
    if kind == TaskKind::Memorize {
        return Err(Error::InvalidConfig("memorize examples come from a corpus".into()));
    }
    let digits: Vec<char> = DIGITS.chars().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let prompt: String = (0..length).map(|_| digits[rng.gen_range(0..digits.len())]).collect();
            let completion = kind.answer(&prompt).unwrap();
            Example { prompt, completion }
        })
        .collect())
}

impl TaskSpec {
    pub fn new(kind: TaskKind, length: usize, count: usize, seed: u64) -> Self {
        Self {
            kind,
            length,
            count,
            seed,
            train_count: default_train_count(),
            train_seed: default_train_seed(),
        }
    }

    /// The evaluation set.
    pub fn examples(&self) -> Result<Vec<Example>> {
        digit_examples(self.kind, self.length, self.count, self.seed)
    }

    pub fn training_examples(&self) -> Result<Vec<Example>> {
        digit_examples(self.kind, self.length, self.train_count, self.train_seed)
    }
}

/// 1.0 on an exact string match, else 0.0.
pub fn exact_match(expected: &str, got: &str) -> f64 {
    (expected == got) as u8 as f64
}

/// Partial credit: the fraction of the reference completion (including its
/// EOS, if the layout has room for one) reproduced position by position.
pub fn token_accuracy(reference: &[TokenId], got: &[TokenId], eos: TokenId) -> f64 {
    let n = reference.iter().position(|&t| t == eos).map_or(reference.len(), |p| p + 1);
    if n == 0 {
        return 1.0;
    }
    let hits = (0..n).filter(|&i| got.get(i) == Some(&reference[i])).count();
    hits as f64 / n as f64
}

/// Reward for a copy/sort completion, read off the prompt tokens themselves.
pub fn digit_reward(
    kind: TaskKind,
    vocab: &Vocabulary,
    layout: &BlockLayout,
    prompt: &[TokenId],
    completion: &[TokenId],
) -> std::result::Result<f64, String> {
    let answer = kind
        .answer(&vocab.render(prompt))
        .ok_or_else(|| "task has no computable answer".to_string())?;
    let reference = encode_completion(vocab, layout, &answer).map_err(|e| e.to_string())?;
    Ok(token_accuracy(&reference, completion, vocab.eos_id()))
}

//! Deterministic generators for four synthetic sequence tasks.
//!
//! Token layout shared by the in-context tasks:
//!
//! ```text
//! [pairs / noise region][delimiter][queries]
//! ```
//!
//! The content vocabulary `0..vocab_size` splits into keys (lower half) and
//! values (upper half); noise tokens, the delimiter, and the blank token
//! (the slot where an answer is expected) get ids above the content range,
//! in that order. Supervision happens only at query/blank positions; all
//! other targets carry [`IGNORE`].
//!
//! - selective-copying: content tokens scattered among noise; emit them in
//!   order at the blank positions after the delimiter.
//! - memorization: a key-to-value map fixed for the whole dataset, queried
//!   with no context; the map must live in the weights.
//! - noisy-recall: key/value pairs with noise interleaved; queried keys
//!   repeat earlier pairs.
//! - fuzzy-recall: keys and values are multi-token spans.

mod generate;
mod io;

pub use generate::{chance_level, generate, well_posed};
pub use io::{read_binary, write_binary, write_jsonl};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Target marker for unsupervised positions.
pub const IGNORE: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    SelectiveCopying,
    Memorization,
    NoisyRecall,
    FuzzyRecall,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::SelectiveCopying => "selective-copying",
            TaskKind::Memorization => "memorization",
            TaskKind::NoisyRecall => "noisy-recall",
            TaskKind::FuzzyRecall => "fuzzy-recall",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Eval,
}

/// Full description of a task dataset. Identical specs (including seed)
/// generate bitwise-identical data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Content vocabulary; keys are its lower half, values its upper half.
    pub vocab_size: usize,
    pub seq_len: usize,
    /// selective-copying only.
    pub num_tokens_to_copy: usize,
    /// Fraction of the region given to noise tokens.
    pub frac_noise: f64,
    pub noise_vocab_size: usize,
    /// Several queries per sequence instead of one.
    pub multi_query: bool,
    /// fuzzy-recall: tokens per key span and per value span.
    pub span_len: usize,
    pub num_train_examples: usize,
    pub num_eval_examples: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            kind: TaskKind::NoisyRecall,
            vocab_size: 8,
            seq_len: 32,
            num_tokens_to_copy: 6,
            frac_noise: 0.2,
            noise_vocab_size: 4,
            multi_query: true,
            span_len: 2,
            num_train_examples: 512,
            num_eval_examples: 128,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn key_vocab(&self) -> usize {
        self.vocab_size / 2
    }

    pub fn value_vocab(&self) -> usize {
        self.vocab_size - self.key_vocab()
    }

    /// First value id.
    pub fn value_base(&self) -> u32 {
        self.key_vocab() as u32
    }

    pub fn noise_base(&self) -> u32 {
        self.vocab_size as u32
    }

    pub fn delimiter(&self) -> u32 {
        (self.vocab_size + self.noise_vocab_size) as u32
    }

    pub fn blank(&self) -> u32 {
        self.delimiter() + 1
    }

    /// Number of distinct token ids a model must embed for this task.
    pub fn token_space(&self) -> usize {
        match self.kind {
            TaskKind::Memorization => self.vocab_size,
            TaskKind::NoisyRecall => self.delimiter() as usize + 1,
            TaskKind::SelectiveCopying | TaskKind::FuzzyRecall => self.blank() as usize + 1,
        }
    }

    pub fn num_queries(&self) -> usize {
        if self.multi_query {
            4.min(self.key_vocab().max(1))
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 4 {
            return Err(Error::InfeasibleTask("sequence length below 4".into()));
        }
        if !(0.0..=1.0).contains(&self.frac_noise) {
            return Err(Error::InfeasibleTask(format!("frac_noise {} outside [0,1]", self.frac_noise)));
        }
        if self.num_train_examples == 0 || self.num_eval_examples == 0 {
            return Err(Error::InfeasibleTask("need at least one train and one eval example".into()));
        }
        match self.kind {
            TaskKind::SelectiveCopying => {
                if self.vocab_size < 2 {
                    return Err(Error::InfeasibleTask("selective copying needs a vocab of at least 2".into()));
                }
                if self.noise_vocab_size == 0 {
                    return Err(Error::InfeasibleTask("selective copying needs a noise vocabulary".into()));
                }
                let region = self.seq_len as i64 - 1 - self.num_tokens_to_copy as i64;
                if region < self.num_tokens_to_copy as i64 {
                    return Err(Error::InfeasibleTask(format!(
                        "cannot place {} content tokens in a region of {region}",
                        self.num_tokens_to_copy
                    )));
                }
            }
            TaskKind::Memorization => {
                if self.vocab_size < 4 {
                    return Err(Error::InfeasibleTask("memorization needs a vocab of at least 4".into()));
                }
            }
            TaskKind::NoisyRecall => {
                if self.vocab_size < 4 {
                    return Err(Error::InfeasibleTask("recall needs a vocab of at least 4".into()));
                }
                if self.frac_noise > 0.0 && self.noise_vocab_size == 0 {
                    return Err(Error::InfeasibleTask("noise requested but the noise vocab is empty".into()));
                }
                let region = self.seq_len as i64 - 1 - self.num_queries() as i64;
                let noise = (self.frac_noise * region as f64).round() as i64;
                if (region - noise) / 2 < 1 {
                    return Err(Error::InfeasibleTask("region too small for a single key/value pair".into()));
                }
            }
            TaskKind::FuzzyRecall => {
                if self.vocab_size < 4 {
                    return Err(Error::InfeasibleTask("recall needs a vocab of at least 4".into()));
                }
                if self.span_len < 1 {
                    return Err(Error::InfeasibleTask("span length must be at least 1".into()));
                }
                let per_query = 2 * self.span_len as i64;
                let region = self.seq_len as i64 - 1 - self.num_queries() as i64 * per_query;
                let pairs = region / per_query;
                if pairs < 1 {
                    return Err(Error::InfeasibleTask("region too small for a single span pair".into()));
                }
                let leftover = region - pairs * per_query;
                if leftover > 0 && self.noise_vocab_size == 0 {
                    return Err(Error::InfeasibleTask(format!(
                        "{leftover} leftover slots need a noise vocabulary to fill"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One generated sequence with per-position targets.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskInstance {
    pub tokens: Vec<u32>,
    /// Same length as `tokens`; [`IGNORE`] where unsupervised.
    pub targets: Vec<u32>,
    pub split: Split,
}

/// The generated dataset: train and eval instances with disjoint contents.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskDataset {
    pub spec: TaskSpec,
    pub instances: Vec<TaskInstance>,
}

impl TaskDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &TaskInstance> {
        self.instances.iter().filter(move |i| i.split == split)
    }

    pub fn train(&self) -> Vec<&TaskInstance> {
        self.split(Split::Train).collect()
    }

    pub fn eval(&self) -> Vec<&TaskInstance> {
        self.split(Split::Eval).collect()
    }
}

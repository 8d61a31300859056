//! Synthetic synonym-structured classification corpus.
//!
//! The vocabulary partitions into synonym sets; the reference embedding table
//! keeps members of one set within `epsilon` of each other and distinct sets
//! at least `3 * epsilon` apart, so word substitution inside a set realizes
//! the bounded embedding-space threat model exactly. Labels are a function of
//! which *sets* occur among the planted indicator tokens, never of which
//! member was chosen, so any in-set substitution provably preserves the
//! oracle label.

mod gen;
mod io;

pub use gen::{build_reference_embeddings, generate_corpus};
pub use io::{load_corpus, save_corpus};

use crate::container;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use std::path::Path;

/// Reserved token ids.
pub const PAD: usize = 0;
pub const CLS: usize = 1;
/// Number of reserved ids before the first real word.
pub const SPECIALS: usize = 2;

/// Id-indexed word list with a synonym-set partition over the non-special
/// vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    set_of: Vec<Option<usize>>,
    sets: Vec<Vec<usize>>,
}

impl Vocabulary {
    /// Synthetic vocabulary of `num_sets` synonym sets with `set_size`
    /// members each; members of set `s` are named `w{s}_{k}`.
    pub fn synthetic(num_sets: usize, set_size: usize) -> Result<Self> {
        if set_size < 2 {
            return Err(Error::CorpusConfig(format!(
                "synonym sets need at least 2 members, got {set_size}"
            )));
        }
        if num_sets == 0 {
            return Err(Error::CorpusConfig("need at least one synonym set".into()));
        }
        let mut words = vec!["<pad>".to_string(), "<cls>".to_string()];
        let mut set_of = vec![None, None];
        let mut sets = vec![Vec::new(); num_sets];
        for s in 0..num_sets {
            for k in 0..set_size {
                sets[s].push(words.len());
                words.push(format!("w{s}_{k}"));
                set_of.push(Some(s));
            }
        }
        Ok(Vocabulary {
            words,
            set_of,
            sets,
        })
    }

    /// Rebuild from parallel word/set-id lists (the sidecar file contents).
    pub fn from_entries(entries: Vec<(String, Option<usize>)>) -> Result<Self> {
        let num_sets = entries
            .iter()
            .filter_map(|(_, s)| *s)
            .max()
            .map_or(0, |m| m + 1);
        let mut sets = vec![Vec::new(); num_sets];
        let mut words = Vec::with_capacity(entries.len());
        let mut set_of = Vec::with_capacity(entries.len());
        for (id, (w, s)) in entries.into_iter().enumerate() {
            if let Some(s) = s {
                sets[s].push(id);
            }
            words.push(w);
            set_of.push(s);
        }
        for (s, members) in sets.iter().enumerate() {
            if members.len() < 2 {
                return Err(Error::CorpusConfig(format!(
                    "synonym set {s} has {} members; sets must have >= 2",
                    members.len()
                )));
            }
        }
        Ok(Vocabulary {
            words,
            set_of,
            sets,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn num_sets(&self) -> usize {
        self.sets.len()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn id_of(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    /// Synonym-set id of a token, `None` for specials.
    pub fn set_of(&self, id: usize) -> Option<usize> {
        self.set_of.get(id).copied().flatten()
    }

    pub fn members(&self, set: usize) -> &[usize] {
        &self.sets[set]
    }

    /// In-set alternatives to `id` (its synonyms, excluding itself).
    pub fn synonyms(&self, id: usize) -> Vec<usize> {
        match self.set_of(id) {
            Some(s) => self.sets[s].iter().copied().filter(|&m| m != id).collect(),
            None => Vec::new(),
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, Option<usize>)> {
        self.words
            .iter()
            .map(|w| w.as_str())
            .zip(self.set_of.iter().copied())
    }
}

/// Per-word embedding vectors with the set geometry that makes the bounded
/// threat model exact: intra-set distance <= epsilon, inter-set >= 3 epsilon.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceEmbeddingTable {
    pub dim: usize,
    pub epsilon: f64,
    vectors: Vec<f64>,
}

impl ReferenceEmbeddingTable {
    pub(crate) fn new(dim: usize, epsilon: f64, vectors: Vec<f64>) -> Self {
        ReferenceEmbeddingTable {
            dim,
            epsilon,
            vectors,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn vector(&self, id: usize) -> &[f64] {
        &self.vectors[id * self.dim..(id + 1) * self.dim]
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        self.vector(a)
            .iter()
            .zip(self.vector(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    /// The full table as a `V x d` tensor (the model's embedding init).
    pub fn as_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![self.vocab_size(), self.dim],
            data: self.vectors.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let records = vec![
            ("embeddings".to_string(), self.as_tensor()),
            ("meta.epsilon".to_string(), Tensor::scalar(self.epsilon)),
        ];
        container::write_container(path, &records)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let records = container::read_container(path)?;
        let find = |name: &str| {
            records
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| {
                    Error::Checkpoint(format!(
                        "{}: missing record {name}; expected [embeddings, meta.epsilon]",
                        path.display()
                    ))
                })
        };
        let emb = find("embeddings")?;
        let eps = find("meta.epsilon")?;
        Ok(ReferenceEmbeddingTable {
            dim: emb.shape[1],
            epsilon: eps.data[0],
            vectors: emb.data.clone(),
        })
    }
}

/// One classification example: CLS-prepended, PAD-completed token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub token_ids: Vec<usize>,
    pub label: usize,
    /// True token count (excludes the CLS prefix and PAD suffix).
    pub n: usize,
}

impl Example {
    /// Sequence positions holding true tokens (CLS sits at 0).
    pub fn word_positions(&self) -> std::ops::Range<usize> {
        1..self.n + 1
    }

    /// Positions whose token belongs to an indicator set (`set < indicator_sets`).
    pub fn indicator_positions(&self, vocab: &Vocabulary, indicator_sets: usize) -> Vec<usize> {
        self.word_positions()
            .filter(|&p| matches!(vocab.set_of(self.token_ids[p]), Some(s) if s < indicator_sets))
            .collect()
    }

    /// The true tokens as words.
    pub fn words<'v>(&self, vocab: &'v Vocabulary) -> Vec<&'v str> {
        self.word_positions()
            .map(|p| vocab.word(self.token_ids[p]))
            .collect()
    }
}

/// Generation parameters. The labeling rule maps the lowest-indexed indicator
/// set present to `set % num_classes`; distractor tokens come from
/// non-indicator sets, so only planted indicator tokens carry label signal.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CorpusConfig {
    pub num_sets: usize,
    pub set_size: usize,
    pub num_classes: usize,
    pub indicator_sets: usize,
    pub indicators_per_example: usize,
    pub train_n: usize,
    pub dev_n: usize,
    pub test_n: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub embed_dim: usize,
    pub epsilon: f64,
    /// Member draw weights fall off geometrically (`skew^k` for member `k`);
    /// 1.0 is uniform. Rarely-drawn synonyms are what substitution attacks
    /// exploit.
    pub member_skew: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            num_sets: 50,
            set_size: 4,
            num_classes: 3,
            indicator_sets: 12,
            indicators_per_example: 2,
            train_n: 5000,
            dev_n: 1000,
            test_n: 1000,
            min_tokens: 6,
            max_tokens: 10,
            embed_dim: 32,
            epsilon: 0.25,
            member_skew: 0.35,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::CorpusConfig(msg));
        if self.num_classes > self.indicator_sets {
            return fail(format!(
                "num_classes {} exceeds indicator_sets {}",
                self.num_classes, self.indicator_sets
            ));
        }
        if self.indicator_sets >= self.num_sets {
            return fail(format!(
                "indicator_sets {} must leave at least one distractor set (num_sets {})",
                self.indicator_sets, self.num_sets
            ));
        }
        if self.set_size < 2 {
            return fail(format!("set_size {} must be >= 2", self.set_size));
        }
        if self.num_classes < 2 {
            return fail(format!("num_classes {} must be >= 2", self.num_classes));
        }
        if self.indicators_per_example == 0 || self.indicators_per_example > self.min_tokens {
            return fail(format!(
                "indicators_per_example {} must be in 1..={}",
                self.indicators_per_example, self.min_tokens
            ));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return fail(format!(
                "token count range {}..={} is empty",
                self.min_tokens, self.max_tokens
            ));
        }
        if self.embed_dim < 2 {
            return fail(format!("embed_dim {} must be >= 2", self.embed_dim));
        }
        if !(self.epsilon > 0.0) {
            return fail(format!("epsilon {} must be > 0", self.epsilon));
        }
        if !(self.member_skew > 0.0 && self.member_skew <= 1.0) {
            return fail(format!("member_skew {} must be in (0, 1]", self.member_skew));
        }
        Ok(())
    }

    /// Total vocabulary size including specials.
    pub fn vocab_size(&self) -> usize {
        SPECIALS + self.num_sets * self.set_size
    }
}

/// The labeling rule: class of the lowest-indexed indicator set present
/// among the true tokens, or `None` when no indicator set occurs.
pub fn oracle_label(
    vocab: &Vocabulary,
    indicator_sets: usize,
    num_classes: usize,
    token_ids: &[usize],
    n: usize,
) -> Option<usize> {
    token_ids[1..n + 1]
        .iter()
        .filter_map(|&id| vocab.set_of(id))
        .filter(|&s| s < indicator_sets)
        .min()
        .map(|s| s % num_classes)
}

/// Which split a set of examples belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// Generated corpus: vocabulary plus three disjoint splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    /// Common padded sequence length (CLS included).
    pub fn pad_len(&self) -> usize {
        self.train
            .iter()
            .chain(&self.dev)
            .chain(&self.test)
            .map(|e| e.token_ids.len())
            .max()
            .unwrap_or(1)
    }
}

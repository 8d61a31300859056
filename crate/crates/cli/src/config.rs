//! Flat `key = value` run configuration.
//!
//! One text file configures every subcommand; `#` starts a comment, later
//! assignments win, unknown keys are rejected. Every key has a documented
//! default (`infobottle <cmd> --help` prints the full table).

use infobottle::attack::{AdvConfig, WordSubConfig};
use infobottle::corpus::CorpusConfig;
use infobottle::error::{Error, Result};
use infobottle::evaluator::MIAnalysisConfig;
use infobottle::model::{ModelConfig, Pooling};
use infobottle::regularizers::SampleMode;
use infobottle::trainer::{OptimizerKind, TrainConfig, TrainMode};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub model_dim: usize,
    pub model_layers: usize,
    pub model_heads: usize,
    pub model_max_len: usize,
    pub model_pool: Pooling,
    pub model_tagging_head: bool,
    pub train: TrainConfig,
    pub attack: WordSubConfig,
    pub mi: MIAnalysisConfig,
    /// Verbatim text the config was parsed from (for checkpoint snapshots).
    pub source_text: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: CorpusConfig::default(),
            model_dim: 32,
            model_layers: 2,
            model_heads: 4,
            model_max_len: 16,
            model_pool: Pooling::Cls,
            model_tagging_head: false,
            train: TrainConfig {
                lr: 0.15,
                epochs: 5,
                batch_size: 32,
                ..TrainConfig::default()
            },
            attack: WordSubConfig::default(),
            mi: MIAnalysisConfig::default(),
            source_text: String::new(),
        }
    }
}

macro_rules! keys {
    ($($key:literal => $field:expr, $help:literal;)+) => {
        /// (key, current-default, help) rows for `--help` and the README.
        pub fn key_docs() -> Vec<(&'static str, String, &'static str)> {
            let d = RunConfig::default();
            vec![$(($key, $field(&d), $help),)+]
        }
    };
}

fn fmt_pool(p: Pooling) -> String {
    match p {
        Pooling::Cls => "cls".into(),
        Pooling::Mean => "mean".into(),
    }
}

fn fmt_mode(m: TrainMode) -> String {
    match m {
        TrainMode::Standard => "standard".into(),
        TrainMode::Adversarial => "adversarial".into(),
    }
}

fn fmt_opt(o: OptimizerKind) -> String {
    match o {
        OptimizerKind::Sgd => "sgd".into(),
        OptimizerKind::Adam => "adam".into(),
    }
}

fn fmt_sample(s: SampleMode) -> String {
    match s {
        SampleMode::Identity => "identity".into(),
        SampleMode::Gaussian => "gaussian".into(),
        SampleMode::Adversarial => "adversarial".into(),
    }
}

keys! {
    "corpus.num_sets" => |d: &RunConfig| d.corpus.num_sets.to_string(), "synonym sets in the vocabulary";
    "corpus.set_size" => |d: &RunConfig| d.corpus.set_size.to_string(), "members per synonym set (>= 2)";
    "corpus.num_classes" => |d: &RunConfig| d.corpus.num_classes.to_string(), "label classes";
    "corpus.indicator_sets" => |d: &RunConfig| d.corpus.indicator_sets.to_string(), "label-carrying synonym sets";
    "corpus.indicators_per_example" => |d: &RunConfig| d.corpus.indicators_per_example.to_string(), "planted indicator tokens per example";
    "corpus.train" => |d: &RunConfig| d.corpus.train_n.to_string(), "training examples";
    "corpus.dev" => |d: &RunConfig| d.corpus.dev_n.to_string(), "development examples";
    "corpus.test" => |d: &RunConfig| d.corpus.test_n.to_string(), "test examples";
    "corpus.min_tokens" => |d: &RunConfig| d.corpus.min_tokens.to_string(), "minimum true tokens per example";
    "corpus.max_tokens" => |d: &RunConfig| d.corpus.max_tokens.to_string(), "maximum true tokens per example";
    "corpus.embed_dim" => |d: &RunConfig| d.corpus.embed_dim.to_string(), "reference embedding width";
    "corpus.epsilon" => |d: &RunConfig| d.corpus.epsilon.to_string(), "intra-set embedding radius (threat bound)";
    "corpus.member_skew" => |d: &RunConfig| d.corpus.member_skew.to_string(), "geometric member-draw falloff (1 = uniform)";
    "model.dim" => |d: &RunConfig| d.model_dim.to_string(), "feature width";
    "model.layers" => |d: &RunConfig| d.model_layers.to_string(), "encoder depth";
    "model.heads" => |d: &RunConfig| d.model_heads.to_string(), "attention heads (divides model.dim)";
    "model.max_len" => |d: &RunConfig| d.model_max_len.to_string(), "maximum sequence length (CLS included)";
    "model.pool" => |d: &RunConfig| fmt_pool(d.model_pool), "global pooling: cls or mean";
    "model.tagging_head" => |d: &RunConfig| d.model_tagging_head.to_string(), "include the span-tagging head";
    "train.mode" => |d: &RunConfig| fmt_mode(d.train.mode), "standard or adversarial";
    "train.optimizer" => |d: &RunConfig| fmt_opt(d.train.optimizer), "sgd or adam";
    "train.lr" => |d: &RunConfig| d.train.lr.to_string(), "learning rate";
    "train.epochs" => |d: &RunConfig| d.train.epochs.to_string(), "training epochs";
    "train.batch" => |d: &RunConfig| d.train.batch_size.to_string(), "batch size";
    "train.freeze_embeddings" => |d: &RunConfig| d.train.freeze_embeddings.to_string(), "keep the embedding table fixed at the reference geometry";
    "train.clip_norm" => |d: &RunConfig| d.train.clip_norm.to_string(), "global gradient-norm clip";
    "train.critic_hidden" => |d: &RunConfig| d.train.critic_hidden.to_string(), "critic hidden width";
    "train.critic_lr" => |d: &RunConfig| d.train.critic_lr.to_string(), "critic step size (same loss, own rate)";
    "train.anchors_cap" => |d: &RunConfig| d.train.anchors_cap.to_string(), "anchored pairs per example per step";
    "train.negatives_cap" => |d: &RunConfig| d.train.negatives_cap.to_string(), "InfoNCE negatives per step";
    "train.tagging_weight" => |d: &RunConfig| d.train.tagging_weight.to_string(), "span-tagging loss weight (0 disables)";
    "ib.beta" => |d: &RunConfig| d.train.ib.beta.to_string(), "bottleneck penalty weight";
    "ib.mode" => |d: &RunConfig| fmt_sample(d.train.ib.sample_mode), "conditional sample: identity, gaussian, adversarial";
    "ib.sigma" => |d: &RunConfig| d.train.ib.sigma.to_string(), "gaussian sample width";
    "ib.pool_cap" => |d: &RunConfig| d.train.ib.pool_cap.to_string(), "feature-pool subsample cap";
    "anchor.alpha" => |d: &RunConfig| d.train.anchor.alpha.to_string(), "anchored-alignment weight";
    "anchor.c_l" => |d: &RunConfig| d.train.anchor.c_l.to_string(), "lower rank-fraction threshold";
    "anchor.c_h" => |d: &RunConfig| d.train.anchor.c_h.to_string(), "upper rank-fraction threshold";
    "adv.k" => |d: &RunConfig| d.train.adv.k.to_string(), "adversarial ascent steps";
    "adv.eta" => |d: &RunConfig| d.train.adv.eta.to_string(), "adversarial step size";
    "adv.epsilon" => |d: &RunConfig| d.train.adv.epsilon.to_string(), "perturbation Frobenius budget";
    "adv.init_norm" => |d: &RunConfig| d.train.adv.init_norm.to_string(), "initial random perturbation norm";
    "attack.max_fraction" => |d: &RunConfig| d.attack.max_fraction.to_string(), "fraction of tokens the attack may swap";
    "attack.query_budget" => |d: &RunConfig| d.attack.query_budget.to_string(), "model queries per attacked example";
    "mi.critic_hidden" => |d: &RunConfig| d.mi.critic.hidden.to_string(), "analysis critic hidden width";
    "mi.critic_steps" => |d: &RunConfig| d.mi.critic.steps.to_string(), "analysis critic fitting steps";
    "mi.critic_batch" => |d: &RunConfig| d.mi.critic.batch.to_string(), "analysis critic fitting batch";
    "mi.critic_lr" => |d: &RunConfig| d.mi.critic.lr.to_string(), "analysis critic learning rate";
    "mi.eval_batch" => |d: &RunConfig| d.mi.eval_batch.to_string(), "analysis in-batch denominator size";
}

impl RunConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("key {key}: {what}: {value:?}"));
        macro_rules! parse {
            ($ty:ty) => {
                value
                    .parse::<$ty>()
                    .map_err(|_| bad(concat!("expected ", stringify!($ty))))?
            };
        }
        match key {
            "corpus.num_sets" => self.corpus.num_sets = parse!(usize),
            "corpus.set_size" => self.corpus.set_size = parse!(usize),
            "corpus.num_classes" => self.corpus.num_classes = parse!(usize),
            "corpus.indicator_sets" => self.corpus.indicator_sets = parse!(usize),
            "corpus.indicators_per_example" => self.corpus.indicators_per_example = parse!(usize),
            "corpus.train" => self.corpus.train_n = parse!(usize),
            "corpus.dev" => self.corpus.dev_n = parse!(usize),
            "corpus.test" => self.corpus.test_n = parse!(usize),
            "corpus.min_tokens" => self.corpus.min_tokens = parse!(usize),
            "corpus.max_tokens" => self.corpus.max_tokens = parse!(usize),
            "corpus.embed_dim" => self.corpus.embed_dim = parse!(usize),
            "corpus.epsilon" => self.corpus.epsilon = parse!(f64),
            "corpus.member_skew" => self.corpus.member_skew = parse!(f64),
            "model.dim" => self.model_dim = parse!(usize),
            "model.layers" => self.model_layers = parse!(usize),
            "model.heads" => self.model_heads = parse!(usize),
            "model.max_len" => self.model_max_len = parse!(usize),
            "model.pool" => {
                self.model_pool = match value {
                    "cls" => Pooling::Cls,
                    "mean" => Pooling::Mean,
                    _ => return Err(bad("expected cls or mean")),
                }
            }
            "model.tagging_head" => self.model_tagging_head = parse!(bool),
            "train.mode" => {
                self.train.mode = match value {
                    "standard" => TrainMode::Standard,
                    "adversarial" => TrainMode::Adversarial,
                    _ => return Err(bad("expected standard or adversarial")),
                }
            }
            "train.optimizer" => {
                self.train.optimizer = match value {
                    "sgd" => OptimizerKind::Sgd,
                    "adam" => OptimizerKind::Adam,
                    _ => return Err(bad("expected sgd or adam")),
                }
            }
            "train.lr" => self.train.lr = parse!(f64),
            "train.epochs" => self.train.epochs = parse!(usize),
            "train.batch" => self.train.batch_size = parse!(usize),
            "train.freeze_embeddings" => self.train.freeze_embeddings = parse!(bool),
            "train.clip_norm" => self.train.clip_norm = parse!(f64),
            "train.critic_hidden" => self.train.critic_hidden = parse!(usize),
            "train.critic_lr" => self.train.critic_lr = parse!(f64),
            "train.anchors_cap" => self.train.anchors_cap = parse!(usize),
            "train.negatives_cap" => self.train.negatives_cap = parse!(usize),
            "train.tagging_weight" => self.train.tagging_weight = parse!(f64),
            "ib.beta" => self.train.ib.beta = parse!(f64),
            "ib.mode" => {
                self.train.ib.sample_mode = match value {
                    "identity" => SampleMode::Identity,
                    "gaussian" => SampleMode::Gaussian,
                    "adversarial" => SampleMode::Adversarial,
                    _ => return Err(bad("expected identity, gaussian, or adversarial")),
                }
            }
            "ib.sigma" => self.train.ib.sigma = parse!(f64),
            "ib.pool_cap" => self.train.ib.pool_cap = parse!(usize),
            "anchor.alpha" => self.train.anchor.alpha = parse!(f64),
            "anchor.c_l" => self.train.anchor.c_l = parse!(f64),
            "anchor.c_h" => self.train.anchor.c_h = parse!(f64),
            "adv.k" => self.train.adv.k = parse!(usize),
            "adv.eta" => self.train.adv.eta = parse!(f64),
            "adv.epsilon" => self.train.adv.epsilon = parse!(f64),
            "adv.init_norm" => self.train.adv.init_norm = parse!(f64),
            "attack.max_fraction" => self.attack.max_fraction = parse!(f64),
            "attack.query_budget" => self.attack.query_budget = parse!(usize),
            "mi.critic_hidden" => self.mi.critic.hidden = parse!(usize),
            "mi.critic_steps" => self.mi.critic.steps = parse!(usize),
            "mi.critic_batch" => self.mi.critic.batch = parse!(usize),
            "mi.critic_lr" => self.mi.critic.lr = parse!(f64),
            "mi.eval_batch" => self.mi.eval_batch = parse!(usize),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    i + 1
                )));
            };
            cfg.apply(key.trim(), value.trim())?;
        }
        cfg.source_text = text.to_string();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_text(&text)
    }

    /// Anchored thresholds feed both training and analysis.
    pub fn finalize(&mut self) {
        self.mi.c_l = self.train.anchor.c_l;
        self.mi.c_h = self.train.anchor.c_h;
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.model_dim,
            layers: self.model_layers,
            heads: self.model_heads,
            vocab_size: self.corpus.vocab_size(),
            num_classes: self.corpus.num_classes,
            max_len: self.model_max_len,
            pool: self.model_pool,
            tagging_head: self.model_tagging_head,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            indicator_sets: self.corpus.indicator_sets,
            ..self.train.clone()
        }
    }

    pub fn adv_config(&self) -> &AdvConfig {
        &self.train.adv
    }
}

/// The full key table as help text.
pub fn render_key_help() -> String {
    let mut out = String::from("Configuration keys (flat `key = value` file, `#` comments):\n");
    for (key, default, help) in key_docs() {
        let _ = writeln!(out, "  {key:32} default {default:10} {help}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_documented_key_applies() {
        let mut cfg = RunConfig::default();
        for (key, default, _) in key_docs() {
            cfg.apply(key, &default)
                .unwrap_or_else(|e| panic!("{key}: {e}"));
        }
    }

    #[test]
    fn defaults_round_trip_through_a_rendered_file() {
        let mut text = String::new();
        for (key, default, _) in key_docs() {
            text.push_str(&format!("{key} = {default}\n"));
        }
        let parsed = RunConfig::parse_text(&text).unwrap();
        let d = RunConfig::default();
        assert_eq!(parsed.corpus, d.corpus);
        assert_eq!(parsed.train, d.train);
        assert_eq!(parsed.attack, d.attack);
        assert_eq!(parsed.mi, d.mi);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = RunConfig::parse_text("corpus.sets = 5\n").unwrap_err();
        assert!(err.to_string().contains("corpus.sets"), "{err}");
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = RunConfig::parse_text(
            "# hello\n\n  train.lr = 0.5  # inline\nib.beta = 0.01\n",
        )
        .unwrap();
        assert_eq!(cfg.train.lr, 0.5);
        assert_eq!(cfg.train.ib.beta, 0.01);
    }

    #[test]
    fn malformed_lines_name_the_line() {
        let err = RunConfig::parse_text("train.lr 0.5\n").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }
}

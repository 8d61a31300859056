//! Benign/robust metrics and the anchored-vs-global MI analysis.

use crate::attack::{word_substitution_attack, AttackOutcome, AttackTrace, WordSubConfig};
use crate::corpus::{Example, ReferenceEmbeddingTable, Vocabulary};
use crate::diffcore::Tape;
use crate::error::{Error, Result};
use crate::mi::{fit_critic, infonce_in_batch_estimate, CriticFitConfig, MIEstimate};
use crate::model::Model;
use crate::regularizers::anchored_select;
use crate::rng;
use crate::trainer::Checkpoint;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeSet;

/// Fraction of examples the model labels correctly.
pub fn benign_accuracy(model: &Model, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let hits: usize = examples
        .par_iter()
        .map(|e| Ok(usize::from(model.predict(e)?.class == e.label)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(hits as f64 / examples.len() as f64)
}

/// Attack every example of `examples` against the victim model; outcomes are
/// order-preserving, so runs are deterministic regardless of worker count.
pub fn build_adversarial_dataset(
    victim: &Model,
    examples: &[Example],
    config: &WordSubConfig,
    vocab: &Vocabulary,
    table: &ReferenceEmbeddingTable,
) -> Result<Vec<AttackOutcome>> {
    examples
        .par_iter()
        .map(|e| word_substitution_attack(victim, e, config, vocab, table))
        .collect()
}

/// `(1/|D_adv|) * sum 1[argmax q(f(x')) == y]` over the adversarial dataset.
pub fn robust_accuracy(model: &Model, adversarial: &[Example]) -> Result<f64> {
    if adversarial.is_empty() {
        return Err(Error::Eval("robust_accuracy over an empty dataset".into()));
    }
    let hits: usize = adversarial
        .par_iter()
        .map(|e| Ok(usize::from(model.predict(e)?.class == e.label)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(hits as f64 / adversarial.len() as f64)
}

/// Set-overlap F1 between predicted and true index sets; two empty sets
/// count as a perfect match.
pub fn span_f1(predicted: &BTreeSet<usize>, truth: &BTreeSet<usize>) -> f64 {
    if predicted.is_empty() && truth.is_empty() {
        return 1.0;
    }
    let overlap = predicted.intersection(truth).count() as f64;
    if overlap == 0.0 {
        return 0.0;
    }
    let precision = overlap / predicted.len() as f64;
    let recall = overlap / truth.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Predicted indicator-span positions from the tagging head.
pub fn predict_span(model: &Model, example: &Example) -> Result<BTreeSet<usize>> {
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, false, true);
    let run = model.run_example(&mut tape, &binding, example, None)?;
    let logits = model.tag_logits(&mut tape, &binding, run.hidden)?;
    let values = tape.value(logits);
    Ok(example
        .word_positions()
        .filter(|&p| values[p * 2 + 1] > values[p * 2])
        .collect())
}

/// Mean span-overlap F1 of the tagging head over an (adversarial) dataset;
/// truth spans are the indicator-set positions, which synonym substitution
/// provably preserves.
pub fn robust_f1(
    model: &Model,
    adversarial: &[Example],
    vocab: &Vocabulary,
    indicator_sets: usize,
) -> Result<f64> {
    if adversarial.is_empty() {
        return Err(Error::Eval("robust_f1 over an empty dataset".into()));
    }
    let scores: Vec<f64> = adversarial
        .par_iter()
        .map(|e| {
            let truth: BTreeSet<usize> =
                e.indicator_positions(vocab, indicator_sets).into_iter().collect();
            let predicted = predict_span(model, e)?;
            Ok(span_f1(&predicted, &truth))
        })
        .collect::<Result<_>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Per-example evaluation record carried into the report.
#[derive(Debug, Clone, Serialize)]
pub struct ExampleTrace {
    pub index: usize,
    pub label: usize,
    pub victim_trace: AttackTrace,
    pub model_correct_on_adversarial: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub benign_accuracy: f64,
    /// Present when an attack ran.
    pub robust_accuracy: Option<f64>,
    /// Fraction of attempted attacks (victim initially correct) that flipped
    /// the victim.
    pub attack_success_rate: Option<f64>,
    /// Span-overlap F1 on the adversarial dataset (tagging-head models only).
    pub robust_f1: Option<f64>,
    pub traces: Vec<ExampleTrace>,
    pub config_echo: String,
    pub seed: u64,
}

/// Benign evaluation plus, when `attack` is set, a word-substitution robust
/// evaluation. The adversarial dataset is built against `victim` (possibly a
/// different checkpoint than `model`, mirroring the transfer setup).
pub fn evaluate(
    model: &Model,
    victim: &Model,
    examples: &[Example],
    attack: Option<&WordSubConfig>,
    vocab: &Vocabulary,
    table: &ReferenceEmbeddingTable,
    config_echo: String,
    seed: u64,
) -> Result<EvalReport> {
    let benign = benign_accuracy(model, examples)?;
    let mut report = EvalReport {
        benign_accuracy: benign,
        robust_accuracy: None,
        attack_success_rate: None,
        robust_f1: None,
        traces: Vec::new(),
        config_echo,
        seed,
    };
    if let Some(wsc) = attack {
        let outcomes = build_adversarial_dataset(victim, examples, wsc, vocab, table)?;
        let adversarial: Vec<Example> = outcomes.iter().map(|o| o.example.clone()).collect();
        report.robust_accuracy = Some(robust_accuracy(model, &adversarial)?);
        let attempted = outcomes.iter().filter(|o| !o.trace.skipped).count();
        let flipped = outcomes.iter().filter(|o| o.trace.success).count();
        report.attack_success_rate = if attempted > 0 {
            Some(flipped as f64 / attempted as f64)
        } else {
            Some(0.0)
        };
        report.traces = outcomes
            .iter()
            .enumerate()
            .map(|(index, o)| {
                Ok(ExampleTrace {
                    index,
                    label: examples[index].label,
                    victim_trace: o.trace.clone(),
                    model_correct_on_adversarial: model.predict(&o.example)?.class
                        == examples[index].label,
                })
            })
            .collect::<Result<_>>()?;
    }
    Ok(report)
}

// ---- MI analysis -------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureGroup {
    Anchored,
    NonAnchored,
}

#[derive(Debug, Clone, PartialEq, serde::Deserialize, Serialize)]
pub struct MIAnalysisConfig {
    pub c_l: f64,
    pub c_h: f64,
    pub critic: CriticFitConfig,
    /// In-batch evaluation denominator size.
    pub eval_batch: usize,
}

impl Default for MIAnalysisConfig {
    fn default() -> Self {
        MIAnalysisConfig {
            c_l: 0.5,
            c_h: 0.9,
            critic: CriticFitConfig::default(),
            eval_batch: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MICell {
    /// `base` (checkpoint A) or `retrained` (checkpoint B).
    pub checkpoint: String,
    pub group: FeatureGroup,
    /// `benign` or `adversarial`.
    pub dataset: String,
    pub estimate: MIEstimate,
    pub mi_nats: f64,
    pub stderr: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct MIAnalysisReport {
    pub seed: u64,
    pub cells: Vec<MICell>,
    /// `I'_R(b) - I'_R(a)`: anchored-feature MI change on adversarial data.
    pub delta_adv_anchored: f64,
    /// `I'_N(b) - I'_N(a)`: non-anchored MI change on adversarial data.
    pub delta_adv_non_anchored: f64,
    pub delta_benign_anchored: f64,
    pub delta_benign_non_anchored: f64,
}

impl MIAnalysisReport {
    fn cell(&self, checkpoint: &str, group: FeatureGroup, dataset: &str) -> Option<&MICell> {
        self.cells.iter().find(|c| {
            c.checkpoint == checkpoint && c.group == group && c.dataset == dataset
        })
    }

    /// Figure-style grouped bars: `group,dataset,mi_nats` CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,dataset,mi_nats\n");
        for c in &self.cells {
            let group = match c.group {
                FeatureGroup::Anchored => format!("anchored_{}", c.checkpoint),
                FeatureGroup::NonAnchored => format!("nonanchored_{}", c.checkpoint),
            };
            out.push_str(&format!("{group},{},{:.6}\n", c.dataset, c.mi_nats));
        }
        out
    }
}

/// Feature pairs `(t_i, z)` for one group over a dataset, under one model.
fn group_pairs(
    model: &Model,
    examples: &[Example],
    group: FeatureGroup,
    c_l: f64,
    c_h: f64,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let d = model.config.dim;
    let per_example: Vec<(Vec<(Vec<f64>, Vec<f64>)>, bool)> = examples
        .par_iter()
        .map(|e| {
            let vg = crate::attack::virtual_gradient(model, e)?;
            let set = anchored_select(&vg.norms, c_l, c_h);
            let indices = match group {
                FeatureGroup::Anchored => &set.selected,
                FeatureGroup::NonAnchored => &set.complement,
            };
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape, false, true);
            let run = model.run_example(&mut tape, &binding, e, None)?;
            let feats = tape.value(run.features).to_vec();
            let z = tape.value(run.global).to_vec();
            let pairs: Vec<(Vec<f64>, Vec<f64>)> = indices
                .iter()
                .map(|&w| {
                    let p = w + 1;
                    (feats[p * d..(p + 1) * d].to_vec(), z.clone())
                })
                .collect();
            Ok((pairs, set.selected.is_empty()))
        })
        .collect::<Result<_>>()?;
    let empty_anchored = per_example.iter().filter(|(_, empty)| *empty).count();
    if group == FeatureGroup::Anchored && 2 * empty_anchored > examples.len() {
        return Err(Error::Eval(format!(
            "anchored set empty on {empty_anchored}/{} examples; widen the [c_l, c_h] band",
            examples.len()
        )));
    }
    Ok(per_example.into_iter().flat_map(|(p, _)| p).collect())
}

fn estimate_cell(
    model: &Model,
    examples: &[Example],
    group: FeatureGroup,
    dataset: &str,
    checkpoint: &str,
    cfg: &MIAnalysisConfig,
    seed: u64,
) -> Result<MICell> {
    let pairs = group_pairs(model, examples, group, cfg.c_l, cfg.c_h)?;
    if pairs.len() < cfg.eval_batch.max(2) {
        return Err(Error::Eval(format!(
            "only {} feature pairs for {group:?}/{dataset}; need at least {}",
            pairs.len(),
            cfg.eval_batch.max(2)
        )));
    }
    // Critic seed depends on (analysis seed, group, dataset) but not the
    // checkpoint, so identical checkpoints yield identical cells.
    let cell_seed = rng::derive_seed(seed, &format!("mi-cell-{group:?}-{dataset}"));
    let critic = fit_critic(&pairs, &cfg.critic, cell_seed)?;
    let (estimate, stderr) = {
        let est = infonce_in_batch_estimate(&pairs, &critic, cfg.eval_batch)?;
        // Spread of per-batch values around the mean.
        let per_batch: Vec<f64> = pairs
            .chunks_exact(cfg.eval_batch)
            .map(|chunk| {
                let e = infonce_in_batch_estimate(chunk, &critic, cfg.eval_batch)?;
                Ok(e.value)
            })
            .collect::<Result<_>>()?;
        let n = per_batch.len() as f64;
        let mean: f64 = per_batch.iter().sum::<f64>() / n;
        let var: f64 = per_batch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (est, (var / n).sqrt())
    };
    Ok(MICell {
        checkpoint: checkpoint.to_string(),
        group,
        dataset: dataset.to_string(),
        mi_nats: estimate.mi_nats(),
        stderr,
        pairs: pairs.len(),
        estimate,
    })
}

/// Estimate `I(T_group; Z)` for both checkpoints on benign and adversarial
/// data (eight cells) and report the adversarial-data deltas. A fresh critic
/// is fitted per cell with a fixed derived seed; negatives follow the
/// in-batch product-marginal protocol.
pub fn mi_analysis(
    ckpt_a: &Checkpoint,
    ckpt_b: &Checkpoint,
    benign: &[Example],
    adversarial: &[Example],
    cfg: &MIAnalysisConfig,
    seed: u64,
) -> Result<MIAnalysisReport> {
    let model_a = ckpt_a.build_model()?;
    let model_b = ckpt_b.build_model()?;
    let mut cells = Vec::with_capacity(8);
    for (name, model) in [("base", &model_a), ("retrained", &model_b)] {
        for group in [FeatureGroup::Anchored, FeatureGroup::NonAnchored] {
            for (dataset, examples) in [("benign", benign), ("adversarial", adversarial)] {
                cells.push(estimate_cell(
                    model, examples, group, dataset, name, cfg, seed,
                )?);
            }
        }
    }
    let report = MIAnalysisReport {
        seed,
        cells,
        delta_adv_anchored: 0.0,
        delta_adv_non_anchored: 0.0,
        delta_benign_anchored: 0.0,
        delta_benign_non_anchored: 0.0,
    };
    let get = |ckpt: &str, group, dataset: &str| -> f64 {
        report
            .cell(ckpt, group, dataset)
            .map(|c| c.mi_nats)
            .expect("all eight cells populated")
    };
    let delta = |group, dataset: &str| -> f64 {
        get("retrained", group, dataset) - get("base", group, dataset)
    };
    Ok(MIAnalysisReport {
        delta_adv_anchored: delta(FeatureGroup::Anchored, "adversarial"),
        delta_adv_non_anchored: delta(FeatureGroup::NonAnchored, "adversarial"),
        delta_benign_anchored: delta(FeatureGroup::Anchored, "benign"),
        delta_benign_non_anchored: delta(FeatureGroup::NonAnchored, "benign"),
        ..report
    })
}

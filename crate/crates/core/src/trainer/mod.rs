//! Objective composition and the training loop.
//!
//! The full objective is `task (or FreeLB) + ib_penalty - alpha * alignment`;
//! the critic descends the same loss (which ascends its InfoNCE bound) in the
//! same step, with its own step size. Plain SGD is the default optimizer for
//! reproducibility; Adam sits behind the config switch.

mod checkpoint;

pub use checkpoint::{Checkpoint, CheckpointMeta};

use crate::attack::{adversarial_training_loss, AdvConfig};
use crate::corpus::{Corpus, Example, ReferenceEmbeddingTable, Vocabulary};
use crate::diffcore::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::mi::CriticParams;
use crate::model::{mean_scalars, Model, ModelConfig};
use crate::optim::{clip_global_norm, Adam, Optimizer, Sgd};
use crate::regularizers::{
    anchored_alignment, anchored_select, ib_penalty, AnchorConfig, FeatureRef, IBConfig,
    SampleMode,
};
use crate::rng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Standard,
    Adversarial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub ib: IBConfig,
    pub anchor: AnchorConfig,
    pub adv: AdvConfig,
    pub freeze_embeddings: bool,
    pub clip_norm: f64,
    pub critic_hidden: usize,
    pub critic_lr: f64,
    /// Cap on anchored pairs drawn per example each step.
    pub anchors_cap: usize,
    /// Cap on InfoNCE negatives drawn per step.
    pub negatives_cap: usize,
    /// Weight of the auxiliary span-tagging loss (0 disables).
    pub tagging_weight: f64,
    /// Synonym sets that carry label signal (tagging targets); 0 disables.
    pub indicator_sets: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Standard,
            optimizer: OptimizerKind::Sgd,
            lr: 0.1,
            epochs: 5,
            batch_size: 32,
            seed: 0,
            ib: IBConfig::default(),
            anchor: AnchorConfig::default(),
            adv: AdvConfig::default(),
            freeze_embeddings: true,
            clip_norm: 5.0,
            critic_hidden: 300,
            critic_lr: 1e-2,
            anchors_cap: 4,
            negatives_cap: 16,
            tagging_weight: 0.0,
            indicator_sets: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.critic_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if self.anchors_cap == 0 || self.negatives_cap == 0 {
            return Err(Error::Config("anchor/negative caps must be >= 1".into()));
        }
        if self.tagging_weight < 0.0 {
            return Err(Error::Config("tagging_weight must be >= 0".into()));
        }
        self.ib.validate()?;
        self.anchor.validate()?;
        if self.ib.sample_mode == SampleMode::Adversarial && self.mode != TrainMode::Adversarial {
            return Err(Error::Config(
                "ib sample_mode adversarial requires adversarial training mode".into(),
            ));
        }
        Ok(())
    }
}

/// One training step's loss value, components, and gradients.
pub struct StepLoss {
    pub value: f64,
    pub task: f64,
    pub ib: f64,
    pub align: f64,
    pub tag: f64,
    pub model_grads: Vec<Tensor>,
    pub critic_grads: Option<Vec<Tensor>>,
    pub anchored_total: usize,
}

/// Per-example gradient norms of the task loss w.r.t. zero perturbations,
/// produced in one batched forward/backward.
fn batch_virtual_gradients(model: &Model, batch: &[&Example]) -> Result<Vec<Vec<f64>>> {
    let d = model.config.dim;
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, false, true);
    let mut losses = Vec::with_capacity(batch.len());
    let mut leaves = Vec::with_capacity(batch.len());
    for e in batch {
        let zero = Tensor::zeros(vec![e.token_ids.len(), d]);
        let run = model.run_example(&mut tape, &binding, e, Some(&zero))?;
        losses.push(model.task_loss(&mut tape, run.logits, e.label)?);
        leaves.push(run.delta.expect("delta injected"));
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    tape.backprop(total)?;
    Ok(batch
        .iter()
        .zip(&leaves)
        .map(|(e, &leaf)| {
            let g = tape.grad(leaf).expect("delta requires grad");
            e.word_positions()
                .map(|p| {
                    g[p * d..(p + 1) * d]
                        .iter()
                        .map(|v| v * v)
                        .sum::<f64>()
                        .sqrt()
                })
                .collect()
        })
        .collect())
}

/// Conditional samples `t'` for the bottleneck penalty.
fn sampled_features(
    tape: &Tape,
    features: &[NodeId],
    batch: &[&Example],
    deltas: Option<&[Tensor]>,
    cfg: &IBConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<Tensor> {
    features
        .iter()
        .zip(batch)
        .enumerate()
        .map(|(i, (&f, _e))| {
            let shape = tape.shape_of(f).to_vec();
            let mut data = tape.value(f).to_vec();
            match cfg.sample_mode {
                SampleMode::Identity => {}
                SampleMode::Gaussian => {
                    for v in &mut data {
                        *v += cfg.sigma * rng::normal(rng);
                    }
                }
                SampleMode::Adversarial => {
                    if let Some(deltas) = deltas {
                        for (dst, dv) in data.iter_mut().zip(&deltas[i].data) {
                            *dst += dv;
                        }
                    }
                }
            }
            Tensor { shape, data }
        })
        .collect()
}

/// Regularizer terms (and optional tagging loss) on benign features; returns
/// (loss components, model grads, critic grads, anchored count).
#[allow(clippy::too_many_arguments)]
fn regularizer_step(
    model: &Model,
    critic: &CriticParams,
    batch: &[&Example],
    vg_norms: Option<&[Vec<f64>]>,
    deltas: Option<&[Tensor]>,
    cfg: &TrainConfig,
    tag_targets: Option<&[Vec<bool>]>,
    step_rng: &mut ChaCha8Rng,
) -> Result<(f64, f64, f64, Vec<Tensor>, Option<Vec<Tensor>>, usize)> {
    let d = model.config.dim;
    let use_align = cfg.anchor.alpha > 0.0;
    let use_ib = cfg.ib.beta > 0.0;
    let use_tag = cfg.tagging_weight > 0.0 && model.config.tagging_head;
    if !use_align && !use_ib && !use_tag {
        return Ok((0.0, 0.0, 0.0, Vec::new(), None, 0));
    }

    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, true, cfg.freeze_embeddings);
    let critic_leaves = critic.register(&mut tape, use_align);

    let mut features = Vec::with_capacity(batch.len());
    let mut globals = Vec::with_capacity(batch.len());
    let mut hiddens = Vec::with_capacity(batch.len());
    for e in batch {
        let run = model.run_example(&mut tape, &binding, e, None)?;
        features.push(run.features);
        globals.push(run.global);
        hiddens.push(run.hidden);
    }

    let mut terms: Vec<NodeId> = Vec::new();
    let mut ib_value = 0.0;
    if use_ib {
        let refs: Vec<FeatureRef> = features
            .iter()
            .zip(batch)
            .map(|(&f, e)| FeatureRef {
                features: f,
                word_positions: e.word_positions().collect(),
            })
            .collect();
        let sampled = sampled_features(&tape, &features, batch, deltas, &cfg.ib, step_rng);
        let node = ib_penalty(&mut tape, &refs, &sampled, &cfg.ib, step_rng)?;
        ib_value = tape.scalar_value(node);
        terms.push(node);
    }

    let mut align_value = 0.0;
    let mut anchored_total = 0;
    if use_align {
        let mut pairs: Vec<(NodeId, NodeId)> = Vec::new();
        let mut complement_slots: Vec<(usize, usize)> = Vec::new();
        for (i, _e) in batch.iter().enumerate() {
            let norms = &vg_norms.expect("virtual gradients required for alignment")[i];
            let set = anchored_select(norms, cfg.anchor.c_l, cfg.anchor.c_h);
            let mut picks = set.selected.clone();
            if picks.len() > cfg.anchors_cap {
                picks.shuffle(step_rng);
                picks.truncate(cfg.anchors_cap);
                picks.sort_unstable();
            }
            for w in picks {
                let p = w + 1;
                let row = tape.slice_rows(features[i], p, p + 1)?;
                let t = tape.reshape(row, vec![d])?;
                pairs.push((t, globals[i]));
            }
            for w in set.complement {
                complement_slots.push((i, w + 1));
            }
        }
        anchored_total = pairs.len();
        if pairs.is_empty() {
            log::warn!("anchored set empty across the batch; alignment skipped this step");
        } else if complement_slots.is_empty() {
            log::warn!("no complement features available; alignment skipped this step");
        } else {
            complement_slots.shuffle(step_rng);
            complement_slots.truncate(cfg.negatives_cap);
            let mut negatives = Vec::with_capacity(complement_slots.len());
            for (i, p) in complement_slots {
                let row = tape.slice_rows(features[i], p, p + 1)?;
                negatives.push(tape.reshape(row, vec![d])?);
            }
            let bound = anchored_alignment(&mut tape, &pairs, &negatives, &critic_leaves, true)?;
            align_value = tape.scalar_value(bound);
            terms.push(tape.scale(bound, -cfg.anchor.alpha));
        }
    }

    let mut tag_value = 0.0;
    if use_tag {
        let targets = tag_targets.ok_or_else(|| {
            Error::Config("tagging_weight set but no tagging targets supplied".into())
        })?;
        let mut tag_losses = Vec::new();
        for ((e, &hidden), target) in batch.iter().zip(&hiddens).zip(targets) {
            let logits = model.tag_logits(&mut tape, &binding, hidden)?;
            for (w, p) in e.word_positions().enumerate() {
                let row = tape.slice_rows(logits, p, p + 1)?;
                let row = tape.reshape(row, vec![2])?;
                let label = usize::from(target[w]);
                tag_losses.push(tape.cross_entropy_with_logits(row, label)?);
            }
        }
        if !tag_losses.is_empty() {
            let mean = mean_scalars(&mut tape, &tag_losses)?;
            tag_value = tape.scalar_value(mean);
            terms.push(tape.scale(mean, cfg.tagging_weight));
        }
    }

    if terms.is_empty() {
        return Ok((0.0, 0.0, 0.0, Vec::new(), None, anchored_total));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    tape.backprop(total)?;
    let model_grads = binding.grads(&tape);
    let critic_grads = if use_align && align_value != 0.0 {
        Some(
            critic_leaves
                .ids()
                .iter()
                .map(|&id| Tensor {
                    shape: tape.shape_of(id).to_vec(),
                    data: tape
                        .grad(id)
                        .map(|g| g.to_vec())
                        .unwrap_or_else(|| vec![0.0; tape.value(id).len()]),
                })
                .collect(),
        )
    } else {
        None
    };
    Ok((
        ib_value,
        align_value,
        tag_value,
        model_grads,
        critic_grads,
        anchored_total,
    ))
}

/// Compose the full objective on one batch and return its value and
/// gradients. The vanilla path (`alpha = beta = 0`, standard mode, no
/// tagging) reduces exactly to the plain mean cross-entropy.
pub fn total_loss_step(
    model: &Model,
    critic: &CriticParams,
    batch: &[&Example],
    cfg: &TrainConfig,
    tag_targets: Option<&[Vec<bool>]>,
    step_rng: &mut ChaCha8Rng,
) -> Result<StepLoss> {
    let need_vg = cfg.anchor.alpha > 0.0;
    let vg_norms = if need_vg {
        Some(batch_virtual_gradients(model, batch)?)
    } else {
        None
    };

    let (task_value, mut model_grads, deltas) = match cfg.mode {
        TrainMode::Standard => {
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape, true, cfg.freeze_embeddings);
            let mut losses = Vec::with_capacity(batch.len());
            for e in batch {
                let run = model.run_example(&mut tape, &binding, e, None)?;
                losses.push(model.task_loss(&mut tape, run.logits, e.label)?);
            }
            let mean = mean_scalars(&mut tape, &losses)?;
            tape.backprop(mean)?;
            (tape.scalar_value(mean), binding.grads(&tape), None)
        }
        TrainMode::Adversarial => {
            let (lg, deltas) = adversarial_training_loss(
                model,
                batch,
                &cfg.adv,
                cfg.freeze_embeddings,
                step_rng,
            )?;
            (lg.value, lg.grads, Some(deltas))
        }
    };

    let (ib_value, align_value, tag_value, reg_grads, critic_grads, anchored_total) =
        regularizer_step(
            model,
            critic,
            batch,
            vg_norms.as_deref(),
            deltas.as_deref(),
            cfg,
            tag_targets,
            step_rng,
        )?;
    for (m, r) in model_grads.iter_mut().zip(&reg_grads) {
        for (mv, rv) in m.data.iter_mut().zip(&r.data) {
            *mv += rv;
        }
    }

    Ok(StepLoss {
        value: task_value + ib_value - cfg.anchor.alpha * align_value
            + cfg.tagging_weight * tag_value,
        task: task_value,
        ib: ib_value,
        align: align_value,
        tag: tag_value,
        model_grads,
        critic_grads,
        anchored_total,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub dev_accuracy: f64,
    pub mean_loss: f64,
}

pub struct TrainOutcome {
    /// Best-dev checkpoint (initialization when no epochs ran).
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochMetrics>,
    /// Per-step total loss values.
    pub loss_trace: Vec<f64>,
}

fn accuracy(model: &Model, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for e in examples {
        if model.predict(e)?.class == e.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

fn make_optimizer(kind: OptimizerKind, lr: f64) -> Box<dyn Optimizer> {
    match kind {
        OptimizerKind::Sgd => Box::new(Sgd { lr }),
        OptimizerKind::Adam => Box::new(Adam::new(lr)),
    }
}

/// Run the training loop and return the best-dev checkpoint plus the metric
/// history. `config_text` is embedded verbatim in checkpoint metadata.
pub fn train(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    corpus: &Corpus,
    table: Option<&ReferenceEmbeddingTable>,
    config_text: &str,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    let mut model = Model::init(model_cfg.clone(), cfg.seed)?;
    if let Some(table) = table {
        model.set_embeddings(table)?;
    }
    let mut critic = CriticParams::init(2 * model_cfg.dim, cfg.critic_hidden, cfg.seed);
    let mut opt = make_optimizer(cfg.optimizer, cfg.lr);
    let mut critic_opt = make_optimizer(cfg.optimizer, cfg.critic_lr);

    let tag_targets_for = |batch: &[&Example]| -> Option<Vec<Vec<bool>>> {
        if cfg.tagging_weight > 0.0 && cfg.indicator_sets > 0 {
            Some(
                batch
                    .iter()
                    .map(|e| tag_target(&corpus.vocab, e, cfg.indicator_sets))
                    .collect(),
            )
        } else {
            None
        }
    };

    let mut best_acc = f64::NEG_INFINITY;
    let mut best = Checkpoint::from_model(&model, Some(&critic), 0, config_text.to_string());
    let mut history = Vec::new();
    let mut loss_trace = Vec::new();
    let mut global_step = 0u64;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.train.len()).collect();
        let mut epoch_rng = rng::stream(cfg.seed, &format!("batch-order-{epoch}"));
        order.shuffle(&mut epoch_rng);
        let mut epoch_loss = 0.0;
        let mut steps_in_epoch = 0usize;

        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &corpus.train[i]).collect();
            let targets = tag_targets_for(&batch);
            let mut step_rng = rng::stream(cfg.seed, &format!("step-{global_step}"));
            let step = total_loss_step(
                &model,
                &critic,
                &batch,
                cfg,
                targets.as_deref(),
                &mut step_rng,
            )?;
            if !step.value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: global_step as usize,
                    diagnostic: format!(
                        "task={} ib={} align={} tag={}",
                        step.task, step.ib, step.align, step.tag
                    ),
                });
            }

            let mut grads = step.model_grads;
            let pre_norm = clip_global_norm(&mut grads, cfg.clip_norm);
            let clipped = pre_norm > cfg.clip_norm;
            let mut params: Vec<Tensor> = model.params.tensors().cloned().collect();
            opt.step(&mut params, &grads);
            for (dst, src) in model.params.tensors_mut().zip(params) {
                *dst = src;
            }
            if let Some(cg) = step.critic_grads {
                let mut cparams: Vec<Tensor> = critic.tensors().into_iter().cloned().collect();
                critic_opt.step(&mut cparams, &cg);
                let mut it = cparams.into_iter();
                critic.w1 = it.next().expect("w1");
                critic.b1 = it.next().expect("b1");
                critic.w2 = it.next().expect("w2");
                critic.b2 = it.next().expect("b2");
            }

            writeln!(
                log,
                "step={global_step} epoch={epoch} loss={:.9} task={:.9} ib={:.9} align={:.9} tag={:.9} anchored={} grad_norm={:.6} clipped={}",
                step.value,
                step.task,
                step.ib,
                step.align,
                step.tag,
                step.anchored_total,
                pre_norm,
                u8::from(clipped),
            )?;
            loss_trace.push(step.value);
            epoch_loss += step.value;
            steps_in_epoch += 1;
            global_step += 1;
        }

        let dev_accuracy = accuracy(&model, &corpus.dev)?;
        writeln!(
            log,
            "epoch={epoch} dev_accuracy={dev_accuracy:.6} mean_loss={:.9}",
            epoch_loss / steps_in_epoch.max(1) as f64
        )?;
        history.push(EpochMetrics {
            epoch,
            dev_accuracy,
            mean_loss: epoch_loss / steps_in_epoch.max(1) as f64,
        });
        if dev_accuracy >= best_acc {
            best_acc = dev_accuracy;
            best = Checkpoint::from_model(
                &model,
                Some(&critic),
                global_step,
                config_text.to_string(),
            );
        }
    }

    log.flush()?;
    Ok(TrainOutcome {
        checkpoint: best,
        history,
        loss_trace,
    })
}

/// True/false tagging target per word: does it belong to an indicator set.
pub fn tag_target(vocab: &Vocabulary, example: &Example, indicator_sets: usize) -> Vec<bool> {
    example
        .word_positions()
        .map(|p| matches!(vocab.set_of(example.token_ids[p]), Some(s) if s < indicator_sets))
        .collect()
}

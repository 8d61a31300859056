//! Virtual adversarial machinery (embedding-space gradients and PGD) and the
//! word-substitution evaluation attack.
//!
//! The embedding-space side perturbs only word rows (never CLS or PAD) and
//! keeps the perturbation inside a Frobenius ball. The word-level side swaps
//! tokens within synonym sets, so every emitted example keeps per-token
//! embedding distortion within the reference epsilon and provably preserves
//! the oracle label.

use crate::corpus::{Example, ReferenceEmbeddingTable, Vocabulary};
use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{mean_scalars, Model};
use crate::rng;
use rand::Rng;
use serde::Serialize;

/// Norm-bounded embedding perturbation for one example.
#[derive(Debug, Clone)]
pub struct PerturbationState {
    pub delta: Tensor,
    pub epsilon: f64,
    pub eta: f64,
    word_rows: Vec<bool>,
}

impl PerturbationState {
    /// Zero-initialized perturbation over the example's sequence.
    pub fn zeros(example: &Example, dim: usize, epsilon: f64, eta: f64) -> Self {
        let len = example.token_ids.len();
        let mut word_rows = vec![false; len];
        for p in example.word_positions() {
            word_rows[p] = true;
        }
        PerturbationState {
            delta: Tensor::zeros(vec![len, dim]),
            epsilon,
            eta,
            word_rows,
        }
    }

    /// Random direction scaled to `init_norm` (then projected); `0` keeps the
    /// zero init.
    pub fn random<R: Rng>(
        example: &Example,
        dim: usize,
        epsilon: f64,
        eta: f64,
        init_norm: f64,
        rng: &mut R,
    ) -> Self {
        let mut state = Self::zeros(example, dim, epsilon, eta);
        if init_norm > 0.0 {
            for (p, &is_word) in state.word_rows.iter().enumerate() {
                if is_word {
                    for j in 0..dim {
                        state.delta.data[p * dim + j] = rng::normal(rng);
                    }
                }
            }
            let norm = state.delta.frobenius_norm();
            if norm > 0.0 {
                let s = init_norm / norm;
                for v in &mut state.delta.data {
                    *v *= s;
                }
            }
            state.project();
        }
        state
    }

    fn zero_non_word_rows(&mut self, dim: usize) {
        for (p, &is_word) in self.word_rows.iter().enumerate() {
            if !is_word {
                for j in 0..dim {
                    self.delta.data[p * dim + j] = 0.0;
                }
            }
        }
    }

    fn project(&mut self) {
        let norm = self.delta.frobenius_norm();
        if norm > self.epsilon && norm > 0.0 {
            let s = self.epsilon / norm;
            for v in &mut self.delta.data {
                *v *= s;
            }
        }
    }

    /// One-step PGD with overwrite semantics:
    /// `delta <- project(eta * g / ||g||_F)`; a vanishing gradient leaves
    /// `delta` unchanged.
    pub fn overwrite_step(&mut self, g: &Tensor) {
        let dim = self.delta.shape[1];
        let gnorm = g.frobenius_norm();
        if gnorm < 1e-12 {
            return;
        }
        for (dst, &gv) in self.delta.data.iter_mut().zip(&g.data) {
            *dst = self.eta * gv / gnorm;
        }
        self.zero_non_word_rows(dim);
        self.project();
    }

    /// Accumulating ascent step used inside adversarial training:
    /// `delta <- project(delta + eta * g / ||g||_F)`.
    pub fn accumulate_step(&mut self, g: &Tensor) {
        let dim = self.delta.shape[1];
        let gnorm = g.frobenius_norm();
        if gnorm < 1e-12 {
            return;
        }
        for (dst, &gv) in self.delta.data.iter_mut().zip(&g.data) {
            *dst += self.eta * gv / gnorm;
        }
        self.zero_non_word_rows(dim);
        self.project();
    }
}

/// Per-token gradient norms of the task loss w.r.t. a zero perturbation,
/// plus the full gradient matrix. `norms[i]` belongs to word `i` (sequence
/// position `i + 1`); PAD rows are not reported.
#[derive(Debug, Clone)]
pub struct VirtualGradient {
    pub norms: Vec<f64>,
    pub full: Tensor,
}

/// One forward + one backward with `delta = 0` injected at the embedding.
pub fn virtual_gradient(model: &Model, example: &Example) -> Result<VirtualGradient> {
    let d = model.config.dim;
    let len = example.token_ids.len();
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, false, true);
    let zero = Tensor::zeros(vec![len, d]);
    let run = model.run_example(&mut tape, &binding, example, Some(&zero))?;
    let loss = model.task_loss(&mut tape, run.logits, example.label)?;
    tape.backprop(loss)?;
    let g = tape
        .grad(run.delta.expect("delta was injected"))
        .expect("delta requires grad");
    let full = Tensor {
        shape: vec![len, d],
        data: g.to_vec(),
    };
    let norms = example
        .word_positions()
        .map(|p| {
            full.data[p * d..(p + 1) * d]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    Ok(VirtualGradient { norms, full })
}

/// Knobs for the FreeLB-style loss.
#[derive(Debug, Clone, PartialEq, serde::Deserialize, Serialize)]
pub struct AdvConfig {
    pub k: usize,
    pub eta: f64,
    pub epsilon: f64,
    pub init_norm: f64,
}

impl Default for AdvConfig {
    fn default() -> Self {
        AdvConfig {
            k: 3,
            eta: 0.1,
            epsilon: 0.3,
            init_norm: 0.1,
        }
    }
}

/// A scalar loss with gradients aligned to the model's parameter order.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub value: f64,
    pub grads: Vec<Tensor>,
}

/// FreeLB-style adversarial training loss over a batch: `K` rounds of
/// forward/backward, ascending each example's perturbation between rounds
/// with the accumulating PGD step, averaging both the task losses and the
/// parameter gradients across rounds. Returns the final per-example deltas
/// so a caller can reuse them as conditional samples.
pub fn adversarial_training_loss<R: Rng>(
    model: &Model,
    batch: &[&Example],
    cfg: &AdvConfig,
    freeze_embeddings: bool,
    rng: &mut R,
) -> Result<(LossGrads, Vec<Tensor>)> {
    if cfg.k == 0 {
        return Err(Error::Config("adversarial steps K must be >= 1".into()));
    }
    if batch.is_empty() {
        return Err(Error::Domain("adversarial loss needs a batch".into()));
    }
    let d = model.config.dim;
    let mut states: Vec<PerturbationState> = batch
        .iter()
        .map(|e| PerturbationState::random(e, d, cfg.epsilon, cfg.eta, cfg.init_norm, rng))
        .collect();

    let mut value = 0.0;
    let mut grads: Option<Vec<Tensor>> = None;
    for _round in 0..cfg.k {
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape, true, freeze_embeddings);
        let mut losses = Vec::with_capacity(batch.len());
        let mut delta_leaves = Vec::with_capacity(batch.len());
        for (e, state) in batch.iter().zip(&states) {
            let run = model.run_example(&mut tape, &binding, e, Some(&state.delta))?;
            losses.push(model.task_loss(&mut tape, run.logits, e.label)?);
            delta_leaves.push(run.delta.expect("delta injected"));
        }
        let mean = mean_scalars(&mut tape, &losses)?;
        tape.backprop(mean)?;
        value += tape.scalar_value(mean);

        let round_grads = binding.grads(&tape);
        grads = Some(match grads {
            None => round_grads,
            Some(mut acc) => {
                for (a, g) in acc.iter_mut().zip(round_grads) {
                    for (av, gv) in a.data.iter_mut().zip(g.data) {
                        *av += gv;
                    }
                }
                acc
            }
        });

        for (state, &leaf) in states.iter_mut().zip(&delta_leaves) {
            let g = Tensor {
                shape: state.delta.shape.clone(),
                data: tape.grad(leaf).expect("delta requires grad").to_vec(),
            };
            state.accumulate_step(&g);
        }
    }

    let mut grads = grads.expect("k >= 1");
    for g in &mut grads {
        for v in &mut g.data {
            *v /= cfg.k as f64;
        }
    }
    Ok((
        LossGrads {
            value: value / cfg.k as f64,
            grads,
        },
        states.into_iter().map(|s| s.delta).collect(),
    ))
}

/// Word-substitution attack parameters.
#[derive(Debug, Clone, PartialEq, serde::Deserialize, Serialize)]
pub struct WordSubConfig {
    /// Cap on the fraction of true tokens that may be swapped (0 disables).
    pub max_fraction: f64,
    /// Maximum number of model queries.
    pub query_budget: usize,
}

impl Default for WordSubConfig {
    fn default() -> Self {
        WordSubConfig {
            max_fraction: 1.0,
            query_budget: 2000,
        }
    }
}

impl WordSubConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.max_fraction) {
            return Err(Error::Config(format!(
                "max_fraction {} must be in [0, 1]",
                self.max_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SwapRecord {
    pub position: usize,
    pub from: String,
    pub to: String,
}

/// What the attack did to one example.
#[derive(Debug, Clone, Serialize)]
pub struct AttackTrace {
    /// Attack skipped because the victim already misclassifies the input.
    pub skipped: bool,
    /// True once the victim's prediction flipped.
    pub success: bool,
    pub queries: usize,
    pub swaps: Vec<SwapRecord>,
    /// True-class probability before the attack and after each commit.
    pub prob_trajectory: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub example: Example,
    pub trace: AttackTrace,
}

/// Greedy synonym-substitution attack: rank word positions by virtual
/// gradient norm (descending), then at each position commit the in-set swap
/// with the largest true-class probability drop; stop at misprediction, the
/// query budget, or the substitution-fraction cap. Failure to flip returns
/// the best-effort example with `success = false`.
pub fn word_substitution_attack(
    model: &Model,
    example: &Example,
    config: &WordSubConfig,
    vocab: &Vocabulary,
    table: &ReferenceEmbeddingTable,
) -> Result<AttackOutcome> {
    config.validate()?;
    let mut queries = 0usize;
    let predict = |e: &Example, queries: &mut usize| -> Result<crate::model::Prediction> {
        *queries += 1;
        model.predict(e)
    };

    let initial = predict(example, &mut queries)?;
    if initial.class != example.label {
        return Ok(AttackOutcome {
            example: example.clone(),
            trace: AttackTrace {
                skipped: true,
                success: false,
                queries,
                swaps: Vec::new(),
                prob_trajectory: vec![initial.probs[example.label]],
            },
        });
    }

    let vg = virtual_gradient(model, example)?;
    let mut order: Vec<usize> = (0..example.n).collect();
    order.sort_by(|&a, &b| {
        vg.norms[b]
            .partial_cmp(&vg.norms[a])
            .expect("finite norms")
            .then(a.cmp(&b))
    });
    let max_swaps = (config.max_fraction * example.n as f64).floor() as usize;

    let mut current = example.clone();
    let mut current_prob = initial.probs[example.label];
    let mut trace = AttackTrace {
        skipped: false,
        success: false,
        queries: 0,
        swaps: Vec::new(),
        prob_trajectory: vec![current_prob],
    };

    'outer: for &word_idx in &order {
        if trace.swaps.len() >= max_swaps {
            break;
        }
        let position = word_idx + 1;
        let original = current.token_ids[position];
        let mut best: Option<(usize, f64, crate::model::Prediction)> = None;
        for synonym in vocab.synonyms(original) {
            if queries >= config.query_budget {
                break 'outer;
            }
            debug_assert!(table.distance(original, synonym) <= table.epsilon + 1e-9);
            let mut candidate = current.clone();
            candidate.token_ids[position] = synonym;
            let pred = predict(&candidate, &mut queries)?;
            let prob = pred.probs[example.label];
            if best.as_ref().is_none_or(|(_, p, _)| prob < *p) {
                best = Some((synonym, prob, pred));
            }
        }
        if let Some((synonym, prob, pred)) = best {
            if prob < current_prob {
                current.token_ids[position] = synonym;
                current_prob = prob;
                trace.swaps.push(SwapRecord {
                    position,
                    from: vocab.word(original).to_string(),
                    to: vocab.word(synonym).to_string(),
                });
                trace.prob_trajectory.push(prob);
                if pred.class != example.label {
                    trace.success = true;
                    break;
                }
            }
        }
    }
    trace.queries = queries;
    Ok(AttackOutcome {
        example: current,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_reference_embeddings, generate_corpus, oracle_label, CorpusConfig};
    use crate::model::{Model, ModelConfig, Pooling};

    fn cfg() -> CorpusConfig {
        CorpusConfig {
            num_sets: 8,
            set_size: 4,
            num_classes: 2,
            indicator_sets: 4,
            indicators_per_example: 1,
            train_n: 40,
            dev_n: 8,
            test_n: 8,
            min_tokens: 3,
            max_tokens: 5,
            embed_dim: 8,
            epsilon: 0.2,
            member_skew: 1.0,
        }
    }

    fn model_for(c: &CorpusConfig, seed: u64) -> Model {
        Model::init(
            ModelConfig {
                dim: 8,
                layers: 1,
                heads: 2,
                vocab_size: c.vocab_size(),
                num_classes: c.num_classes,
                max_len: 8,
                pool: Pooling::Cls,
                tagging_head: false,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn pgd_projection_arithmetic() {
        let e = Example {
            token_ids: vec![1, 2, 3, 0],
            label: 0,
            n: 2,
        };
        // ||g|| = 2, eta = 0.1, eps = 0.05 -> projected onto the ball.
        let mut s = PerturbationState::zeros(&e, 2, 0.05, 0.1);
        let mut g = Tensor::zeros(vec![4, 2]);
        g.data[2] = 2.0;
        s.overwrite_step(&g);
        assert!((s.delta.frobenius_norm() - 0.05).abs() < 1e-12);

        // eta = 0.01 stays interior.
        let mut s = PerturbationState::zeros(&e, 2, 0.05, 0.01);
        s.overwrite_step(&g);
        assert!((s.delta.frobenius_norm() - 0.01).abs() < 1e-12);

        // Zero gradient leaves delta untouched.
        let mut s = PerturbationState::zeros(&e, 2, 0.05, 0.1);
        s.delta.data[2] = 0.03;
        s.overwrite_step(&Tensor::zeros(vec![4, 2]));
        assert_eq!(s.delta.data[2], 0.03);
    }

    #[test]
    fn updates_always_respect_the_frobenius_budget() {
        let e = Example {
            token_ids: vec![1, 2, 3, 4, 0],
            label: 0,
            n: 3,
        };
        let mut r = rng::stream(5, "budget");
        let mut s = PerturbationState::random(&e, 4, 0.3, 0.25, 0.1, &mut r);
        for _ in 0..100 {
            let g = Tensor {
                shape: vec![5, 4],
                data: rng::normal_vec(&mut r, 20),
            };
            if r.random::<f64>() < 0.5 {
                s.accumulate_step(&g);
            } else {
                s.overwrite_step(&g);
            }
            assert!(s.delta.frobenius_norm() <= 0.3 + 1e-9);
        }
    }

    #[test]
    fn constant_model_has_zero_virtual_gradients() {
        let c = cfg();
        let corpus = generate_corpus(&c, 1).unwrap();
        let mut model = model_for(&c, 2);
        *model.params.get_mut("head.w").unwrap() = Tensor::zeros(vec![8, 2]);
        *model.params.get_mut("head.b").unwrap() = Tensor::zeros(vec![2]);
        let vg = virtual_gradient(&model, &corpus.train[0]).unwrap();
        for n in vg.norms {
            assert!(n.abs() < 1e-12);
        }
    }

    #[test]
    fn doubling_the_loss_doubles_gradient_norms() {
        let c = cfg();
        let corpus = generate_corpus(&c, 2).unwrap();
        let model = model_for(&c, 3);
        let e = &corpus.train[0];
        let vg = virtual_gradient(&model, e).unwrap();

        let d = model.config.dim;
        let len = e.token_ids.len();
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape, false, true);
        let zero = Tensor::zeros(vec![len, d]);
        let run = model.run_example(&mut tape, &binding, e, Some(&zero)).unwrap();
        let loss = model.task_loss(&mut tape, run.logits, e.label).unwrap();
        let doubled = tape.scale(loss, 2.0);
        tape.backprop(doubled).unwrap();
        let g = tape.grad(run.delta.unwrap()).unwrap();
        for (i, p) in e.word_positions().enumerate() {
            let norm = g[p * d..(p + 1) * d]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            assert!((norm - 2.0 * vg.norms[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn virtual_gradient_matches_finite_differences() {
        let c = cfg();
        let corpus = generate_corpus(&c, 3).unwrap();
        let model = model_for(&c, 4);
        let e = &corpus.train[1];
        let vg = virtual_gradient(&model, e).unwrap();
        let d = model.config.dim;
        let len = e.token_ids.len();
        let h = 1e-5;
        let loss_at = |delta: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape, false, true);
            let run = model.run_example(&mut tape, &binding, e, Some(delta)).unwrap();
            let l = model.task_loss(&mut tape, run.logits, e.label).unwrap();
            tape.scalar_value(l)
        };
        let mut delta = Tensor::zeros(vec![len, d]);
        for p in e.word_positions() {
            for j in 0..d {
                delta.data[p * d + j] = h;
                let fp = loss_at(&delta);
                delta.data[p * d + j] = -h;
                let fm = loss_at(&delta);
                delta.data[p * d + j] = 0.0;
                let numeric = (fp - fm) / (2.0 * h);
                let analytic = vg.full.data[p * d + j];
                let denom = 1.0_f64.max(analytic.abs()).max(numeric.abs());
                assert!(((analytic - numeric).abs() / denom) <= 1e-4);
            }
        }
    }

    #[test]
    fn degenerate_adversarial_loss_equals_plain_cross_entropy() {
        let c = cfg();
        let corpus = generate_corpus(&c, 4).unwrap();
        let model = model_for(&c, 5);
        let batch: Vec<&Example> = corpus.train[..4].iter().collect();

        let plain = {
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape, false, true);
            let losses: Vec<_> = batch
                .iter()
                .map(|e| {
                    let run = model.run_example(&mut tape, &binding, e, None).unwrap();
                    model.task_loss(&mut tape, run.logits, e.label).unwrap()
                })
                .collect();
            let mean = mean_scalars(&mut tape, &losses).unwrap();
            tape.scalar_value(mean)
        };

        let mut r = rng::stream(6, "adv-degenerate");
        for adv in [
            AdvConfig { k: 1, eta: 0.0, epsilon: 0.3, init_norm: 0.0 },
            AdvConfig { k: 3, eta: 0.1, epsilon: 0.0, init_norm: 0.1 },
        ] {
            let (lg, _) =
                adversarial_training_loss(&model, &batch, &adv, true, &mut r).unwrap();
            assert!(
                (lg.value - plain).abs() <= 1e-12,
                "adv {adv:?}: {} vs {plain}",
                lg.value
            );
        }
    }

    #[test]
    fn ascent_property_holds_statistically() {
        let c = cfg();
        let corpus = generate_corpus(&c, 5).unwrap();
        let model = model_for(&c, 6);
        let adv = AdvConfig {
            k: 3,
            eta: 0.1,
            epsilon: 0.3,
            init_norm: 0.0,
        };
        let mut r = rng::stream(7, "ascent");
        let mut wins = 0;
        let trials = 50;
        for t in 0..trials {
            let e = &corpus.train[t % corpus.train.len()];
            let (_, deltas) =
                adversarial_training_loss(&model, &[e], &adv, true, &mut r).unwrap();
            let loss_at = |delta: Option<&Tensor>| -> f64 {
                let mut tape = Tape::new();
                let binding = model.bind(&mut tape, false, true);
                let run = model.run_example(&mut tape, &binding, e, delta).unwrap();
                let l = model.task_loss(&mut tape, run.logits, e.label).unwrap();
                tape.scalar_value(l)
            };
            if loss_at(Some(&deltas[0])) >= loss_at(None) {
                wins += 1;
            }
        }
        assert!(
            wins * 10 >= trials * 9,
            "ascent held on only {wins}/{trials} batches"
        );
    }

    #[test]
    fn constant_classifier_cannot_be_flipped() {
        let c = cfg();
        let corpus = generate_corpus(&c, 6).unwrap();
        let mut model = model_for(&c, 7);
        *model.params.get_mut("head.w").unwrap() = Tensor::zeros(vec![8, 2]);
        let bias = model.params.get_mut("head.b").unwrap();
        bias.data[0] = 1.0;
        let table = build_reference_embeddings(&corpus.vocab, c.embed_dim, c.epsilon, 8).unwrap();
        let wsc = WordSubConfig::default();
        for e in &corpus.test {
            let out = word_substitution_attack(&model, e, &wsc, &corpus.vocab, &table).unwrap();
            assert!(!out.trace.success);
        }
    }

    #[test]
    fn zero_fraction_attempts_no_swaps() {
        let c = cfg();
        let corpus = generate_corpus(&c, 7).unwrap();
        let model = model_for(&c, 8);
        let table = build_reference_embeddings(&corpus.vocab, c.embed_dim, c.epsilon, 9).unwrap();
        let wsc = WordSubConfig {
            max_fraction: 0.0,
            query_budget: 1000,
        };
        for e in &corpus.test {
            let out = word_substitution_attack(&model, e, &wsc, &corpus.vocab, &table).unwrap();
            assert!(out.trace.swaps.is_empty());
            assert_eq!(out.example, *e);
        }
    }

    #[test]
    fn greedy_matches_exhaustive_whenever_one_swap_flips() {
        let c = cfg();
        let table_seed = 10;
        let wsc = WordSubConfig::default();
        let mut checked = 0;
        // Scan a few fixed fixtures; random models differ in how sharp their
        // class boundaries sit relative to the synonym jitter.
        for (corpus_seed, model_seed) in (0..8).map(|k| (8 + k, 9 + 3 * k)) {
            let corpus = generate_corpus(&c, corpus_seed).unwrap();
            let mut model = model_for(&c, model_seed);
            // Sharpen the head so single-swap flips are geometrically possible.
            for v in &mut model.params.get_mut("head.w").unwrap().data {
                *v *= 6.0;
            }
            let table =
                build_reference_embeddings(&corpus.vocab, c.embed_dim, c.epsilon, table_seed)
                    .unwrap();
            for e in corpus.train.iter().chain(&corpus.test) {
                if model.predict(e).unwrap().class != e.label {
                    continue;
                }
                let mut one_swap_flips = false;
                for p in e.word_positions() {
                    for syn in corpus.vocab.synonyms(e.token_ids[p]) {
                        let mut cand = e.clone();
                        cand.token_ids[p] = syn;
                        if model.predict(&cand).unwrap().class != e.label {
                            one_swap_flips = true;
                        }
                    }
                }
                if one_swap_flips {
                    let out =
                        word_substitution_attack(&model, e, &wsc, &corpus.vocab, &table).unwrap();
                    assert!(out.trace.success, "greedy missed a reachable flip");
                    checked += 1;
                }
            }
            if checked >= 5 {
                break;
            }
        }
        assert!(checked > 0, "no 1-swap-flippable example in any fixture");
    }

    #[test]
    fn attack_outputs_stay_inside_synonym_sets_and_keep_the_oracle_label() {
        let c = cfg();
        let corpus = generate_corpus(&c, 9).unwrap();
        let model = model_for(&c, 10);
        let table = build_reference_embeddings(&corpus.vocab, c.embed_dim, c.epsilon, 11).unwrap();
        let wsc = WordSubConfig::default();
        for e in &corpus.test {
            let out = word_substitution_attack(&model, e, &wsc, &corpus.vocab, &table).unwrap();
            for (p, (&orig, &new)) in e
                .token_ids
                .iter()
                .zip(&out.example.token_ids)
                .enumerate()
            {
                if orig != new {
                    assert!(e.word_positions().contains(&p));
                    assert_eq!(corpus.vocab.set_of(orig), corpus.vocab.set_of(new));
                    assert!(table.distance(orig, new) <= c.epsilon + 1e-12);
                }
            }
            let relabeled = oracle_label(
                &corpus.vocab,
                c.indicator_sets,
                c.num_classes,
                &out.example.token_ids,
                out.example.n,
            );
            assert_eq!(relabeled, Some(e.label));
        }
    }
}

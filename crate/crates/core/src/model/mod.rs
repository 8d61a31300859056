//! The classifier stack: embedding feature extractor producing per-token
//! local features, a masked self-attentive encoder plus heads producing the
//! pooled global feature, class logits, and (optionally) per-token tag
//! logits.
//!
//! Every forward pass binds the parameters onto a fresh tape, so the
//! perturbation delta can enter and leave the graph across training phases.

use crate::corpus::{Example, ReferenceEmbeddingTable, PAD};
use crate::diffcore::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng;
use serde::{Deserialize, Serialize};

/// How the global feature is pooled from the final hidden states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Final hidden state at the prepended CLS position (default).
    Cls,
    /// Mean over the true-token hidden states.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub max_len: usize,
    pub pool: Pooling,
    /// Ship the span-tagging head alongside the classifier.
    pub tagging_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 32,
            layers: 2,
            heads: 4,
            vocab_size: 202,
            num_classes: 3,
            max_len: 16,
            pool: Pooling::Cls,
            tagging_head: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0
            || self.layers == 0
            || self.heads == 0
            || self.vocab_size == 0
            || self.num_classes == 0
            || self.max_len == 0
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    fn ffn_width(&self) -> usize {
        2 * self.dim
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }
}

/// Tape handles for one binding of the parameters, aligned with the
/// [`ParamSet`] order.
pub struct TapeBinding {
    ids: Vec<NodeId>,
    names: Vec<String>,
}

impl TapeBinding {
    pub fn id(&self, name: &str) -> NodeId {
        self.ids[self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    /// Gradients for every parameter after a backprop, zeros where a
    /// parameter did not participate.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.ids
            .iter()
            .map(|&id| Tensor {
                shape: tape.shape_of(id).to_vec(),
                data: tape
                    .grad(id)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; tape.value(id).len()]),
            })
            .collect()
    }
}

/// One example pushed through the full stack on some tape.
pub struct ExampleRun {
    /// Local features `T` (embedding output, `L x d`, CLS row included).
    pub features: NodeId,
    /// Injected perturbation leaf, when one was supplied.
    pub delta: Option<NodeId>,
    /// Final hidden states (`L x d`).
    pub hidden: NodeId,
    /// Pooled global feature `Z` (`[d]`).
    pub global: NodeId,
    /// Class logits (`[num_classes]`).
    pub logits: NodeId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl Model {
    /// Random initialization; embeddings are usually overwritten from the
    /// reference table right after.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "model-init");
        let d = config.dim;
        let f = config.ffn_width();
        let mut entries: Vec<(String, Tensor)> = Vec::new();
        let mat = |r: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize, scale: f64| {
            Tensor {
                shape: vec![rows, cols],
                data: rng::normal_vec(r, rows * cols)
                    .into_iter()
                    .map(|v| v * scale)
                    .collect(),
            }
        };
        let s = 1.0 / (d as f64).sqrt();
        entries.push((
            "embed.table".into(),
            mat(&mut r, config.vocab_size, d, 0.5),
        ));
        entries.push(("embed.pos".into(), mat(&mut r, config.max_len, d, 0.1)));
        for l in 0..config.layers {
            for w in ["wq", "wk", "wv", "wo"] {
                entries.push((format!("enc{l}.{w}"), mat(&mut r, d, d, s)));
            }
            entries.push((format!("enc{l}.ln1.g"), ones(d)));
            entries.push((format!("enc{l}.ln1.b"), Tensor::zeros(vec![d])));
            entries.push((format!("enc{l}.ffn.w1"), mat(&mut r, d, f, s)));
            entries.push((format!("enc{l}.ffn.b1"), Tensor::zeros(vec![f])));
            entries.push((
                format!("enc{l}.ffn.w2"),
                mat(&mut r, f, d, 1.0 / (f as f64).sqrt()),
            ));
            entries.push((format!("enc{l}.ffn.b2"), Tensor::zeros(vec![d])));
            entries.push((format!("enc{l}.ln2.g"), ones(d)));
            entries.push((format!("enc{l}.ln2.b"), Tensor::zeros(vec![d])));
        }
        entries.push(("head.w".into(), mat(&mut r, d, config.num_classes, s)));
        entries.push(("head.b".into(), Tensor::zeros(vec![config.num_classes])));
        if config.tagging_head {
            entries.push(("tag.w".into(), mat(&mut r, d, 2, s)));
            entries.push(("tag.b".into(), Tensor::zeros(vec![2])));
        }
        Ok(Model {
            config,
            params: ParamSet { entries },
        })
    }

    /// Overwrite the embedding table from the reference geometry.
    pub fn set_embeddings(&mut self, table: &ReferenceEmbeddingTable) -> Result<()> {
        if table.vocab_size() != self.config.vocab_size || table.dim != self.config.dim {
            return Err(Error::Config(format!(
                "reference table is {}x{}, model expects {}x{}",
                table.vocab_size(),
                table.dim,
                self.config.vocab_size,
                self.config.dim
            )));
        }
        *self.params.get_mut("embed.table").expect("always present") = table.as_tensor();
        Ok(())
    }

    /// Rebuild from named tensors (checkpoint load); every expected name must
    /// be present with the right shape.
    pub fn from_named_tensors(config: ModelConfig, tensors: &[(String, Tensor)]) -> Result<Self> {
        let mut model = Model::init(config, 0)?;
        let expected: Vec<String> = model.params.names().map(str::to_string).collect();
        for name in &expected {
            let found = tensors.iter().find(|(n, _)| n == name);
            match found {
                None => {
                    return Err(Error::Checkpoint(format!(
                        "missing tensor {name}; expected tensors: {}",
                        expected.join(", ")
                    )))
                }
                Some((_, t)) => {
                    let slot = model.params.get_mut(name).expect("name from expected list");
                    if slot.shape != t.shape {
                        return Err(Error::Checkpoint(format!(
                            "tensor {name} has shape {:?}, expected {:?}",
                            t.shape, slot.shape
                        )));
                    }
                    *slot = t.clone();
                }
            }
        }
        Ok(model)
    }

    /// Register all parameters on a tape. `trainable` controls gradient
    /// tracking; the embedding table additionally honors `freeze_embeddings`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool, freeze_embeddings: bool) -> TapeBinding {
        let mut ids = Vec::with_capacity(self.params.len());
        let mut names = Vec::with_capacity(self.params.len());
        for (name, tensor) in self.params.entries() {
            let rg = trainable && !(freeze_embeddings && name == "embed.table");
            ids.push(tape.leaf(tensor, rg));
            names.push(name.clone());
        }
        TapeBinding { ids, names }
    }

    /// Sequence length the paddings of `example` imply (CLS + tokens + PAD).
    fn seq_len(&self, example: &Example) -> Result<usize> {
        let len = example.token_ids.len();
        if len > self.config.max_len {
            return Err(Error::Config(format!(
                "example length {len} exceeds model max_len {}",
                self.config.max_len
            )));
        }
        Ok(len)
    }

    /// Local features `T = gather(embeddings) + positional (+ delta)`.
    ///
    /// `delta` must be `L x d` with zero rows at the CLS position and at
    /// every PAD position; it becomes a gradient-tracked leaf, so the caller
    /// can read `d loss / d delta` after a backprop.
    pub fn embed(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        example: &Example,
        delta: Option<&Tensor>,
    ) -> Result<(NodeId, Option<NodeId>)> {
        let len = self.seq_len(example)?;
        let d = self.config.dim;
        let emb = tape.gather(binding.id("embed.table"), &example.token_ids)?;
        let pos_all = binding.id("embed.pos");
        let pos = tape.slice_rows(pos_all, 0, len)?;
        let mut features = tape.add(emb, pos)?;
        let mut delta_leaf = None;
        if let Some(delta) = delta {
            if delta.shape != [len, d] {
                return Err(Error::ShapeMismatch {
                    op: "embed-delta",
                    lhs: vec![len, d],
                    rhs: delta.shape.clone(),
                });
            }
            for p in 0..len {
                let is_word = p >= 1 && p <= example.n;
                if !is_word && delta.data[p * d..(p + 1) * d].iter().any(|&v| v != 0.0) {
                    return Err(Error::Config(format!(
                        "delta must be zero at non-word position {p}"
                    )));
                }
            }
            let leaf = tape.leaf(delta, true);
            features = tape.add(features, leaf)?;
            delta_leaf = Some(leaf);
        }
        Ok((features, delta_leaf))
    }

    /// Masked self-attention encoder; PAD keys are excluded everywhere.
    /// Returns the final hidden states and the pooled global feature.
    pub fn encode(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        features: NodeId,
        example: &Example,
    ) -> Result<(NodeId, NodeId)> {
        let len = self.seq_len(example)?;
        let d = self.config.dim;
        let heads = self.config.heads;
        let dh = d / heads;
        let eps = 1e-5;

        // Additive key mask: 0 for CLS and true tokens, -1e30 for PAD.
        let mask_row: Vec<f64> = example.token_ids[..len]
            .iter()
            .enumerate()
            .map(|(p, &id)| {
                if p == 0 || (id != PAD && p <= example.n) {
                    0.0
                } else {
                    -1e30
                }
            })
            .collect();
        let mask = tape.leaf_parts(vec![len], mask_row, false)?;

        let mut x = features;
        for l in 0..self.config.layers {
            let q = tape.matmul(x, binding.id(&format!("enc{l}.wq")))?;
            let k = tape.matmul(x, binding.id(&format!("enc{l}.wk")))?;
            let v = tape.matmul(x, binding.id(&format!("enc{l}.wv")))?;
            let mut ctx: Option<NodeId> = None;
            for h in 0..heads {
                let (c0, c1) = (h * dh, (h + 1) * dh);
                let qh = tape.slice_cols(q, c0, c1)?;
                let kh = tape.slice_cols(k, c0, c1)?;
                let vh = tape.slice_cols(v, c0, c1)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
                let scores = tape.add_row(scores, mask)?;
                let attn = tape.softmax(scores)?;
                let ch = tape.matmul(attn, vh)?;
                ctx = Some(match ctx {
                    None => ch,
                    Some(prev) => tape.concat_cols(prev, ch)?,
                });
            }
            let ctx = ctx.expect("at least one head");
            let proj = tape.matmul(ctx, binding.id(&format!("enc{l}.wo")))?;
            let res = tape.add(x, proj)?;
            let normed = tape.layer_norm(res, eps)?;
            let scaled = tape.mul_row(normed, binding.id(&format!("enc{l}.ln1.g")))?;
            let x1 = tape.add_row(scaled, binding.id(&format!("enc{l}.ln1.b")))?;

            let h1 = tape.matmul(x1, binding.id(&format!("enc{l}.ffn.w1")))?;
            let h1 = tape.add_row(h1, binding.id(&format!("enc{l}.ffn.b1")))?;
            let h1 = tape.tanh(h1);
            let h2 = tape.matmul(h1, binding.id(&format!("enc{l}.ffn.w2")))?;
            let h2 = tape.add_row(h2, binding.id(&format!("enc{l}.ffn.b2")))?;
            let res2 = tape.add(x1, h2)?;
            let normed2 = tape.layer_norm(res2, eps)?;
            let scaled2 = tape.mul_row(normed2, binding.id(&format!("enc{l}.ln2.g")))?;
            x = tape.add_row(scaled2, binding.id(&format!("enc{l}.ln2.b")))?;
        }

        let global = match self.config.pool {
            Pooling::Cls => {
                let row = tape.slice_rows(x, 0, 1)?;
                tape.reshape(row, vec![d])?
            }
            Pooling::Mean => {
                let words = tape.slice_rows(x, 1, example.n + 1)?;
                let w = 1.0 / example.n as f64;
                let avg_weights = tape.leaf_parts(vec![1, example.n], vec![w; example.n], false)?;
                let pooled = tape.matmul(avg_weights, words)?;
                tape.reshape(pooled, vec![d])?
            }
        };
        Ok((x, global))
    }

    /// Class logits from the global feature.
    pub fn classify(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        global: NodeId,
    ) -> Result<NodeId> {
        let d = self.config.dim;
        let row = tape.reshape(global, vec![1, d])?;
        let out = tape.matmul(row, binding.id("head.w"))?;
        let out = tape.add_row(out, binding.id("head.b"))?;
        tape.reshape(out, vec![self.config.num_classes])
    }

    /// Cross-entropy task loss; also the Monte-Carlo surrogate for the
    /// predictive-MI term of the objective.
    pub fn task_loss(&self, tape: &mut Tape, logits: NodeId, label: usize) -> Result<NodeId> {
        if label >= self.config.num_classes {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.config.num_classes,
            });
        }
        tape.cross_entropy_with_logits(logits, label)
    }

    /// Per-token tag logits (`L x 2`) from the shared encoder.
    pub fn tag_logits(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        hidden: NodeId,
    ) -> Result<NodeId> {
        if !self.config.tagging_head {
            return Err(Error::Config("model built without a tagging head".into()));
        }
        let out = tape.matmul(hidden, binding.id("tag.w"))?;
        tape.add_row(out, binding.id("tag.b"))
    }

    /// Full stack on one example.
    pub fn run_example(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        example: &Example,
        delta: Option<&Tensor>,
    ) -> Result<ExampleRun> {
        let (features, delta_leaf) = self.embed(tape, binding, example, delta)?;
        let (hidden, global) = self.encode(tape, binding, features, example)?;
        let logits = self.classify(tape, binding, global)?;
        Ok(ExampleRun {
            features,
            delta: delta_leaf,
            hidden,
            global,
            logits,
        })
    }

    /// Probabilities and prediction without gradient tracking.
    pub fn predict(&self, example: &Example) -> Result<Prediction> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, false, true);
        let run = self.run_example(&mut tape, &binding, example, None)?;
        let probs_node = tape.softmax(run.logits)?;
        let probs = tape.value(probs_node).to_vec();
        let class = argmax(&probs);
        Ok(Prediction { probs, class })
    }
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub class: usize,
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// Mean of scalar nodes.
pub fn mean_scalars(tape: &mut Tape, scalars: &[NodeId]) -> Result<NodeId> {
    let Some(&first) = scalars.first() else {
        return Err(Error::Domain("mean of zero scalars".into()));
    };
    let mut acc = first;
    for &s in &scalars[1..] {
        acc = tape.add(acc, s)?;
    }
    Ok(tape.scale(acc, 1.0 / scalars.len() as f64))
}

fn ones(n: usize) -> Tensor {
    Tensor {
        shape: vec![n],
        data: vec![1.0; n],
    }
}

/// End-to-end finite-difference check: mean task loss over `examples`
/// against every parameter tensor and a random word-row perturbation on the
/// first example. Returns the worst relative error.
pub fn end_to_end_grad_check(
    model: &Model,
    examples: &[Example],
    seed: u64,
    step: f64,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Domain("gradient check needs examples".into()));
    }
    let d = model.config.dim;
    let len = examples[0].token_ids.len();
    let mut r = rng::stream(seed, "e2e-gradcheck-delta");
    let mut delta = Tensor::zeros(vec![len, d]);
    for p in examples[0].word_positions() {
        for j in 0..d {
            delta.data[p * d + j] = 0.05 * rng::normal(&mut r);
        }
    }

    let loss_value = |m: &Model, delta: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let binding = m.bind(&mut tape, false, true);
        let mut losses = Vec::new();
        for (i, e) in examples.iter().enumerate() {
            let run = m.run_example(&mut tape, &binding, e, (i == 0).then_some(delta))?;
            losses.push(m.task_loss(&mut tape, run.logits, e.label)?);
        }
        let mean = mean_scalars(&mut tape, &losses)?;
        Ok(tape.scalar_value(mean))
    };

    // Analytic gradients for parameters and delta in one backward pass.
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, true, false);
    let mut losses = Vec::new();
    let mut delta_leaf = None;
    for (i, e) in examples.iter().enumerate() {
        let run = model.run_example(&mut tape, &binding, e, (i == 0).then_some(&delta))?;
        if i == 0 {
            delta_leaf = run.delta;
        }
        losses.push(model.task_loss(&mut tape, run.logits, e.label)?);
    }
    let mean = mean_scalars(&mut tape, &losses)?;
    tape.backprop(mean)?;
    let param_grads = binding.grads(&tape);
    let delta_grad = tape
        .grad(delta_leaf.expect("delta injected on first example"))
        .expect("delta requires grad")
        .to_vec();

    let mut worst = 0.0_f64;
    let mut compare = |analytic: f64, numeric: f64| {
        let denom = 1.0_f64.max(analytic.abs()).max(numeric.abs());
        worst = worst.max((analytic - numeric).abs() / denom);
    };

    let mut work = model.clone();
    for ti in 0..model.params.len() {
        for ci in 0..model.params.entries()[ti].1.numel() {
            let orig = work.params.entries[ti].1.data[ci];
            work.params.entries[ti].1.data[ci] = orig + step;
            let fp = loss_value(&work, &delta)?;
            work.params.entries[ti].1.data[ci] = orig - step;
            let fm = loss_value(&work, &delta)?;
            work.params.entries[ti].1.data[ci] = orig;
            compare(param_grads[ti].data[ci], (fp - fm) / (2.0 * step));
        }
    }
    let mut dwork = delta.clone();
    for p in examples[0].word_positions() {
        for j in 0..d {
            let ci = p * d + j;
            let orig = dwork.data[ci];
            dwork.data[ci] = orig + step;
            let fp = loss_value(model, &dwork)?;
            dwork.data[ci] = orig - step;
            let fm = loss_value(model, &dwork)?;
            dwork.data[ci] = orig;
            compare(delta_grad[ci], (fp - fm) / (2.0 * step));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig};
    use crate::diffcore::DEFAULT_FD_STEP;

    fn tiny_corpus_config() -> CorpusConfig {
        CorpusConfig {
            num_sets: 6,
            set_size: 3,
            num_classes: 2,
            indicator_sets: 4,
            indicators_per_example: 1,
            train_n: 12,
            dev_n: 4,
            test_n: 4,
            min_tokens: 3,
            max_tokens: 5,
            embed_dim: 8,
            epsilon: 0.1,
            member_skew: 1.0,
        }
    }

    fn tiny_model(cfg: &CorpusConfig) -> Model {
        Model::init(
            ModelConfig {
                dim: 8,
                layers: 1,
                heads: 2,
                vocab_size: cfg.vocab_size(),
                num_classes: cfg.num_classes,
                max_len: 8,
                pool: Pooling::Cls,
                tagging_head: false,
            },
            17,
        )
        .unwrap()
    }

    #[test]
    fn zero_delta_matches_plain_lookup() {
        let cfg = tiny_corpus_config();
        let corpus = generate_corpus(&cfg, 1).unwrap();
        let model = tiny_model(&cfg);
        let e = &corpus.train[0];
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape, false, true);
        let (plain, _) = model.embed(&mut tape, &binding, e, None).unwrap();
        let zero = Tensor::zeros(vec![e.token_ids.len(), 8]);
        let (with_zero, _) = model.embed(&mut tape, &binding, e, Some(&zero)).unwrap();
        assert_eq!(tape.value(plain), tape.value(with_zero));
    }

    #[test]
    fn delta_shifts_features_by_its_own_norm() {
        let cfg = tiny_corpus_config();
        let corpus = generate_corpus(&cfg, 2).unwrap();
        let model = tiny_model(&cfg);
        let e = &corpus.train[0];
        let len = e.token_ids.len();
        let mut delta = Tensor::zeros(vec![len, 8]);
        // One word row, norm 0.1.
        delta.data[1 * 8] = 0.1;
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape, false, true);
        let (plain, _) = model.embed(&mut tape, &binding, e, None).unwrap();
        let (shifted, _) = model.embed(&mut tape, &binding, e, Some(&delta)).unwrap();
        let diff: f64 = tape
            .value(plain)
            .iter()
            .zip(tape.value(shifted))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!((diff - 0.1).abs() < 1e-12);
    }

    #[test]
    fn nonzero_delta_on_pad_row_is_rejected() {
        let cfg = tiny_corpus_config();
        let corpus = generate_corpus(&cfg, 3).unwrap();
        let model = tiny_model(&cfg);
        let e = corpus
            .train
            .iter()
            .find(|e| e.n + 1 < e.token_ids.len())
            .expect("some example is padded");
        let len = e.token_ids.len();
        let mut delta = Tensor::zeros(vec![len, 8]);
        delta.data[(len - 1) * 8 + 2] = 0.01;
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape, false, true);
        assert!(model.embed(&mut tape, &binding, e, Some(&delta)).is_err());
    }

    #[test]
    fn logits_do_not_depend_on_padding_length() {
        let cfg = tiny_corpus_config();
        let corpus = generate_corpus(&cfg, 4).unwrap();
        let model = tiny_model(&cfg);
        let e = &corpus.train[0];
        let mut longer = e.clone();
        longer.token_ids.resize(e.token_ids.len() + 2, crate::corpus::PAD);
        let a = model.predict(e).unwrap();
        let b = model.predict(&longer).unwrap();
        assert_eq!(a.probs, b.probs);
    }

    #[test]
    fn zeroed_head_gives_ln3_loss_on_three_classes() {
        let mut cfg = tiny_corpus_config();
        cfg.num_classes = 3;
        cfg.indicator_sets = 3;
        let corpus = generate_corpus(&cfg, 5).unwrap();
        let mut model = tiny_model(&cfg);
        model.config.num_classes = 3;
        *model.params.get_mut("head.w").unwrap() = Tensor::zeros(vec![8, 3]);
        *model.params.get_mut("head.b").unwrap() = Tensor::zeros(vec![3]);
        let e = &corpus.train[0];
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape, false, true);
        let run = model.run_example(&mut tape, &binding, e, None).unwrap();
        let loss = model.task_loss(&mut tape, run.logits, e.label).unwrap();
        assert!((tape.scalar_value(loss) - 3.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn global_depends_on_unmasked_tokens() {
        let cfg = tiny_corpus_config();
        let corpus = generate_corpus(&cfg, 6).unwrap();
        let model = tiny_model(&cfg);
        let e = &corpus.train[0];
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape, true, false);
        let run = model.run_example(&mut tape, &binding, e, None).unwrap();
        // A plain sum of the globals is layer-norm-invariant (rows are
        // zero-mean), so probe a randomly weighted sum instead.
        let weights = tape.leaf_parts(vec![8], (1..=8).map(|k| 0.3 * k as f64).collect(), false).unwrap();
        let weighted = tape.mul(run.global, weights).unwrap();
        let root = tape.sum(weighted);
        tape.backprop(root).unwrap();
        let table_grad = tape.grad(binding.id("embed.table")).unwrap();
        let d = model.config.dim;
        let word = e.token_ids[1];
        let row = &table_grad[word * d..(word + 1) * d];
        assert!(row.iter().any(|&g| g.abs() > 1e-12));
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let cfg = tiny_corpus_config();
        let corpus = generate_corpus(&cfg, 7).unwrap();
        let model = tiny_model(&cfg);
        let err = end_to_end_grad_check(
            &model,
            &corpus.train[..2.min(corpus.train.len())],
            7,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(err <= 1e-4, "end-to-end gradient error {err}");
    }

    #[test]
    fn missing_checkpoint_tensor_lists_expected_names() {
        let cfg = tiny_corpus_config();
        let model = tiny_model(&cfg);
        let mut tensors: Vec<(String, Tensor)> = model
            .params
            .entries()
            .iter()
            .cloned()
            .collect();
        tensors.retain(|(n, _)| n != "head.w");
        let err = Model::from_named_tensors(model.config.clone(), &tensors).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("head.w") && msg.contains("embed.table"), "{msg}");
    }
}

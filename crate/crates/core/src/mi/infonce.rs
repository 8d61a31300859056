//! InfoNCE lower bound with a learned two-layer critic.
//!
//! The raw estimate follows the printed contrastive form: mean over positive
//! pairs of `g(t_i, z_i) - ln sum over a denominator set of e^{g(t', z_i)}`.
//! By default the positive is included in the denominator, which makes the
//! `ln(denominator)`-shifted reading ([`super::MIEstimate::mi_nats`]) a true
//! lower bound on MI; the literal negatives-only form sits behind a flag.

use super::{EstimatorKind, MIEstimate};
use crate::diffcore::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::optim::{Adam, Optimizer};
use crate::rng;
use rand::seq::SliceRandom;

/// Two affine layers with a tanh between; input is `concat(local, global)`,
/// output a scalar score.
#[derive(Debug, Clone)]
pub struct CriticParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl CriticParams {
    /// Random init scaled for tanh saturation at the given input width.
    pub fn init(input_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "critic-init");
        let s1 = (1.0 / input_dim as f64).sqrt();
        let s2 = (1.0 / hidden as f64).sqrt();
        CriticParams {
            w1: Tensor {
                shape: vec![input_dim, hidden],
                data: rng::normal_vec(&mut r, input_dim * hidden)
                    .into_iter()
                    .map(|v| v * s1)
                    .collect(),
            },
            b1: Tensor::zeros(vec![hidden]),
            w2: Tensor {
                shape: vec![hidden, 1],
                data: rng::normal_vec(&mut r, hidden)
                    .into_iter()
                    .map(|v| v * s2)
                    .collect(),
            },
            b2: Tensor::zeros(vec![1]),
        }
    }

    /// A critic that scores every input identically; useful as a baseline.
    pub fn constant(input_dim: usize, hidden: usize, score: f64) -> Self {
        CriticParams {
            w1: Tensor::zeros(vec![input_dim, hidden]),
            b1: Tensor::zeros(vec![hidden]),
            w2: Tensor::zeros(vec![hidden, 1]),
            b2: Tensor::scalar(score),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.shape[0]
    }

    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> CriticLeaves {
        CriticLeaves {
            w1: tape.leaf(&self.w1, requires_grad),
            b1: tape.leaf(&self.b1, requires_grad),
            w2: tape.leaf(&self.w2, requires_grad),
            b2: tape.leaf(&self.b2, requires_grad),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// Tape handles for one registration of the critic.
#[derive(Debug, Clone, Copy)]
pub struct CriticLeaves {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

impl CriticLeaves {
    pub fn ids(&self) -> [NodeId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    /// Score a batch of critic inputs (`B x input_dim`) into a length-`B` vector.
    pub fn score_rows(&self, tape: &mut Tape, inputs: NodeId) -> Result<NodeId> {
        let pre = tape.matmul(inputs, self.w1)?;
        let pre = tape.add_row(pre, self.b1)?;
        let h = tape.tanh(pre);
        let s = tape.matmul(h, self.w2)?;
        let s = tape.add_row(s, self.b2)?;
        let rows = tape.shape_of(s)[0];
        tape.reshape(s, vec![rows])
    }
}

/// Build the InfoNCE objective on an existing tape.
///
/// `positives` pairs a local-feature node with its global-feature node;
/// `negatives` are local-feature nodes shared across all positives. Row
/// groups are scored in one critic pass, so cost is linear in
/// `|positives| * (1 + |negatives|)`.
pub fn infonce_node(
    tape: &mut Tape,
    positives: &[(NodeId, NodeId)],
    negatives: &[NodeId],
    critic: &CriticLeaves,
    include_positive: bool,
) -> Result<NodeId> {
    if positives.is_empty() {
        return Err(Error::Domain("infonce needs at least one positive".into()));
    }
    if negatives.is_empty() {
        return Err(Error::EmptyNegatives);
    }
    let m = negatives.len();
    let mut rows = Vec::with_capacity(positives.len() * (1 + m));
    for &(t, z) in positives {
        rows.push(tape.concat_cols(t, z)?);
        for &neg in negatives {
            rows.push(tape.concat_cols(neg, z)?);
        }
    }
    let inputs = tape.stack_rows(&rows)?;
    let scores = critic.score_rows(tape, inputs)?;
    let grouped = tape.reshape(scores, vec![positives.len(), 1 + m])?;
    let pos_col = tape.slice_cols(grouped, 0, 1)?;
    let pos = tape.reshape(pos_col, vec![positives.len()])?;
    let denom = if include_positive {
        tape.log_sum_exp_rows(grouped)?
    } else {
        let negs_only = tape.slice_cols(grouped, 1, 1 + m)?;
        tape.log_sum_exp_rows(negs_only)?
    };
    let diff = tape.sub(pos, denom)?;
    Ok(tape.mean(diff))
}

/// Fast path for raw (gradient-free) features: the whole score-input matrix
/// is materialized as one leaf. Rows come in `p` groups of `1 + m`; column 0
/// of each group is the positive pair.
fn infonce_groups_raw(
    tape: &mut Tape,
    inputs: Tensor,
    p: usize,
    m: usize,
    critic: &CriticLeaves,
    include_positive: bool,
) -> Result<NodeId> {
    let inputs = tape.leaf(&inputs, false);
    let scores = critic.score_rows(tape, inputs)?;
    let grouped = tape.reshape(scores, vec![p, 1 + m])?;
    let pos_col = tape.slice_cols(grouped, 0, 1)?;
    let pos = tape.reshape(pos_col, vec![p])?;
    let denom = if include_positive {
        tape.log_sum_exp_rows(grouped)?
    } else {
        let negs_only = tape.slice_cols(grouped, 1, 1 + m)?;
        tape.log_sum_exp_rows(negs_only)?
    };
    let diff = tape.sub(pos, denom)?;
    Ok(tape.mean(diff))
}

/// Input matrix for the in-batch protocol: for each pair `i` in the chunk,
/// one group of rows `[(t_i, z_i), (t_j, z_i) for j != i]`.
fn in_batch_inputs(chunk: &[(Vec<f64>, Vec<f64>)]) -> Tensor {
    let b = chunk.len();
    let (dt, dz) = (chunk[0].0.len(), chunk[0].1.len());
    let width = dt + dz;
    let mut data = Vec::with_capacity(b * b * width);
    for (i, (ti, zi)) in chunk.iter().enumerate() {
        data.extend_from_slice(ti);
        data.extend_from_slice(zi);
        for (j, (tj, _)) in chunk.iter().enumerate() {
            if j != i {
                data.extend_from_slice(tj);
                data.extend_from_slice(zi);
            }
        }
    }
    Tensor {
        shape: vec![b * b, width],
        data,
    }
}

/// Evaluate the InfoNCE estimate for raw feature vectors.
pub fn infonce_estimate(
    positives: &[(Vec<f64>, Vec<f64>)],
    negatives: &[Vec<f64>],
    critic: &CriticParams,
    include_positive: bool,
) -> Result<MIEstimate> {
    let mut tape = Tape::new();
    let leaves = critic.register(&mut tape, false);
    let pos_nodes: Vec<(NodeId, NodeId)> = positives
        .iter()
        .map(|(t, z)| {
            let tn = tape.leaf_parts(vec![t.len()], t.clone(), false)?;
            let zn = tape.leaf_parts(vec![z.len()], z.clone(), false)?;
            Ok((tn, zn))
        })
        .collect::<Result<_>>()?;
    let neg_nodes: Vec<NodeId> = negatives
        .iter()
        .map(|t| tape.leaf_parts(vec![t.len()], t.clone(), false))
        .collect::<Result<_>>()?;
    let value = infonce_node(&mut tape, &pos_nodes, &neg_nodes, &leaves, include_positive)?;
    Ok(MIEstimate {
        value: tape.scalar_value(value),
        kind: EstimatorKind::InfoNce,
        samples: positives.len(),
        denominator: Some(negatives.len() + usize::from(include_positive)),
    })
}

/// Standard in-batch protocol over a paired sample: consecutive batches, each
/// positive contrasted against the whole batch (itself included), so the
/// denominator has exactly `batch` entries.
pub fn infonce_in_batch_estimate(
    pairs: &[(Vec<f64>, Vec<f64>)],
    critic: &CriticParams,
    batch: usize,
) -> Result<MIEstimate> {
    if pairs.len() < batch || batch < 2 {
        return Err(Error::Domain(format!(
            "need at least one full batch of >= 2 pairs, got {} pairs / batch {batch}",
            pairs.len()
        )));
    }
    let mut total = 0.0;
    let mut batches = 0;
    for chunk in pairs.chunks_exact(batch) {
        let mut tape = Tape::new();
        let leaves = critic.register(&mut tape, false);
        let inputs = in_batch_inputs(chunk);
        let value =
            infonce_groups_raw(&mut tape, inputs, batch, batch - 1, &leaves, true)?;
        total += tape.scalar_value(value);
        batches += 1;
    }
    Ok(MIEstimate {
        value: total / batches as f64,
        kind: EstimatorKind::InfoNce,
        samples: batches * batch,
        // The positive appears once in the shared denominator list.
        denominator: Some(batch),
    })
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CriticFitConfig {
    pub hidden: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for CriticFitConfig {
    fn default() -> Self {
        CriticFitConfig {
            hidden: 300,
            steps: 500,
            batch: 128,
            lr: 5e-3,
        }
    }
}

/// Fit a critic on paired samples by ascending the in-batch InfoNCE bound.
pub fn fit_critic(
    pairs: &[(Vec<f64>, Vec<f64>)],
    cfg: &CriticFitConfig,
    seed: u64,
) -> Result<CriticParams> {
    if pairs.len() < 2 {
        return Err(Error::Domain("critic fitting needs >= 2 pairs".into()));
    }
    let input_dim = pairs[0].0.len() + pairs[0].1.len();
    let mut critic = CriticParams::init(input_dim, cfg.hidden, seed);
    let mut opt = Adam::new(cfg.lr);
    let mut r = rng::stream(seed, "critic-fit");
    let batch = cfg.batch.min(pairs.len()).max(2);
    let mut order: Vec<usize> = (0..pairs.len()).collect();

    for step in 0..cfg.steps {
        if step * batch % pairs.len() < batch {
            order.shuffle(&mut r);
        }
        let start = (step * batch) % (pairs.len() - batch + 1);
        let idx = &order[start..start + batch];

        let mut tape = Tape::new();
        let leaves = critic.register(&mut tape, true);
        let chunk: Vec<(Vec<f64>, Vec<f64>)> =
            idx.iter().map(|&i| pairs[i].clone()).collect();
        let inputs = in_batch_inputs(&chunk);
        let bound = infonce_groups_raw(&mut tape, inputs, batch, batch - 1, &leaves, true)?;
        let loss = tape.scale(bound, -1.0);
        tape.backprop(loss)?;
        let grads: Vec<Tensor> = leaves
            .ids()
            .iter()
            .map(|&id| Tensor {
                shape: tape.shape_of(id).to_vec(),
                data: tape.grad(id).expect("critic leaf requires grad").to_vec(),
            })
            .collect();
        let mut params: Vec<&mut Tensor> = critic.tensors_mut();
        let mut owned: Vec<Tensor> = params.iter().map(|p| (**p).clone()).collect();
        opt.step(&mut owned, &grads);
        for (dst, src) in params.iter_mut().zip(owned) {
            **dst = src;
        }
    }
    Ok(critic)
}

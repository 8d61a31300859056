//! The two training regularizers: a localized information-bottleneck penalty
//! over per-token features and an anchored-feature InfoNCE alignment between
//! mid-salience tokens and the sentence global feature.

use crate::diffcore::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::mi::{infonce_node, CriticLeaves};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// How the conditional sample `t'` is drawn for the bottleneck penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    /// `t' = t` (zero-width conditional).
    Identity,
    /// `t' = t + N(0, sigma^2)`.
    Gaussian,
    /// `t' = t + delta` from the current adversarial step.
    Adversarial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IBConfig {
    pub beta: f64,
    pub sample_mode: SampleMode,
    /// Noise width for [`SampleMode::Gaussian`]; the conditional's constant
    /// prefactor is folded into `beta`.
    pub sigma: f64,
    /// Feature-pool subsample cap per batch.
    pub pool_cap: usize,
}

impl Default for IBConfig {
    fn default() -> Self {
        IBConfig {
            beta: 0.0,
            sample_mode: SampleMode::Identity,
            sigma: 0.0,
            pool_cap: 64,
        }
    }
}

impl IBConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 {
            return Err(Error::Config(format!("ib beta {} must be >= 0", self.beta)));
        }
        if self.sigma < 0.0 {
            return Err(Error::Config(format!(
                "ib sigma {} must be >= 0",
                self.sigma
            )));
        }
        if self.pool_cap == 0 {
            return Err(Error::Config("ib pool_cap must be >= 1".into()));
        }
        Ok(())
    }
}

/// A batch entry for the bottleneck penalty: per-token features on the tape
/// plus which sequence positions hold true tokens.
pub struct FeatureRef {
    pub features: NodeId,
    pub word_positions: Vec<usize>,
}

/// Localized bottleneck penalty over a mini-batch:
/// `beta * mean over examples of sum_k [ -||t'_k - t_k||^2 + mean_j ||t_j - t_k||^2 ]`
/// with `k` ranging over an example's true tokens, `t'` the detached
/// conditional samples, and `j` ranging over a shared pool of true-token
/// features subsampled to `pool_cap`. Minimizing the training loss adds this
/// value.
///
/// The pairwise pool term expands to
/// `sum_k ||t_k||^2 - (2/|P|) sum_kj t_k . t_j + K * mean_j ||t_j||^2`,
/// one matmul instead of `K * |P|` node chains.
pub fn ib_penalty<R: Rng>(
    tape: &mut Tape,
    batch: &[FeatureRef],
    sampled: &[Tensor],
    config: &IBConfig,
    rng: &mut R,
) -> Result<NodeId> {
    config.validate()?;
    if batch.len() != sampled.len() {
        return Err(Error::Domain(format!(
            "ib_penalty: {} feature sets but {} sampled sets",
            batch.len(),
            sampled.len()
        )));
    }
    if config.beta == 0.0 {
        return Ok(tape.scalar(0.0));
    }

    // Anchor rows (every true token in the batch) and their t' rows.
    let mut anchor_rows: Vec<NodeId> = Vec::new();
    let mut sampled_rows: Vec<f64> = Vec::new();
    let mut dim = 0usize;
    for (fref, tprime) in batch.iter().zip(sampled) {
        dim = tape.shape_of(fref.features)[1];
        for &p in &fref.word_positions {
            anchor_rows.push(tape.slice_rows(fref.features, p, p + 1)?);
            sampled_rows.extend_from_slice(&tprime.data[p * dim..(p + 1) * dim]);
        }
    }
    if anchor_rows.is_empty() {
        return Err(Error::EmptyPool);
    }
    let k = anchor_rows.len();

    // Shared pool: subsample of the anchors.
    let mut pool_idx: Vec<usize> = (0..k).collect();
    if k > config.pool_cap {
        pool_idx.shuffle(rng);
        pool_idx.truncate(config.pool_cap);
        pool_idx.sort_unstable();
    }
    let pool_rows: Vec<NodeId> = pool_idx.iter().map(|&i| anchor_rows[i]).collect();
    let p = pool_rows.len();

    let anchors = tape.stack_rows(&anchor_rows)?;
    let pool = tape.stack_rows(&pool_rows)?;
    let tprime = tape.leaf_parts(vec![k, dim], sampled_rows, false)?;

    // -sum_k ||t'_k - t_k||^2
    let diff = tape.sub(tprime, anchors)?;
    let sample_term = tape.sq_norm(diff);
    let neg_sample_term = tape.scale(sample_term, -1.0);

    // sum_k mean_j ||t_j - t_k||^2 expanded.
    let anchors_sq = tape.sq_norm(anchors);
    let pool_t = tape.transpose(pool)?;
    let dots = tape.matmul(anchors, pool_t)?;
    let dots_sum = tape.sum(dots);
    let cross = tape.scale(dots_sum, -2.0 / p as f64);
    let pool_sq = tape.sq_norm(pool);
    let pool_term = tape.scale(pool_sq, k as f64 / p as f64);

    let s1 = tape.add(neg_sample_term, anchors_sq)?;
    let s2 = tape.add(s1, cross)?;
    let s3 = tape.add(s2, pool_term)?;
    Ok(tape.scale(s3, config.beta / batch.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub alpha: f64,
    /// Rank-fraction band (inclusive on both ends).
    pub c_l: f64,
    pub c_h: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            alpha: 5e-3,
            c_l: 0.5,
            c_h: 0.9,
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(Error::Config(format!(
                "anchor alpha {} must be >= 0",
                self.alpha
            )));
        }
        if !(0.0..=1.0).contains(&self.c_l)
            || !(0.0..=1.0).contains(&self.c_h)
            || self.c_l > self.c_h
        {
            return Err(Error::Config(format!(
                "anchor thresholds must satisfy 0 <= c_l <= c_h <= 1, got {} / {}",
                self.c_l, self.c_h
            )));
        }
        Ok(())
    }
}

/// Token indices split into the anchored band and its complement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AnchoredIndexSet {
    pub selected: Vec<usize>,
    pub complement: Vec<usize>,
}

impl AnchoredIndexSet {
    pub fn m(&self) -> usize {
        self.selected.len()
    }

    pub fn m_complement(&self) -> usize {
        self.complement.len()
    }
}

/// Band selection over per-token gradient norms: sort ascending (ties broken
/// by original index), assign 1-based rank fractions `r = pos / n`, keep
/// indices with `c_l <= r <= c_h`.
pub fn anchored_select(grad_norms: &[f64], c_l: f64, c_h: f64) -> AnchoredIndexSet {
    let n = grad_norms.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        grad_norms[a]
            .partial_cmp(&grad_norms[b])
            .expect("finite norms")
            .then(a.cmp(&b))
    });
    let mut selected = Vec::new();
    let mut complement = Vec::new();
    for (pos, &idx) in order.iter().enumerate() {
        let r = (pos + 1) as f64 / n as f64;
        if c_l <= r && r <= c_h {
            selected.push(idx);
        } else {
            complement.push(idx);
        }
    }
    selected.sort_unstable();
    complement.sort_unstable();
    AnchoredIndexSet {
        selected,
        complement,
    }
}

/// Mean InfoNCE bound between anchored features and their global features,
/// against the supplied negatives. An empty anchored set contributes a
/// constant zero (logged), keeping the training step total.
pub fn anchored_alignment(
    tape: &mut Tape,
    anchored: &[(NodeId, NodeId)],
    negatives: &[NodeId],
    critic: &CriticLeaves,
    include_positive: bool,
) -> Result<NodeId> {
    if anchored.is_empty() {
        log::warn!("anchored set empty; alignment term contributes 0 this step");
        return Ok(tape.scalar(0.0));
    }
    infonce_node(tape, anchored, negatives, critic, include_positive)
}

//! Exact verifiers for the two proof ingredients: the per-token
//! decomposition inequality `I(X;T) <= n * sum_i I(X_i;T_i)` and the
//! `|a ln a - b ln b| <= phi(|a-b|)` envelope.

use super::{exact_mi, DiscreteJoint};
use crate::error::{Error, Result};
use crate::rng;
use rand::Rng;
use serde::Serialize;

/// Hard cap on the enumerated joint support `|X|^n * |T|^n`.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

/// Concave subadditive envelope used in the robustness bound:
/// `0` at `0`, `x ln(1/x)` on `(0, 1/e)`, constant `1/e` beyond
/// (continuous at the breakpoint). Natural log.
pub fn phi(x: f64) -> Result<f64> {
    if !(x >= 0.0) {
        return Err(Error::Domain(format!("phi requires x >= 0, got {x}")));
    }
    let inv_e = 1.0 / std::f64::consts::E;
    Ok(if x == 0.0 {
        0.0
    } else if x < inv_e {
        x * (1.0 / x).ln()
    } else {
        inv_e
    })
}

/// Verify `|a ln a - b ln b| <= phi(|a - b|)` for `a, b` in `[0, 1]`,
/// with `0 ln 0 := 0` and a `1e-12` slack.
pub fn lemma2_check(a: f64, b: f64) -> Result<bool> {
    for v in [a, b] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Domain(format!(
                "lemma2_check requires inputs in [0,1], got {v}"
            )));
        }
    }
    let xlnx = |x: f64| if x == 0.0 { 0.0 } else { x * x.ln() };
    let lhs = (xlnx(a) - xlnx(b)).abs();
    Ok(lhs <= phi((a - b).abs())? + 1e-12)
}

/// Conditional pmf of one token's feature given its token: row-stochastic
/// `x_card x t_card` table.
#[derive(Debug, Clone)]
pub struct TokenChannel {
    pub x_card: usize,
    pub t_card: usize,
    pub probs: Vec<f64>,
}

impl TokenChannel {
    pub fn new(x_card: usize, t_card: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != x_card * t_card {
            return Err(Error::InvalidPmf {
                reason: format!(
                    "channel table size {} does not match {x_card}x{t_card}",
                    probs.len()
                ),
            });
        }
        for x in 0..x_card {
            let row = &probs[x * t_card..(x + 1) * t_card];
            if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidPmf {
                    reason: "negative or non-finite channel entry".into(),
                });
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidPmf {
                    reason: format!("channel row {x} sums to {s}"),
                });
            }
        }
        Ok(TokenChannel {
            x_card,
            t_card,
            probs,
        })
    }

    fn p(&self, x: usize, t: usize) -> f64 {
        self.probs[x * self.t_card + t]
    }
}

/// Both sides of the decomposition inequality, from exact enumeration.
#[derive(Debug, Clone, Serialize)]
pub struct Lemma1Outcome {
    pub lhs: f64,
    pub rhs: f64,
    pub ok: bool,
}

/// Push an arbitrary joint over `X^n` through independent per-token channels
/// and compare `I(X;T)` against `n * sum_i I(X_i;T_i)` by exact enumeration.
///
/// `input_joint` is a pmf over token vectors in row-major mixed radix
/// (token 0 is the most significant digit, base `x_card`).
pub fn lemma1_check(
    n: usize,
    channels: &[TokenChannel],
    input_joint: &[f64],
) -> Result<Lemma1Outcome> {
    if n == 0 || channels.len() != n {
        return Err(Error::Domain(format!(
            "expected {n} channels, got {}",
            channels.len()
        )));
    }
    let x_card = channels[0].x_card;
    let t_card = channels[0].t_card;
    if channels
        .iter()
        .any(|c| c.x_card != x_card || c.t_card != t_card)
    {
        return Err(Error::Domain(
            "all per-token channels must share cardinalities".into(),
        ));
    }
    let nx = (x_card as u128).pow(n as u32);
    let nt = (t_card as u128).pow(n as u32);
    if nx * nt > ENUMERATION_LIMIT {
        return Err(Error::SupportTooLarge {
            size: nx * nt,
            limit: ENUMERATION_LIMIT,
        });
    }
    let (nx, nt) = (nx as usize, nt as usize);
    if input_joint.len() != nx {
        return Err(Error::InvalidPmf {
            reason: format!("input joint has {} entries, expected {nx}", input_joint.len()),
        });
    }

    let digits = |mut v: usize, base: usize| -> Vec<usize> {
        let mut d = vec![0; n];
        for i in (0..n).rev() {
            d[i] = v % base;
            v /= base;
        }
        d
    };

    // Full joint over (X^n, T^n): p(xv) * prod_i channel_i(t_i | x_i).
    let mut full = vec![0.0; nx * nt];
    for (xv, &pxv) in input_joint.iter().enumerate() {
        if pxv == 0.0 {
            continue;
        }
        let xd = digits(xv, x_card);
        for tv in 0..nt {
            let td = digits(tv, t_card);
            let mut p = pxv;
            for i in 0..n {
                p *= channels[i].p(xd[i], td[i]);
            }
            full[xv * nt + tv] = p;
        }
    }
    let lhs = exact_mi(&DiscreteJoint::new(nx, nt, normalize_exact(full))?).value;

    // Per-token marginals: p_i(x, t) = p_i(x) * channel_i(t | x).
    let mut rhs_sum = 0.0;
    for i in 0..n {
        let mut px = vec![0.0; x_card];
        for (xv, &pxv) in input_joint.iter().enumerate() {
            px[digits(xv, x_card)[i]] += pxv;
        }
        let mut pmf = vec![0.0; x_card * t_card];
        for x in 0..x_card {
            for t in 0..t_card {
                pmf[x * t_card + t] = px[x] * channels[i].p(x, t);
            }
        }
        rhs_sum += exact_mi(&DiscreteJoint::new(x_card, t_card, normalize_exact(pmf))?).value;
    }
    let rhs = n as f64 * rhs_sum;

    Ok(Lemma1Outcome {
        lhs,
        rhs,
        ok: lhs <= rhs + 1e-9,
    })
}

/// Nudge a nonnegative table so it passes the 1e-12 sum gate without
/// disturbing ratios beyond float rounding.
fn normalize_exact(mut pmf: Vec<f64>) -> Vec<f64> {
    let total: f64 = pmf.iter().sum();
    if total > 0.0 {
        for v in &mut pmf {
            *v /= total;
        }
        let total2: f64 = pmf.iter().sum();
        if let Some(first) = pmf.iter_mut().find(|v| **v > 0.0) {
            *first += 1.0 - total2;
        }
    }
    pmf
}

#[derive(Debug, Clone, Serialize)]
pub struct Lemma1Trial {
    pub n: usize,
    pub x_card: usize,
    pub t_card: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub ok: bool,
}

/// JSON-serializable outcome of the randomized theory suite.
#[derive(Debug, Clone, Serialize)]
pub struct TheoryReport {
    pub seed: u64,
    pub lemma1_trials: Vec<Lemma1Trial>,
    pub lemma1_violations: usize,
    pub lemma2_pairs: usize,
    pub lemma2_violations: usize,
}

/// Run `trials` random (joint, channel) instances through [`lemma1_check`]
/// and `pairs` uniform pairs through [`lemma2_check`].
pub fn theory_check_report(trials: usize, pairs: usize, seed: u64) -> Result<TheoryReport> {
    let mut r = rng::stream(seed, "theory-check");
    let mut lemma1_trials = Vec::with_capacity(trials);
    for _ in 0..trials {
        let n = r.random_range(1..=3usize);
        let x_card = r.random_range(2..=4usize);
        let t_card = r.random_range(2..=4usize);
        let nx = x_card.pow(n as u32);
        let mut joint: Vec<f64> = (0..nx).map(|_| r.random::<f64>()).collect();
        // Sparsify some entries so correlated/degenerate joints are covered.
        if r.random::<f64>() < 0.5 {
            for v in joint.iter_mut() {
                if r.random::<f64>() < 0.4 {
                    *v = 0.0;
                }
            }
        }
        if joint.iter().all(|v| *v == 0.0) {
            joint[0] = 1.0;
        }
        let joint = normalize_exact(joint);
        let channels: Vec<TokenChannel> = (0..n)
            .map(|_| {
                let mut probs = vec![0.0; x_card * t_card];
                for x in 0..x_card {
                    let mut row: Vec<f64> = (0..t_card).map(|_| r.random::<f64>()).collect();
                    if r.random::<f64>() < 0.25 {
                        // Deterministic row: all mass on one symbol.
                        let k = r.random_range(0..t_card);
                        row = vec![0.0; t_card];
                        row[k] = 1.0;
                    }
                    let s: f64 = row.iter().sum();
                    for (t, v) in row.iter().enumerate() {
                        probs[x * t_card + t] = v / s;
                    }
                }
                TokenChannel::new(x_card, t_card, normalize_rows(probs, t_card))
            })
            .collect::<Result<_>>()?;
        let out = lemma1_check(n, &channels, &joint)?;
        lemma1_trials.push(Lemma1Trial {
            n,
            x_card,
            t_card,
            lhs: out.lhs,
            rhs: out.rhs,
            ok: out.ok,
        });
    }
    let lemma1_violations = lemma1_trials.iter().filter(|t| !t.ok).count();

    let mut lemma2_violations = 0;
    for _ in 0..pairs {
        let a = r.random::<f64>();
        let b = r.random::<f64>();
        if !lemma2_check(a, b)? {
            lemma2_violations += 1;
        }
    }

    Ok(TheoryReport {
        seed,
        lemma1_trials,
        lemma1_violations,
        lemma2_pairs: pairs,
        lemma2_violations,
    })
}

fn normalize_rows(mut probs: Vec<f64>, t_card: usize) -> Vec<f64> {
    for row in probs.chunks_mut(t_card) {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            for v in row.iter_mut() {
                *v /= s;
            }
            let s2: f64 = row.iter().sum();
            if let Some(first) = row.iter_mut().find(|v| **v > 0.0) {
                *first += 1.0 - s2;
            }
        }
    }
    probs
}

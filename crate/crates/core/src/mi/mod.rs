//! Mutual-information machinery.
//!
//! Exact MI over finite joints, an InfoNCE lower bound with a learned critic,
//! a CLUB-style upper bound, and exact-enumeration verifiers for the two
//! inequalities behind the bottleneck objective. All values are natural-log
//! units (nats).

mod club;
mod infonce;
mod theory;

pub use club::{club_upper_bound, club_upper_bound_with_model, CondLogDensity, PtxModel};
pub use infonce::{
    fit_critic, infonce_estimate, infonce_in_batch_estimate, infonce_node, CriticFitConfig,
    CriticLeaves, CriticParams,
};
pub use theory::{
    lemma1_check, lemma2_check, phi, theory_check_report, Lemma1Outcome, Lemma1Trial,
    TheoryReport, TokenChannel,
};

use crate::error::{Error, Result};
use serde::Serialize;

/// Which estimator produced a value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Exact,
    InfoNce,
    Club,
}

/// An MI value in nats plus provenance.
#[derive(Debug, Clone, Serialize)]
pub struct MIEstimate {
    pub value: f64,
    pub kind: EstimatorKind,
    pub samples: usize,
    /// InfoNCE only: size of the log-sum-exp denominator set.
    pub denominator: Option<usize>,
}

impl MIEstimate {
    /// The estimate as an MI reading in nats.
    ///
    /// Exact and CLUB values are already in MI units. The raw InfoNCE value
    /// is a mean log-softmax-style score (a constant critic yields
    /// `-ln(denominator)`); the conventional MI reading adds `ln(denominator)`
    /// back, making a constant critic read 0 nats. With the positive included
    /// in the denominator this reading is a lower bound on the true MI.
    pub fn mi_nats(&self) -> f64 {
        match self.denominator {
            Some(k) => self.value + (k as f64).ln(),
            None => self.value,
        }
    }
}

/// A joint pmf over two finite supports, row-major `p(x, y)`.
#[derive(Debug, Clone)]
pub struct DiscreteJoint {
    nx: usize,
    ny: usize,
    pmf: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(nx: usize, ny: usize, pmf: Vec<f64>) -> Result<Self> {
        if nx == 0 || ny == 0 || pmf.len() != nx * ny {
            return Err(Error::InvalidPmf {
                reason: format!("table size {} does not match {nx}x{ny}", pmf.len()),
            });
        }
        if let Some(v) = pmf.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidPmf {
                reason: format!("negative or non-finite entry {v}"),
            });
        }
        let total: f64 = pmf.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidPmf {
                reason: format!("entries sum to {total}, expected 1 within 1e-12"),
            });
        }
        Ok(DiscreteJoint { nx, ny, pmf })
    }

    pub fn marginal_x(&self) -> Vec<f64> {
        let mut px = vec![0.0; self.nx];
        for x in 0..self.nx {
            for y in 0..self.ny {
                px[x] += self.pmf[x * self.ny + y];
            }
        }
        px
    }

    pub fn marginal_y(&self) -> Vec<f64> {
        let mut py = vec![0.0; self.ny];
        for x in 0..self.nx {
            for y in 0..self.ny {
                py[y] += self.pmf[x * self.ny + y];
            }
        }
        py
    }

    pub fn transposed(&self) -> DiscreteJoint {
        let mut pmf = vec![0.0; self.pmf.len()];
        for x in 0..self.nx {
            for y in 0..self.ny {
                pmf[y * self.nx + x] = self.pmf[x * self.ny + y];
            }
        }
        DiscreteJoint {
            nx: self.ny,
            ny: self.nx,
            pmf,
        }
    }
}

/// Shannon entropy of a pmf in nats, with `0 ln 0 := 0`.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.ln())
        .sum()
}

/// Exact `I(X;Y) = sum p(x,y) ln[p(x,y) / (p(x)p(y))]` by double sum,
/// with `0 ln 0 := 0`; tiny negative rounding is clamped to zero.
pub fn exact_mi(joint: &DiscreteJoint) -> MIEstimate {
    let px = joint.marginal_x();
    let py = joint.marginal_y();
    let mut mi = 0.0;
    for x in 0..joint.nx {
        for y in 0..joint.ny {
            let p = joint.pmf[x * joint.ny + y];
            if p > 0.0 {
                mi += p * (p / (px[x] * py[y])).ln();
            }
        }
    }
    MIEstimate {
        value: if mi > 0.0 { mi } else { 0.0 },
        kind: EstimatorKind::Exact,
        samples: joint.pmf.len(),
        denominator: None,
    }
}

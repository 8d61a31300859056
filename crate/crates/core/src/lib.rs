//! Desk-scale laboratory for information-theoretically regularized robust
//! text classification.
//!
//! The crate trains a tiny from-scratch transformer on a synthetic
//! synonym-structured corpus under two mutual-information regularizers — a
//! localized information-bottleneck penalty and an anchored-feature InfoNCE
//! alignment — and ships the adversarial attack/evaluation harness plus
//! exact-enumeration verifiers for the underlying inequalities.

pub mod attack;
pub mod container;
pub mod corpus;
pub mod diffcore;
pub mod error;
pub mod evaluator;
pub mod mi;
pub mod model;
pub mod optim;
pub mod regularizers;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};

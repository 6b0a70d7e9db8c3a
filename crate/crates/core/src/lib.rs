//! Continual test-time adaptation with a fast-slow controller and
//! shift-triggered model reset.
//!
//! The crate bundles a differentiable toy sequence classifier
//! ([`model`]), the unsupervised adaptation objective ([`objective`]),
//! update rules ([`optim`]), online adaptation controllers
//! ([`controllers`]), reset strategies ([`reset`]), a synthetic
//! multi-domain stream generator ([`stream`]) and an experiment harness
//! ([`harness`]).

// Negated float comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod controllers;
pub mod counters;
pub mod error;
pub mod harness;
pub mod model;
pub mod objective;
pub mod optim;
pub mod reset;
pub mod stream;

pub use counters::StepCounters;
pub use error::{Result, TtaError};
pub use model::{FeatureSequence, LogitMatrix, ParamSet, TokenSequence};

//! Federated Newton-type optimization workbench.
//!
//! Clients hold shards of a regularized logistic regression problem and
//! cooperate with a parameter server over a simulated, bit-accounted bus.
//! Implemented optimizers: FedNew (one ADMM pass per Newton step), its
//! quantized variant Q-FedNew, FedGD, Newton Zero and exact Newton.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod algorithms;
pub mod config;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod objective;
pub mod protocol;
pub mod quantizer;
pub mod synth;

pub use error::{Error, ParseError, Result};

//! Module-partitioned neural network training with restricted-length
//! backward error flow.
//!
//! A network is split into `K` local modules, each trained against its own
//! auxiliary classifier. Unlike fully decoupled greedy local learning, the
//! error signal of module `n+1` is allowed to flow back across the module
//! boundary into the last `l` basic units of module `n`, blended with the
//! local classifier error by a weighting factor `alpha`. `l = 0` recovers
//! greedy local learning; `K = 1` recovers ordinary backpropagation.
//!
//! The crate provides:
//!
//! - a reverse-mode tape over a small dense/convolutional op set
//!   ([`tape`], [`tensor`]),
//! - layer and network specifications with auxiliary classifier heads
//!   ([`nn`]),
//! - the partition and error-routing rules that define the training
//!   algorithm ([`router`]),
//! - losses, SGD with momentum, and stepwise learning-rate schedules
//!   ([`optim`]),
//! - a simulated multi-worker pipeline executor plus analytic memory and
//!   runtime cost models ([`engine`], [`cost`]),
//! - dataset ingestion and synthetic data ([`data`]),
//! - finite-difference and limit-case verification harnesses ([`verify`]),
//! - experiment configuration, metrics emission, and the command
//!   entry points used by the `backlink` binary ([`config`], [`metrics`],
//!   [`experiments`]).
//!
//! Numeric work is generic over [`Real`], instantiated at `f64` ("wide",
//! used by the verification oracles) and `f32` ("standard", used for
//! training runs).

pub mod config;
pub mod conv;
pub mod cost;
pub mod data;
pub mod engine;
pub mod experiments;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod norm;
pub mod optim;
pub mod params;
pub mod rng;
pub mod router;
pub mod tape;
pub mod tensor;
pub mod verify;

mod error;
mod real;

pub use error::{Error, Result};
pub use real::{Precision, Real};
pub use tensor::Tensor;

#[cfg(doctest)]
mod book;

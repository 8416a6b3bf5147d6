//! Token-level policy optimization (TLPO) against language confusion.
//!
//! The crate trains a small tabular autoregressive policy so that it stops
//! drifting out of the target language. Training only touches the first
//! position of a response where confusion shows up: the top-N next tokens at
//! that position are scored with a short lookahead rollout, weighted by their
//! old-policy probability, and pushed through a clipped surrogate with a KL
//! anchor to the initial policy.
//!
//! Module map:
//!
//! - [`policy`]: vocabulary, softmax policy table, sampling, checkpoints
//! - [`detector`]: script-based word classification and confusion points
//! - [`metrics`]: word and response pass rates
//! - [`exploration`]: candidate selection and lookahead rewards
//! - [`objective`]: advantages, clipped surrogate, KL estimator, gradients
//! - [`trainer`]: the outer training loop
//! - [`data`]: prompt corpora, synthetic worlds, file formats
//! - [`harness`]: the `gen`/`train`/`eval`/`ablate`/`shift` commands
//!
//! Data-parallel loops (rollouts, evaluation sampling, per-set gradients,
//! ablation variants) go through [`par`]. With the `parallel` feature they run
//! on rayon; without it, or with [`ExecMode::Sequential`], they run in order.
//! Results are identical either way.

pub mod data;
pub mod detector;
pub mod error;
pub mod exploration;
pub mod harness;
pub mod metrics;
pub mod objective;
pub mod par;
pub mod policy;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use par::ExecMode;

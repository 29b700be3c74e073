//! Adversarial sequence generation with leaked discriminator features.
//!
//! A CNN discriminator exposes its last-layer feature vector for every
//! partially generated sequence. A hierarchical generator consumes it: a
//! Manager LSTM turns features into unit goal vectors, and a Worker LSTM
//! combines an embedding of recent goals with per-token output vectors to
//! form next-token logits. Training alternates Manager and Worker updates
//! with discriminator updates, using Monte-Carlo rollouts, rank-based reward
//! rescaling and interleaved maximum-likelihood epochs.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod discriminator;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod generator;
pub mod lstm;
pub mod math;
pub mod metrics;
pub mod optim;
pub mod param;
pub mod rng;
pub mod training;

pub use error::{Error, Result};

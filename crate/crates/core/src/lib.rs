//! BLEU-reinforced conditional sequence GAN for sequence translation.
//!
//! The crate is `no_std` (it needs `alloc`) and carries every algorithmic
//! piece of the system:
//!
//! * [`numerics`]: dense `f64` tensors, a reverse-mode tape, optimizers,
//!   box clipping, gradient checks and the binary checkpoint encoding.
//! * [`corpus`]: vocabularies, synthetic parallel tasks, padding, batching
//!   and the line-oriented parallel text encoding.
//! * [`generator`]: bidirectional-GRU encoder with an additive-attention GRU
//!   decoder, used as the policy.
//! * [`discriminator`]: conditional CNN classifier with batch normalization
//!   and max-over-time pooling.
//! * [`bleu`]: smoothed sentence BLEU (the static reward) and corpus BLEU.
//! * [`reward`]: mixed rewards, Monte Carlo rollouts, the REINFORCE and
//!   teacher-forcing updates and an exact enumeration oracle.
//! * [`trainer`]: pretraining, the adversarial loop, the MRT harness and
//!   parameter sweeps.
//! * [`config`]: the flat `key = value` experiment configuration.
//!
//! File and process IO live in the companion `brcsgan` crate.
#![no_std]

extern crate alloc;

pub mod bleu;
pub mod config;
pub mod corpus;
pub mod discriminator;
mod error;
pub mod generator;
pub mod numerics;
pub mod reward;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};

/// Integer token id.
pub type Token = u32;

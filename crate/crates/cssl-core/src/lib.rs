//! Continual self-supervised pretraining over two imaging domains.
//!
//! The pipeline has three stages plus a supervised evaluation phase:
//!
//! 1. **Pretrain** a small masked-autoencoder vision transformer on the
//!    first-domain dataset ([`train::pretrain_stage1`]).
//! 2. **Build a rehearsal buffer** from the first domain by clustering its
//!    embeddings, ranking clusters by distance to the second domain's class
//!    center, and drawing samples group-by-group ([`rehearsal`]).
//! 3. **Continually pretrain** a second model on the new domain plus the
//!    buffer, using element-wise mixup and stop-gradient feature distillation
//!    against the frozen first model ([`train::continual_train_stage3`]).
//! 4. **Fine-tune and evaluate** the encoder on a labeled task with
//!    ACC / AUC / F1 reporting ([`finetune`], [`metrics`]).
//!
//! Everything is deterministic given explicit seeds, runs at desk scale on
//! synthetic two-domain data ([`data`]), and exposes each step through the
//! `cssl` command-line binary.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod finetune;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod rehearsal;
pub mod rng;
pub mod schedule;
pub mod train;

pub use error::{Error, Result};

//! State-aware adaptation of frozen patch-reconstruction backbones for
//! multivariate time-series anomaly detection.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`autograd`], [`nn`]: dense matrices, a reverse-mode tape
//!   and small perceptrons that every trainable module is built from;
//!   [`optim`] holds SGD and Adam.
//! * [`dataset`]: the series data model, CSV ingestion, the synthetic
//!   state-conditioned generator, pseudo-state binning and windowing.
//! * [`state_encoder`], [`temporal_encoder`]: identity encodings, memory
//!   routing and patch-level fusion of state embeddings.
//! * [`backbone`]: the channel-independent reconstruction model that is
//!   pretrained and then frozen.
//! * [`cond_adapter`]: SVD factors of frozen weights, state-conditioned
//!   generation of the mixing matrix and the LoRA baseline.
//! * [`matching`]: numeral/state contrastive alignment and patch scores.
//! * [`pipeline`]: fine-tuning, checkpointing and fused scoring.
//! * [`metrics`]: AUC, range-AUC and VUS.
//! * [`experiment`]: end-to-end runs, ablations and sweeps.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod backbone;
pub mod cond_adapter;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod matching;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod state_encoder;
pub mod temporal_encoder;
pub mod tensor;

pub use error::{Result, StarError};
pub use tensor::Mat;

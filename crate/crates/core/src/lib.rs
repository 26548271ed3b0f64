//! Class-incremental learning over frozen vision-language embeddings.
//!
//! A small adapter is trained on top of precomputed image embeddings and scored
//! against fixed per-class text embeddings. Between tasks, drift-ranked
//! parameter retention keeps the previous value of every parameter that moved
//! little, so only the largest updates of each task survive.
//!
//! Modules, bottom-up:
//!
//! - [`linalg`]: dense f64 kernels
//! - [`embedding`]: `CEM1` containers, manifests, task splits
//! - [`adapters`]: identity / linear / self-attention / MLP adapters and `CADP` checkpoints
//! - [`objective`]: logits, cross-entropy, distillation, probe loss, gradients
//! - [`optim`]: SGD, Adam, cosine schedule
//! - [`retention`]: drift-ranked and random parameter retention
//! - [`memory`]: exemplar buffer
//! - [`scenario`]: the incremental protocol and metrics
//! - [`baselines`]: linear probe head and baseline entry point
//! - [`synth`]: synthetic benchmark data

pub mod adapters;
pub mod baselines;
pub mod embedding;
pub mod error;
pub mod linalg;
pub mod memory;
pub mod objective;
pub mod optim;
pub mod retention;
pub mod rng;
pub mod scenario;
pub mod synth;

pub use error::{Error, Result};

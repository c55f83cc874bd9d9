//! Multi-epoch training of embedding + MLP click-through-rate models with
//! per-epoch embedding re-initialization.
//!
//! The crate is organized bottom-up: [`numerics`] (dense tensors and seeds),
//! [`data`] (sample logs, synthetic generation, splits), [`model`] (embedding
//! banks, MLP, forward and backward), [`optim`] (dense and sparse update
//! rules), [`methods`] (training strategies and the plan executor),
//! [`metrics`], [`persist`] (checkpoints and metric logs) and [`cli`].

pub mod cli;
pub mod data;
pub mod error;
pub mod methods;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod persist;

pub use error::{Error, Result};

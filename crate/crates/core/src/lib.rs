//! A from-scratch hybrid sequential recommender: a self-attentive item-sequence
//! encoder whose embeddings are projected into a small causal language model,
//! with the data, metric and baseline harness around it.

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod gradcheck;
pub mod llm;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod orchestrate;
pub mod param;
pub mod rng;
pub mod sasrec;
pub mod synthetic;
pub mod system;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
pub use param::{Component, Gradients, ParamId, ParamStore};
pub use rng::RngStream;
pub use tape::{Tape, Var};
pub use tensor::{Mode, Real, Tensor};

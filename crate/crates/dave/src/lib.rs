//! Dual adversarial variational embeddings for robust top-k recommendation
//! from implicit feedback.
//!
//! Two VAEs infer per-user and per-item Gaussian embedding distributions from
//! interaction vectors, auxiliary discriminators regularize the inference
//! networks adversarially, and an MLP scores user-item pairs on the
//! element-wise product of sampled embeddings.

pub mod diffcore;
pub mod rng;

pub mod data;
pub mod model;
pub mod objectives;
pub mod training;

pub mod eval;

pub mod config;

pub mod cli;

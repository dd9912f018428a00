//! Seeded experiment protocols over synthetic data, and their on-disk
//! artifacts.
//!
//! Every protocol is a pure function of its [`ExperimentConfig`]: a run seed
//! `s` drives the generator, the operators, the corruption, the split, the
//! initialization and the minibatch order through separate RNG streams.

mod artifacts;
mod config;
mod pipeline;
mod run;

pub use artifacts::*;
pub use config::*;
pub use pipeline::*;
pub use run::*;

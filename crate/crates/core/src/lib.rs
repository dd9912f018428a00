//! Weakly supervised representation learning from multiple noisy labeling
//! operators.
//!
//! A shared encoder feeds one softmax head per supervision operator. Training
//! fits each head to its operator's pseudo-labels, penalizes disagreement
//! between heads, and smooths predictions over an ontology graph through its
//! Laplacian. The crate also ships a seeded synthetic data generator, the
//! evaluation metrics, and the experiment protocols that compare variants.

pub mod confusion;
pub mod error;
pub mod evalmetrics;
pub mod experiments;
pub mod model;
pub mod objective;
pub mod ontology;
pub mod rng;
pub mod supervision;
pub mod synthgen;

pub use confusion::{ConfusionMatrix, ConfusionSpec};
pub use error::{Error, Result};
pub use evalmetrics::{EvalReport, MetricSummary, Metrics};
pub use model::{Activation, ModelConfig, ModelDims, ModelParams};
pub use objective::{AgreementKind, LossBreakdown, LossConfig, TrainOutcome};
pub use ontology::{LabelGraph, Laplacian};
pub use supervision::{OperatorSpec, ViewSet};
pub use synthgen::{Dataset, GenConfig, PatientRecord, SiteSpec};

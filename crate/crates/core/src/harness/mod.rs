//! Experiment orchestration: configuration, demonstrations, the query loop,
//! baselines, evaluation, and sweeps.

pub mod config;
pub mod demos;
pub mod eval;
pub mod evaluator;
pub mod experiment;
pub mod sweep;

pub use config::{DomainKind, ExperimentConfig, Method, OracleKind};
pub use evaluator::{Evaluation, Evaluator};
pub use experiment::{Experiment, MetricRecord, PendingRound, Query, RunEvent, RunReport, VisitStats};

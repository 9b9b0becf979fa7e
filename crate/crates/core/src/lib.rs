//! Causal effects of on-demand interventions in sequential learning logs.
//!
//! The crate builds treated / control / holdout samples from an event log,
//! trains an LSTM knowledge tracer on the holdout to produce pre-treatment
//! knowledge features, and estimates per-unit and average effects with honest
//! cluster-robust causal forests and doubly robust AIPW scores. A simulator
//! with known potential outcomes backs every estimator with an oracle.

pub mod analysis;
pub mod checkpoint;
pub mod dkt;
pub mod estimators;
pub mod events;
pub mod forest;
pub mod pipeline;
pub mod sample;
pub mod seeds;
pub mod sim;

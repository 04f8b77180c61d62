//! Configuration-driven Monte Carlo experiments for the `blind-mimo` engine.
//!
//! A TOML file describes the link ([`config::ExperimentConfig`]); the runner
//! draws one scene per (SNR point, trial), scores PVD and the pilot/oracle
//! LMMSE references on it and writes one CSV row per method.

pub mod config;
pub mod experiment;
pub mod output;
pub mod sweep;

pub use config::ExperimentConfig;
pub use experiment::{run_experiment, Method, Prepared, TrialRow};

//! Batch experiment harness: configuration, Monte Carlo orchestration,
//! CSV/JSON reporting, and the closed-form oracle suite.

pub mod config;
pub mod mc;
pub mod oracle;
pub mod report;

pub use config::{EstimateConfig, EstimatorId, ExperimentConfig, SirPopulation};
pub use mc::{run_estimate, run_experiment, McRow, McSummary, ParamEstimate, ReplicateRecord};
pub use oracle::{run_oracle_suite, OracleCheck};
pub use report::report;

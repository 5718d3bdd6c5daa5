//! Run orchestration: configuration, training, evaluation, scenario files,
//! tree reports and the analytic compute model.

mod config;
mod eval;
mod flops;
mod ingest;
mod report;
mod train;

pub use config::{Algorithm, RunConfig};
pub use eval::{evaluate, mean_std, run_episode, Actor, Episode, EvalSummary, OracleActor, PolicyActor};
pub use flops::{ComputeProfile, FlopsReport};
pub use ingest::{ingest_scenarios, ingest_str, scenario_to_json, write_scenarios, Dictionary, IngestIssue, IngestReport, ScenarioText};
pub use report::{emit_tree_report, DepthStats, TreeReport};
pub use train::{
    collect, greedy_eval, load_checkpoint, pretrain_format, sample_tree, setup, train, train_with_cancel, Collected, MetricsRow, RunSetup,
    TrainOutcome,
};

use std::sync::Arc;

use crate::env::{Env, EnvConfig, Scenario};
use crate::model::Checkpoint;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
    #[error("numeric failure at step {step}: {message}")]
    Numeric { step: u64, message: String, checkpoint: Option<String> },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("cancelled")]
    Cancelled,
}

impl RunError {
    /// Process exit code: 1 for configuration/input problems, 2 for numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Numeric { .. } => 2,
            _ => 1,
        }
    }
}

impl From<crate::model::CheckpointError> for RunError {
    fn from(e: crate::model::CheckpointError) -> Self {
        RunError::Input(e.to_string())
    }
}

/// Accuracy of a saved policy; `temperature = 0` plays greedily.
pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    scenarios: &[Scenario],
    runs: usize,
    temperature: f64,
    seed: u64,
    env_config: EnvConfig,
) -> Result<EvalSummary, RunError> {
    if runs == 0 {
        return Err(RunError::Config("runs must be >= 1".into()));
    }
    let policy = checkpoint.policy()?;
    let env = Env::new(checkpoint.vocab, env_config);
    let scenarios: Vec<Arc<Scenario>> = scenarios.iter().cloned().map(Arc::new).collect();
    evaluate(&PolicyActor { policy: &policy, temperature }, &env, &scenarios, runs, seed).map_err(|e| RunError::Input(e.to_string()))
}

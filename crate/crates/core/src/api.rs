//! Request and response bodies shared by the service and its clients.

use serde::{Deserialize, Serialize};

use crate::env::EnvConfig;
use crate::model::Checkpoint;
use crate::runner::{EvalSummary, IngestIssue, MetricsRow, RunError, TreeReport};
use crate::tree::TreeDump;

/// Run configurations travel as the flat `key = value` text of a config file,
/// so infinite thresholds survive the trip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRequest {
    pub config: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainAccepted {
    pub job: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTreeRequest {
    pub config: String,
    pub seed: u64,
    /// Grow with trained weights instead of the run's starting models.
    #[serde(default)]
    pub checkpoint: Option<Checkpoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTreeResponse {
    pub tree: TreeDump,
    pub report: TreeReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateRequest {
    pub checkpoint: Checkpoint,
    /// Scenario file contents (JSON lines).
    pub scenarios: String,
    pub runs: usize,
    /// 0 plays greedily.
    pub temperature: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub env: EnvConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateResponse {
    pub summary: EvalSummary,
    /// Scenario lines that were skipped.
    pub issues: Vec<IngestIssue>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Running,
    Succeeded,
    Failed,
    Cancelled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub job: u64,
    pub state: JobState,
    pub steps_done: u64,
    pub steps_total: u64,
    pub latest: Option<MetricsRow>,
    pub final_eval: Option<EvalSummary>,
    pub error: Option<ErrorBody>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Config,
    Input,
    Numeric,
    NotFound,
    Cancelled,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: ErrorKind,
    pub message: String,
    /// Diagnostic checkpoint written when a run aborted on a numeric failure.
    #[serde(default)]
    pub checkpoint: Option<String>,
}

impl ErrorBody {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        ErrorBody { kind, message: message.into(), checkpoint: None }
    }

    /// Process exit code for a command that failed with this error.
    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Numeric => 2,
            _ => 1,
        }
    }
}

impl From<&RunError> for ErrorBody {
    fn from(e: &RunError) -> Self {
        let kind = match e {
            RunError::Config(_) => ErrorKind::Config,
            RunError::Input(_) => ErrorKind::Input,
            RunError::Numeric { .. } => ErrorKind::Numeric,
            RunError::Io(_) => ErrorKind::Internal,
            RunError::Cancelled => ErrorKind::Cancelled,
        };
        let checkpoint = match e {
            RunError::Numeric { checkpoint, .. } => checkpoint.clone(),
            _ => None,
        };
        ErrorBody { kind, message: e.to_string(), checkpoint }
    }
}

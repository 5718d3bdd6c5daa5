//! Typed client for the atpo HTTP service.

use atpo_core::api::{
    ErrorBody, EvaluateRequest, EvaluateResponse, JobStatus, SampleTreeRequest, SampleTreeResponse, TrainAccepted, TrainRequest,
};
use atpo_core::model::Checkpoint;
use atpo_core::runner::{ComputeProfile, FlopsReport, MetricsRow};
use reqwest::{Method, RequestBuilder, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    #[error("server returned {status}: {}", body.message)]
    Api { status: StatusCode, body: ErrorBody },
    #[error("server returned {status} with an unreadable body: {text}")]
    Unexpected { status: StatusCode, text: String },
}

impl ClientError {
    /// Process exit code for a command that failed with this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            ClientError::Api { body, .. } => body.exit_code(),
            _ => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Client { base: base.into().trim_end_matches('/').to_string(), http: reqwest::Client::new() }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn request(&self, method: Method, path: &str) -> RequestBuilder {
        self.http.request(method, format!("{}{path}", self.base))
    }

    async fn send<T: DeserializeOwned>(req: RequestBuilder) -> Result<T, ClientError> {
        let resp = req.send().await?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        let text = resp.text().await?;
        match serde_json::from_str::<ErrorBody>(&text) {
            Ok(body) => Err(ClientError::Api { status, body }),
            Err(_) => Err(ClientError::Unexpected { status, text }),
        }
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        Self::send(self.request(Method::POST, path).json(body)).await
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        Self::send(self.request(Method::GET, path)).await
    }

    pub async fn health(&self) -> Result<(), ClientError> {
        let resp = self.request(Method::GET, "/healthz").send().await?;
        let status = resp.status();
        if status.is_success() {
            Ok(())
        } else {
            Err(ClientError::Unexpected { status, text: resp.text().await? })
        }
    }

    pub async fn flops(&self, profile: &ComputeProfile) -> Result<FlopsReport, ClientError> {
        self.post("/v1/flops", profile).await
    }

    pub async fn sample_tree(&self, req: &SampleTreeRequest) -> Result<SampleTreeResponse, ClientError> {
        self.post("/v1/sample-tree", req).await
    }

    pub async fn evaluate(&self, req: &EvaluateRequest) -> Result<EvaluateResponse, ClientError> {
        self.post("/v1/evaluate", req).await
    }

    /// Starts a training job from config file text.
    pub async fn train(&self, config: &str) -> Result<u64, ClientError> {
        let accepted: TrainAccepted = self.post("/v1/train", &TrainRequest { config: config.to_string() }).await?;
        Ok(accepted.job)
    }

    pub async fn job(&self, id: u64) -> Result<JobStatus, ClientError> {
        self.get(&format!("/v1/jobs/{id}")).await
    }

    /// Metrics rows of job `id` starting at row index `from`.
    pub async fn metrics(&self, id: u64, from: usize) -> Result<Vec<MetricsRow>, ClientError> {
        self.get(&format!("/v1/jobs/{id}/metrics?from={from}")).await
    }

    pub async fn checkpoint(&self, id: u64) -> Result<Checkpoint, ClientError> {
        self.get(&format!("/v1/jobs/{id}/checkpoint")).await
    }

    pub async fn cancel(&self, id: u64) -> Result<JobStatus, ClientError> {
        Self::send(self.request(Method::DELETE, &format!("/v1/jobs/{id}"))).await
    }
}

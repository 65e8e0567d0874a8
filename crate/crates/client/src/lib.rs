//! Thin async client for the droplab job service.

use std::time::Duration;

use droplab_core::jobs::{ErrorBody, JobRecord, JobResult, JobSpec, JobState};
use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde::Deserialize;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Http(#[from] reqwest::Error),

    /// The service answered with an error status.
    #[error("{status}: {} ({})", body.message, body.code)]
    Api { status: StatusCode, body: ErrorBody },

    /// The job ran and failed.
    #[error("job failed: {} ({})", .0.message, .0.code)]
    Job(ErrorBody),

    #[error("timed out waiting for job {0}")]
    Timeout(String),
}

impl ClientError {
    /// Error as a wire-format body, for printing.
    pub fn body(&self) -> ErrorBody {
        match self {
            ClientError::Api { body, .. } | ClientError::Job(body) => body.clone(),
            ClientError::Http(e) => ErrorBody { code: "transport".into(), message: e.to_string() },
            ClientError::Timeout(_) => ErrorBody { code: "timeout".into(), message: self.to_string() },
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Deserialize)]
struct Envelope {
    error: ErrorBody,
}

#[derive(Deserialize)]
struct Submitted {
    id: String,
}

#[derive(Clone, Debug)]
pub struct Client {
    base: String,
    http: reqwest::Client,
    poll: Duration,
}

impl Client {
    /// `base` is e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        let base = base.into().trim_end_matches('/').to_string();
        Client { base, http: reqwest::Client::new(), poll: Duration::from_millis(100) }
    }

    pub fn with_poll_interval(mut self, poll: Duration) -> Self {
        self.poll = poll;
        self
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn decode<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        let text = resp.text().await?;
        let body = serde_json::from_str::<Envelope>(&text)
            .map(|e| e.error)
            .unwrap_or(ErrorBody { code: "http".into(), message: text });
        Err(ClientError::Api { status, body })
    }

    pub async fn health(&self) -> Result<serde_json::Value> {
        Self::decode(self.http.get(format!("{}/health", self.base)).send().await?).await
    }

    /// Queue a job; returns its id.
    pub async fn submit(&self, spec: &JobSpec) -> Result<String> {
        let resp = self.http.post(format!("{}/v1/jobs", self.base)).json(spec).send().await?;
        Ok(Self::decode::<Submitted>(resp).await?.id)
    }

    pub async fn job(&self, id: &str) -> Result<JobRecord> {
        Self::decode(self.http.get(format!("{}/v1/jobs/{id}", self.base)).send().await?).await
    }

    pub async fn jobs(&self) -> Result<Vec<JobRecord>> {
        Self::decode(self.http.get(format!("{}/v1/jobs", self.base)).send().await?).await
    }

    /// Poll until the job finishes or `timeout` passes.
    pub async fn wait(&self, id: &str, timeout: Option<Duration>) -> Result<JobRecord> {
        let start = tokio::time::Instant::now();
        loop {
            let rec = self.job(id).await?;
            if rec.state.is_finished() {
                return Ok(rec);
            }
            if timeout.is_some_and(|t| start.elapsed() >= t) {
                return Err(ClientError::Timeout(id.into()));
            }
            tokio::time::sleep(self.poll).await;
        }
    }

    /// Submit, wait, and unwrap the result.
    pub async fn run(&self, spec: &JobSpec) -> Result<JobResult> {
        let id = self.submit(spec).await?;
        let rec = self.wait(&id, None).await?;
        match (rec.state, rec.result, rec.error) {
            (JobState::Succeeded, Some(r), _) => Ok(r),
            (_, _, Some(e)) => Err(ClientError::Job(e)),
            _ => Err(ClientError::Job(ErrorBody { code: "internal".into(), message: "job finished without a result".into() })),
        }
    }
}

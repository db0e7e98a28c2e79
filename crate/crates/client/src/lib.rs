//! Async client for the catstyle HTTP service.

use std::time::Duration;

use reqwest::{Response, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use catstyle_core::api::{
    ApiError, EmbedRequest, EmbedResponse, EvalRequest, EvalResponse, Health, JobCreated, JobStatus,
    TrainRequest,
};

#[derive(Debug, Error)]
pub enum ClientError {
    /// The service answered with a structured error.
    #[error("{status}: {error}")]
    Api { status: StatusCode, error: ApiError },
    #[error("transport: {0}")]
    Transport(#[from] reqwest::Error),
}

impl ClientError {
    pub fn api(&self) -> Option<&ApiError> {
        match self {
            ClientError::Api { error, .. } => Some(error),
            ClientError::Transport(_) => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Clone, Debug)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

async fn decode<T: DeserializeOwned>(resp: Response) -> Result<T> {
    let status = resp.status();
    if status.is_success() {
        return Ok(resp.json().await?);
    }
    let text = resp.text().await?;
    let error = serde_json::from_str(&text).unwrap_or_else(|_| {
        ApiError::new(
            catstyle_core::api::ErrorKind::Internal,
            format!("unexpected response: {text}"),
        )
    });
    Err(ClientError::Api { status, error })
}

impl Client {
    /// `base` is e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        decode(
            self.http
                .post(format!("{}{path}", self.base))
                .json(body)
                .send()
                .await?,
        )
        .await
    }

    pub async fn health(&self) -> Result<Health> {
        decode(self.http.get(format!("{}/health", self.base)).send().await?).await
    }

    pub async fn start_train(&self, req: &TrainRequest) -> Result<JobCreated> {
        self.post("/v1/train", req).await
    }

    pub async fn job(&self, id: u64) -> Result<JobStatus> {
        decode(
            self.http
                .get(format!("{}/v1/jobs/{id}", self.base))
                .send()
                .await?,
        )
        .await
    }

    pub async fn cancel(&self, id: u64) -> Result<JobStatus> {
        decode(
            self.http
                .delete(format!("{}/v1/jobs/{id}", self.base))
                .send()
                .await?,
        )
        .await
    }

    /// Polls a job until it finishes, calling `on_status` after every poll.
    pub async fn wait(
        &self,
        id: u64,
        every: Duration,
        mut on_status: impl FnMut(&JobStatus),
    ) -> Result<JobStatus> {
        loop {
            let s = self.job(id).await?;
            on_status(&s);
            if s.state.is_finished() {
                return Ok(s);
            }
            tokio::time::sleep(every).await;
        }
    }

    pub async fn eval(&self, req: &EvalRequest) -> Result<EvalResponse> {
        self.post("/v1/eval", req).await
    }

    pub async fn embed(&self, req: &EmbedRequest) -> Result<EmbedResponse> {
        self.post("/v1/embed", req).await
    }
}

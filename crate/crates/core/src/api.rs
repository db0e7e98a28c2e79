//! Request/response types of the HTTP service and the blocking operations
//! behind them. Paths are interpreted on the machine running the service.

use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, Checkpoint};
use crate::config::ExperimentConfig;
use crate::data::{load_dataset, Dataset};
use crate::embed::{plot_dump, EmbeddingDump};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Evaluation};
use crate::trainer::{self, LogRecord, ProgressFn, TrainOptions, FINAL_CHECKPOINT};

pub const EMBEDDING_CSV: &str = "embedding.csv";
pub const EMBEDDING_PNG: &str = "embedding.png";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRequest {
    /// Full experiment config as TOML.
    pub config_toml: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub strict_deterministic: bool,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobCreated {
    pub job_id: u64,
    pub config_hash: String,
    pub total_steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Running,
    Succeeded,
    Failed,
    Cancelled,
}

impl JobState {
    pub fn is_finished(self) -> bool {
        self != JobState::Running
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub steps: usize,
    pub critic_updates: usize,
    pub checkpoint: PathBuf,
    pub evaluation: Option<Evaluation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub job_id: u64,
    pub state: JobState,
    pub config_hash: String,
    pub total_steps: usize,
    /// Metrics-log records produced so far.
    pub log: Vec<LogRecord>,
    #[serde(default)]
    pub result: Option<TrainSummary>,
    #[serde(default)]
    pub error: Option<ApiError>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub checkpoint: PathBuf,
    /// When given, the checkpoint must match this config's architecture and
    /// the config decides which data is evaluated.
    #[serde(default)]
    pub config_toml: Option<String>,
    /// Replaces the config's `data_path`.
    #[serde(default)]
    pub data_path: Option<PathBuf>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub kmeans: bool,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResponse {
    pub config_hash: String,
    pub checkpoint_step: usize,
    pub evaluation: Evaluation,
    /// Argmax cluster of every image, in dataset order.
    pub assignments: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub checkpoint: PathBuf,
    #[serde(default)]
    pub config_toml: Option<String>,
    #[serde(default)]
    pub data_path: Option<PathBuf>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub plot: bool,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub config_hash: String,
    pub rows: usize,
    pub latent_columns: usize,
    pub dump: PathBuf,
    #[serde(default)]
    pub plot: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    InvalidRequest,
    NotFound,
    ArchitectureMismatch,
    BadData,
    NonFinite,
    Cancelled,
    Internal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub kind: ErrorKind,
    pub message: String,
    /// Architecture hashes, for [`ErrorKind::ArchitectureMismatch`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub found: Option<String>,
}

impl ApiError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
            expected: None,
            found: None,
        }
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for ApiError {}

impl From<&Error> for ApiError {
    fn from(e: &Error) -> Self {
        let kind = match e {
            Error::ConfigParse { .. }
            | Error::InvalidConfig { .. }
            | Error::UnknownDataset { .. }
            | Error::InvalidArgument(_)
            | Error::UnsupportedImageSize { .. } => ErrorKind::InvalidRequest,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => ErrorKind::NotFound,
            Error::BadData { .. } | Error::Shape(_) | Error::Checkpoint(_) => ErrorKind::BadData,
            Error::ArchitectureMismatch { .. } => ErrorKind::ArchitectureMismatch,
            Error::NonFinite(_) => ErrorKind::NonFinite,
            Error::Cancelled(_) => ErrorKind::Cancelled,
            Error::Io { .. } => ErrorKind::Internal,
        };
        let mut out = ApiError::new(kind, e.to_string());
        if let Error::ArchitectureMismatch { expected, found } = e {
            out.expected = Some(expected.clone());
            out.found = Some(found.clone());
        }
        out
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError::from(&e)
    }
}

/// Parses, applies the seed override and validates a request config.
pub fn request_config(config_toml: &str, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_toml_str(config_toml)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// A loaded checkpoint plus the config and data it should be run on.
pub struct Prepared {
    pub checkpoint: Checkpoint,
    pub config: ExperimentConfig,
    pub data: Dataset,
}

pub fn prepare(
    checkpoint: &Path,
    config_toml: Option<&str>,
    data_path: Option<&Path>,
    seed: Option<u64>,
) -> Result<Prepared> {
    let given = config_toml.map(|t| request_config(t, seed)).transpose()?;
    let ckpt = load_checkpoint(checkpoint, given.as_ref())?;
    let mut config = given.unwrap_or_else(|| {
        let mut c = ckpt.config.clone();
        if let Some(s) = seed {
            c.seed = s;
        }
        c
    });
    if let Some(p) = data_path {
        config.data_path = p.to_path_buf();
    }
    config.validate()?;
    let data = load_dataset(&config)?;
    Ok(Prepared {
        checkpoint: ckpt,
        config,
        data,
    })
}

pub fn run_eval(req: &EvalRequest) -> Result<EvalResponse> {
    let p = prepare(
        &req.checkpoint,
        req.config_toml.as_deref(),
        req.data_path.as_deref(),
        req.seed,
    )?;
    let labels = p.data.labels.as_deref().ok_or_else(|| {
        Error::InvalidArgument("dataset has no labels; use embed to inspect clusters".into())
    })?;
    let hash = p.config.hash();
    let evaluation = evaluate(
        &p.checkpoint.models.encoder,
        &p.data.images,
        labels,
        p.config.grayscale,
        req.kmeans,
        p.config.seed,
        &hash,
    )?;
    if let Some(dir) = &req.out_dir {
        evaluation.write(dir)?;
    }
    Ok(EvalResponse {
        config_hash: hash,
        checkpoint_step: p.checkpoint.step,
        assignments: evaluation.assignments.clone(),
        evaluation,
    })
}

pub fn run_embed(req: &EmbedRequest) -> Result<EmbedResponse> {
    let p = prepare(
        &req.checkpoint,
        req.config_toml.as_deref(),
        req.data_path.as_deref(),
        req.seed,
    )?;
    let hash = p.config.hash();
    let dump = EmbeddingDump::from_encoder(&p.checkpoint.models.encoder, &p.data, p.config.grayscale, &hash);
    std::fs::create_dir_all(&req.out_dir).map_err(|e| Error::io(&req.out_dir, e))?;
    let csv = req.out_dir.join(EMBEDDING_CSV);
    dump.write_csv(&csv)?;
    let plot = if req.plot {
        let png = req.out_dir.join(EMBEDDING_PNG);
        plot_dump(&dump, &png, p.config.seed)?;
        Some(png)
    } else {
        None
    };
    Ok(EmbedResponse {
        config_hash: hash,
        rows: dump.len(),
        latent_columns: dump.latent_dim(),
        dump: csv,
        plot,
    })
}

/// Loads the data named by `cfg` and trains on it, writing into `out_dir`.
pub fn run_train(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    strict_deterministic: bool,
    cancel: Option<Arc<AtomicBool>>,
    on_record: Option<ProgressFn>,
) -> Result<TrainSummary> {
    let data = load_dataset(cfg)?;
    let out = trainer::train(
        cfg,
        &data,
        TrainOptions {
            out_dir: Some(out_dir.to_path_buf()),
            strict_deterministic,
            cancel,
            on_record,
        },
    )?;
    Ok(TrainSummary {
        config_hash: cfg.hash(),
        steps: out.state.step,
        critic_updates: out.state.critic_updates,
        checkpoint: out_dir.join(FINAL_CHECKPOINT),
        evaluation: out.final_eval,
    })
}

//! `catstyle` command line. Every command talks to the HTTP service: the one
//! given by `--server`, or a private instance started in-process.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use catstyle_client::{Client, ClientError};
use catstyle_core::api::{EmbedRequest, ErrorKind, EvalRequest, JobState, TrainRequest};
use catstyle_core::config::{load_config, DATA_PATH_ENV};
use catstyle_core::eval::Evaluation;

#[derive(Parser)]
#[command(
    name = "catstyle",
    version,
    about = "Deep clustering with category and style latents"
)]
struct Cli {
    /// Base URL of a running service; without it an in-process one is used.
    #[arg(long, global = true, env = "CATSTYLE_SERVER")]
    server: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file.
    Train(TrainArgs),
    /// Score a checkpoint against ground-truth labels.
    Eval(EvalArgs),
    /// Dump latent codes (and optionally a t-SNE plot) for a checkpoint.
    Embed(EmbedArgs),
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

fn existing_file(s: &str) -> Result<PathBuf, String> {
    let p = PathBuf::from(s);
    if p.is_file() {
        Ok(p)
    } else {
        Err(format!("no such file: {s}"))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = existing_file)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Produce batches on the training thread only.
    #[arg(long)]
    strict_deterministic: bool,
    /// Defaults to `runs/<dataset>-<config hash>`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_parser = existing_file)]
    checkpoint: PathBuf,
    /// Config to evaluate with; its architecture must match the checkpoint.
    #[arg(long, value_parser = existing_file)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also score k-means on Z, Z_c and Z_s.
    #[arg(long)]
    kmeans: bool,
    /// Defaults to `eval/` next to the checkpoint.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long, value_parser = existing_file)]
    checkpoint: PathBuf,
    #[arg(long, value_parser = existing_file)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write a 2-D t-SNE scatter as PNG.
    #[arg(long)]
    plot: bool,
    /// Defaults to `embed/` next to the checkpoint.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

/// Failure with the exit code it maps to.
struct Failure(u8, String);

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        match e.api() {
            Some(api) if api.kind == ErrorKind::ArchitectureMismatch => Failure(
                3,
                format!(
                    "{}\n  expected architecture hash: {}\n  checkpoint architecture hash: {}",
                    api.message,
                    api.expected.as_deref().unwrap_or("?"),
                    api.found.as_deref().unwrap_or("?")
                ),
            ),
            _ => Failure(1, e.to_string()),
        }
    }
}

impl From<catstyle_core::Error> for Failure {
    fn from(e: catstyle_core::Error) -> Self {
        Failure(1, e.to_string())
    }
}

fn absolute(p: &Path) -> Result<PathBuf, Failure> {
    std::path::absolute(p).map_err(|e| Failure(1, format!("{}: {e}", p.display())))
}

fn data_path_override() -> Option<PathBuf> {
    std::env::var_os(DATA_PATH_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .and_then(|p| std::path::absolute(p).ok())
}

/// Config file contents with the data-path override applied and made absolute.
fn config_toml(path: &Path) -> Result<String, Failure> {
    let mut cfg = load_config(path)?;
    cfg.data_path = absolute(&cfg.data_path)?;
    Ok(cfg.to_toml_string())
}

fn beside(checkpoint: &Path, name: &str) -> PathBuf {
    checkpoint.parent().unwrap_or(Path::new(".")).join(name)
}

fn print_evaluation(ev: &Evaluation) {
    println!("{:<12} {:>8} {:>8} {:>8}", "method", "ACC", "NMI", "ARI");
    for r in &ev.reports {
        println!("{:<12} {:>8.4} {:>8.4} {:>8.4}", r.method, r.acc, r.nmi, r.ari);
    }
}

async fn train(client: &Client, a: TrainArgs) -> Result<(), Failure> {
    let toml = config_toml(&a.config)?;
    let cfg = catstyle_core::api::request_config(&toml, a.seed)?;
    let out_dir = match a.out_dir {
        Some(d) => d,
        None => PathBuf::from("runs").join(format!("{}-{}", cfg.dataset_name, cfg.hash())),
    };
    let out_dir = absolute(&out_dir)?;
    let job = client
        .start_train(&TrainRequest {
            config_toml: toml,
            seed: a.seed,
            strict_deterministic: a.strict_deterministic,
            out_dir: out_dir.clone(),
        })
        .await?;
    println!(
        "config {} seed {} -> {}",
        job.config_hash,
        cfg.seed,
        out_dir.display()
    );
    let mut shown = 0;
    let status = client
        .wait(job.job_id, Duration::from_millis(500), |s| {
            for r in &s.log[shown..] {
                let metrics = match (r.acc, r.nmi, r.ari) {
                    (Some(acc), Some(nmi), Some(ari)) => format!("  acc {acc:.4} nmi {nmi:.4} ari {ari:.4}"),
                    _ => String::new(),
                };
                println!(
                    "step {:>6}/{}  l_mi {:.4} l_aug {:.4} l_adv_q {:.4} l_c {:.4} -L_C {:.4}{metrics}",
                    r.step, s.total_steps, r.l_mi, r.l_aug, r.l_adv_q, r.l_c, r.neg_critic_loss
                );
            }
            shown = s.log.len();
        })
        .await?;
    match status.state {
        JobState::Succeeded => {
            let res = status.result.expect("finished job has a result");
            println!("checkpoint {}", res.checkpoint.display());
            if let Some(ev) = &res.evaluation {
                print_evaluation(ev);
            }
            Ok(())
        }
        _ => {
            let e = status
                .error
                .map(|e| e.message)
                .unwrap_or_else(|| "training failed".into());
            Err(Failure(1, e))
        }
    }
}

async fn eval(client: &Client, a: EvalArgs) -> Result<(), Failure> {
    let checkpoint = absolute(&a.checkpoint)?;
    let out_dir = absolute(&a.out_dir.unwrap_or_else(|| beside(&checkpoint, "eval")))?;
    let resp = client
        .eval(&EvalRequest {
            config_toml: a.config.as_deref().map(config_toml).transpose()?,
            checkpoint,
            data_path: data_path_override(),
            seed: a.seed,
            kmeans: a.kmeans,
            out_dir: Some(out_dir.clone()),
        })
        .await?;
    println!(
        "config {} checkpoint step {} -> {}",
        resp.config_hash,
        resp.checkpoint_step,
        out_dir.display()
    );
    print_evaluation(&resp.evaluation);
    Ok(())
}

async fn embed(client: &Client, a: EmbedArgs) -> Result<(), Failure> {
    let checkpoint = absolute(&a.checkpoint)?;
    let out_dir = absolute(&a.out_dir.unwrap_or_else(|| beside(&checkpoint, "embed")))?;
    let resp = client
        .embed(&EmbedRequest {
            config_toml: a.config.as_deref().map(config_toml).transpose()?,
            checkpoint,
            data_path: data_path_override(),
            seed: a.seed,
            plot: a.plot,
            out_dir,
        })
        .await?;
    println!(
        "config {}: {} rows x {} latent columns -> {}",
        resp.config_hash,
        resp.rows,
        resp.latent_columns,
        resp.dump.display()
    );
    if let Some(p) = resp.plot {
        println!("plot {}", p.display());
    }
    Ok(())
}

async fn run(cli: Cli) -> Result<(), Failure> {
    if let Command::Serve { addr } = cli.command {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| Failure(1, format!("bind {addr}: {e}")))?;
        log::info!("listening on {addr}");
        return catstyle_server::serve(listener)
            .await
            .map_err(|e| Failure(1, e.to_string()));
    }
    let client = match cli.server {
        Some(url) => Client::new(url),
        None => {
            let (addr, _task) = catstyle_server::spawn(([127, 0, 0, 1], 0).into())
                .await
                .map_err(|e| Failure(1, format!("starting local service: {e}")))?;
            Client::new(format!("http://{addr}"))
        }
    };
    match cli.command {
        Command::Train(a) => train(&client, a).await,
        Command::Eval(a) => eval(&client, a).await,
        Command::Embed(a) => embed(&client, a).await,
        Command::Serve { .. } => unreachable!(),
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

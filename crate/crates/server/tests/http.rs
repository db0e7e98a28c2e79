//! Drives the service over real HTTP on an ephemeral port.

use std::net::SocketAddr;
use std::time::Duration;

use catstyle_core::api::{EvalResponse, JobCreated, JobState, JobStatus};
use serde_json::{json, Value};

const TINY: &str = r#"
dataset_name = "synthetic_blocks"
width_divisor = 16
style_dim = 4
batch_size = 16
n_critic = 2
total_encoder_steps = 6
eval_every = 3
[synthetic]
n_per_class = 40
"#;

async fn start() -> String {
    let (addr, _) = catstyle_server::spawn(SocketAddr::from(([127, 0, 0, 1], 0)))
        .await
        .unwrap();
    format!("http://{addr}")
}

async fn wait(http: &reqwest::Client, base: &str, id: u64) -> JobStatus {
    for _ in 0..600 {
        let s: JobStatus = http
            .get(format!("{base}/v1/jobs/{id}"))
            .send()
            .await
            .unwrap()
            .json()
            .await
            .unwrap();
        if s.state.is_finished() {
            return s;
        }
        tokio::time::sleep(Duration::from_millis(100)).await;
    }
    panic!("job {id} did not finish");
}

#[tokio::test(flavor = "multi_thread")]
async fn health_reports_version() {
    let base = start().await;
    let v: Value = reqwest::get(format!("{base}/health"))
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(v["status"], "ok");
    assert_eq!(v["version"], env!("CARGO_PKG_VERSION"));
}

#[tokio::test(flavor = "multi_thread")]
async fn training_job_runs_to_completion_and_its_checkpoint_evaluates() {
    let base = start().await;
    let http = reqwest::Client::new();
    let dir = tempfile::tempdir().unwrap();
    let resp = http
        .post(format!("{base}/v1/train"))
        .json(&json!({"config_toml": TINY, "out_dir": dir.path(), "strict_deterministic": true}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 202);
    let job: JobCreated = resp.json().await.unwrap();
    assert_eq!(job.total_steps, 6);
    let s = wait(&http, &base, job.job_id).await;
    assert_eq!(s.state, JobState::Succeeded, "{:?}", s.error);
    assert_eq!(s.log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![3, 6]);
    let summary = s.result.unwrap();
    assert_eq!(summary.steps, 6);
    assert_eq!(summary.critic_updates, 12);
    assert!(summary.checkpoint.exists());

    let resp = http
        .post(format!("{base}/v1/eval"))
        .json(&json!({"checkpoint": summary.checkpoint, "kmeans": true}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 200);
    let ev: EvalResponse = resp.json().await.unwrap();
    assert_eq!(ev.checkpoint_step, 6);
    assert_eq!(ev.evaluation.reports.len(), 4);
    assert_eq!(ev.assignments.len(), 80);
    assert_eq!(ev.evaluation.argmax(), summary.evaluation.unwrap().argmax());
}

#[tokio::test(flavor = "multi_thread")]
async fn mismatched_config_is_a_conflict_with_both_hashes() {
    let base = start().await;
    let http = reqwest::Client::new();
    let dir = tempfile::tempdir().unwrap();
    let job: JobCreated = http
        .post(format!("{base}/v1/train"))
        .json(&json!({"config_toml": TINY, "out_dir": dir.path()}))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    let ckpt = wait(&http, &base, job.job_id).await.result.unwrap().checkpoint;
    let other = TINY.replace("style_dim = 4", "style_dim = 5");
    let resp = http
        .post(format!("{base}/v1/eval"))
        .json(&json!({"checkpoint": ckpt, "config_toml": other}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 409);
    let err: Value = resp.json().await.unwrap();
    assert_eq!(err["kind"], "architecture_mismatch");
    assert_ne!(err["expected"], err["found"]);
    assert!(err["expected"].is_string());
}

#[tokio::test(flavor = "multi_thread")]
async fn malformed_requests_are_rejected() {
    let base = start().await;
    let http = reqwest::Client::new();
    let resp = http
        .post(format!("{base}/v1/train"))
        .header("content-type", "application/json")
        .body("{not json")
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 400);
    let resp = http
        .post(format!("{base}/v1/train"))
        .json(&json!({"config_toml": "dataset_name = \"nope\"", "out_dir": "/tmp/x"}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 400);
    let resp = http
        .post(format!("{base}/v1/eval"))
        .json(&json!({"checkpoint": "/definitely/not/here.safetensors"}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 404);
    let resp = http.get(format!("{base}/v1/jobs/99")).send().await.unwrap();
    assert_eq!(resp.status(), 404);
}

#[tokio::test(flavor = "multi_thread")]
async fn cancelled_job_reports_cancelled() {
    let base = start().await;
    let http = reqwest::Client::new();
    let dir = tempfile::tempdir().unwrap();
    let long = TINY.replace("total_encoder_steps = 6", "total_encoder_steps = 100000");
    let job: JobCreated = http
        .post(format!("{base}/v1/train"))
        .json(&json!({"config_toml": long, "out_dir": dir.path()}))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    let resp = http
        .delete(format!("{base}/v1/jobs/{}", job.job_id))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 200);
    let s = wait(&http, &base, job.job_id).await;
    assert_eq!(s.state, JobState::Cancelled);
    assert!(s.error.unwrap().message.contains("cancelled"));
}

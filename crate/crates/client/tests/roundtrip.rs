//! The client against an in-process server.

use std::net::SocketAddr;
use std::time::Duration;

use catstyle_client::{Client, ClientError};
use catstyle_core::api::{EmbedRequest, ErrorKind, EvalRequest, JobState, TrainRequest};

const TINY: &str = r#"
dataset_name = "synthetic_blocks"
width_divisor = 16
style_dim = 3
batch_size = 16
n_critic = 2
total_encoder_steps = 4
eval_every = 2
[synthetic]
n_per_class = 30
"#;

async fn client() -> Client {
    let (addr, _) = catstyle_server::spawn(SocketAddr::from(([127, 0, 0, 1], 0)))
        .await
        .unwrap();
    Client::new(format!("http://{addr}/"))
}

fn train_request(dir: &std::path::Path, seed: Option<u64>) -> TrainRequest {
    TrainRequest {
        config_toml: TINY.into(),
        seed,
        strict_deterministic: true,
        out_dir: dir.to_path_buf(),
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn train_wait_eval_embed() {
    let c = client().await;
    assert!(!c.base_url().ends_with('/'));
    assert_eq!(c.health().await.unwrap().status, "ok");
    let dir = tempfile::tempdir().unwrap();
    let job = c.start_train(&train_request(dir.path(), Some(9))).await.unwrap();
    let mut polls = 0;
    let done = c
        .wait(job.job_id, Duration::from_millis(50), |_| polls += 1)
        .await
        .unwrap();
    assert!(polls >= 1);
    assert_eq!(done.state, JobState::Succeeded);
    assert_eq!(done.config_hash, job.config_hash);
    let ckpt = done.result.unwrap().checkpoint;

    let ev = c
        .eval(&EvalRequest {
            checkpoint: ckpt.clone(),
            config_toml: None,
            data_path: None,
            seed: None,
            kmeans: false,
            out_dir: Some(dir.path().join("eval")),
        })
        .await
        .unwrap();
    assert_eq!(ev.evaluation.reports.len(), 1);
    assert!(dir.path().join("eval/metrics.json").exists());

    let em = c
        .embed(&EmbedRequest {
            checkpoint: ckpt,
            config_toml: None,
            data_path: None,
            seed: None,
            plot: false,
            out_dir: dir.path().join("embed"),
        })
        .await
        .unwrap();
    assert_eq!((em.rows, em.latent_columns), (60, 2 + 3));
    assert!(em.plot.is_none());
    let text = std::fs::read_to_string(em.dump).unwrap();
    assert_eq!(text.lines().count(), 61);
}

#[tokio::test(flavor = "multi_thread")]
async fn seed_override_changes_the_run_but_not_the_architecture() {
    let c = client().await;
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ja = c.start_train(&train_request(a.path(), Some(1))).await.unwrap();
    let jb = c.start_train(&train_request(b.path(), Some(2))).await.unwrap();
    assert_ne!(ja.config_hash, jb.config_hash);
    let sa = c
        .wait(ja.job_id, Duration::from_millis(50), |_| {})
        .await
        .unwrap();
    let sb = c
        .wait(jb.job_id, Duration::from_millis(50), |_| {})
        .await
        .unwrap();
    assert_ne!(sa.log, sb.log);
    // a checkpoint from one seed evaluates under the other seed's config
    let ev = c
        .eval(&EvalRequest {
            checkpoint: sa.result.unwrap().checkpoint,
            config_toml: Some(TINY.into()),
            data_path: None,
            seed: Some(2),
            kmeans: false,
            out_dir: None,
        })
        .await
        .unwrap();
    assert_eq!(ev.checkpoint_step, 4);
}

#[tokio::test(flavor = "multi_thread")]
async fn errors_are_structured() {
    let c = client().await;
    let err = c.job(12345).await.unwrap_err();
    assert_eq!(err.api().unwrap().kind, ErrorKind::NotFound);
    match &err {
        ClientError::Api { status, .. } => assert_eq!(status.as_u16(), 404),
        other => panic!("{other}"),
    }
    let mut bad = train_request(std::path::Path::new("/tmp"), None);
    bad.config_toml = "batch_size = 0\ndataset_name = \"synthetic_blocks\"".into();
    let err = c.start_train(&bad).await.unwrap_err();
    assert_eq!(err.api().unwrap().kind, ErrorKind::InvalidRequest);
    assert!(err.to_string().contains("batch_size"), "{err}");

    let nobody = Client::new("http://127.0.0.1:9");
    let err = nobody.health().await.unwrap_err();
    assert!(matches!(err, ClientError::Transport(_)));
    assert!(err.api().is_none());
}

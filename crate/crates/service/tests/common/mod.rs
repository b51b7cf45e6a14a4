#![allow(dead_code)]

use std::path::PathBuf;
use std::time::Duration;

use lpal_core::experiment::{ExperimentConfig, LabelMode, RunWriter, Session};
use lpal_service::{serve_listener, AppState};
use serde_json::Value;

pub fn config_json() -> String {
    serde_json::json!({
        "data": { "kind": "synth", "n": 240, "side": 16, "noise_sigma": 0.05, "seed": 3,
                  "priors": [0.111111111, 0.111111111, 0.111111111, 0.111111111, 0.111111111,
                             0.111111111, 0.111111111, 0.111111111, 0.111111112] },
        "bootstrap": 18,
        "per_cycle": 6,
        "cycles": 3,
        "model": { "backbone": { "input_side": 16, "stages": [{ "channels": 4, "blocks": 1 }, { "channels": 8, "blocks": 1 }],
                                 "taps": [0, 1] },
                   "loss_pred": { "embed_dim": 4 } },
        "train": { "epochs": 3, "batch_size": 6 },
        "eval_k": 10
    })
    .to_string()
}

pub fn session(seed: u64) -> Session {
    let config = ExperimentConfig::from_json(config_json().as_bytes()).unwrap();
    Session::new(config, seed, LabelMode::Queue).unwrap()
}

pub async fn bootstrap(seed: u64, writer: Option<RunWriter>) -> AppState {
    tokio::task::spawn_blocking(move || AppState::bootstrap(session(seed), writer).unwrap())
        .await
        .unwrap()
}

/// Serves `state` on an ephemeral port and returns the base URL.
pub async fn spawn(state: AppState) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(serve_listener(listener, state));
    format!("http://{addr}")
}

pub fn schema_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../schemas")
}

pub fn assert_schema(name: &str, instance: &Value) {
    let path = schema_dir().join(format!("{name}.schema.json"));
    let schema: Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    let compiled = jsonschema::JSONSchema::compile(&schema).unwrap();
    let msgs: Vec<String> = match compiled.validate(instance) {
        Ok(()) => return,
        Err(errors) => errors.map(|e| format!("{} at {}", e, e.instance_path)).collect(),
    };
    panic!("{name} schema violations: {msgs:?}\n{instance:#}");
}

/// Polls status until the loop is idle again.
pub async fn wait_idle(client: &reqwest::Client, base: &str) -> Value {
    for _ in 0..600 {
        let status: Value = client.get(format!("{base}/api/status")).send().await.unwrap().json().await.unwrap();
        if status["state"] == "idle" {
            return status;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("cycle did not finish");
}

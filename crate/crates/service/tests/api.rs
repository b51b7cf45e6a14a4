mod common;

use std::collections::BTreeSet;

use common::{assert_schema, bootstrap, spawn, wait_idle};
use lpal_core::datapool::quantize;
use lpal_core::{LabelSet, Light, Weather};
use lpal_service::encode_png;
use reqwest::StatusCode;
use serde_json::{json, Value};

async fn get_json(client: &reqwest::Client, url: String) -> (StatusCode, Value) {
    let resp = client.get(url).send().await.unwrap();
    (resp.status(), resp.json().await.unwrap())
}

async fn post_json(client: &reqwest::Client, url: String, body: &Value) -> (StatusCode, Value) {
    let resp = client.post(url).json(body).send().await.unwrap();
    (resp.status(), resp.json().await.unwrap())
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn scripted_cycle_round_trip() {
    let base = spawn(bootstrap(0, None).await).await;
    let client = reqwest::Client::new();

    let (code, status) = get_json(&client, format!("{base}/api/status")).await;
    assert_eq!(code, StatusCode::OK);
    assert_schema("status_snapshot", &status);
    assert_eq!((status["cycle"].as_u64(), status["state"].as_str()), (Some(0), Some("idle")));
    assert_eq!(status["counts"]["queued"], 6);

    let (code, queue) = get_json(&client, format!("{base}/api/queue")).await;
    assert_eq!(code, StatusCode::OK);
    assert_schema("queue", &queue);
    let entries = queue.as_array().unwrap().clone();
    assert_eq!(entries.len(), 6);

    let image = client.get(format!("{base}{}", entries[0]["image_url"].as_str().unwrap())).send().await.unwrap();
    assert_eq!(image.status(), StatusCode::OK);
    assert_eq!(image.headers()["content-type"], "image/png");

    let mut last = Value::Null;
    for e in &entries {
        let body = json!({ "id": e["id"], "weather": "rain", "light": "low" });
        let (code, snap) = post_json(&client, format!("{base}/api/labels"), &body).await;
        assert_eq!(code, StatusCode::OK, "{snap}");
        assert_schema("status_snapshot", &snap);
        last = snap;
    }
    assert_eq!(last["counts"]["queued"], 0);
    assert_eq!(last["counts"]["human_labeled"], 24);

    // re-posting the same label changes nothing and returns the same snapshot
    let again = json!({ "id": entries[5]["id"], "weather": "rain", "light": "low" });
    let (code, snap) = post_json(&client, format!("{base}/api/labels"), &again).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(snap, last);
    // a different label for an already labeled sample is refused
    let changed = json!({ "id": entries[5]["id"], "weather": "snow", "light": "low" });
    let (code, err) = post_json(&client, format!("{base}/api/labels"), &changed).await;
    assert_eq!(code, StatusCode::CONFLICT);
    assert_schema("error", &err);

    let (code, snap) = post_json(&client, format!("{base}/api/cycle/advance"), &json!({})).await;
    assert_eq!(code, StatusCode::ACCEPTED);
    assert_schema("status_snapshot", &snap);
    assert_eq!(snap["state"], "training");

    let done = wait_idle(&client, &base).await;
    assert_schema("status_snapshot", &done);
    assert_eq!(done["cycle"], 1);
    assert_eq!(done["last_error"], Value::Null);
    let report = &done["latest_report"];
    assert_schema("cycle_report", report);
    assert_eq!(report["budget"], 24);
    assert_eq!(done["counts"]["queued"], 6);
    let (_, queue) = get_json(&client, format!("{base}/api/queue")).await;
    let fresh: BTreeSet<u64> = queue.as_array().unwrap().iter().map(|e| e["id"].as_u64().unwrap()).collect();
    let old: BTreeSet<u64> = entries.iter().map(|e| e["id"].as_u64().unwrap()).collect();
    assert!(fresh.is_disjoint(&old));
    assert!(queue.as_array().unwrap().iter().all(|e| e["cycle"] == 1));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn error_paths() {
    let state = bootstrap(1, None).await;
    let base = spawn(state.clone()).await;
    let client = reqwest::Client::new();
    let queued = state.queue(None);

    for limit in ["0", "-3", "abc"] {
        let (code, err) = get_json(&client, format!("{base}/api/queue?limit={limit}")).await;
        assert_eq!(code, StatusCode::BAD_REQUEST, "limit {limit}");
        assert_schema("error", &err);
    }
    let (code, queue) = get_json(&client, format!("{base}/api/queue?limit=2")).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(queue.as_array().unwrap().len(), 2);

    let resp = client.get(format!("{base}/api/samples/999999/image")).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::NOT_FOUND);
    assert_schema("error", &resp.json().await.unwrap());

    let id = queued[0].id;
    let cases = [
        (json!({ "id": 999_999, "weather": "clear", "light": "low" }), StatusCode::NOT_FOUND),
        (json!({ "id": id, "weather": "fog", "light": "low" }), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({ "id": id, "weather": "clear", "light": "dusk" }), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({ "id": id, "weather": "clear" }), StatusCode::UNPROCESSABLE_ENTITY),
    ];
    for (body, expected) in cases {
        let (code, err) = post_json(&client, format!("{base}/api/labels"), &body).await;
        assert_eq!(code, expected, "{body}");
        assert_schema("error", &err);
    }
    let resp = client
        .post(format!("{base}/api/labels"))
        .header("content-type", "application/json")
        .body("{not json")
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);

    // a sample that was never queued
    let unqueued = state.snapshot();
    let labeled_elsewhere = (0..240u64).find(|&i| state.image(i).is_some() && !queued.iter().any(|e| e.id == i)).unwrap();
    let (code, _) = post_json(
        &client,
        format!("{base}/api/labels"),
        &json!({ "id": labeled_elsewhere, "weather": "clear", "light": "low" }),
    )
    .await;
    assert!(code == StatusCode::CONFLICT, "{code}");
    assert_eq!(state.snapshot(), unqueued);

    let (code, err) = post_json(&client, format!("{base}/api/cycle/advance"), &json!({})).await;
    assert_eq!(code, StatusCode::CONFLICT);
    assert_schema("error", &err);
    assert_eq!(err["remaining"], queued.len());

    // hold the loop in training without a worker to provoke a busy refusal
    state.begin_advance(true).unwrap();
    let (code, err) = post_json(&client, format!("{base}/api/cycle/advance?force=true"), &json!({})).await;
    assert_eq!(code, StatusCode::CONFLICT);
    assert_eq!(err["error"], "cycle_running");
    assert_eq!(err["state"], "training");
    // labels are still accepted while training
    let (code, _) = post_json(
        &client,
        format!("{base}/api/labels"),
        &json!({ "id": id, "weather": "clear", "light": "low" }),
    )
    .await;
    assert_eq!(code, StatusCode::OK);

    let resp = client.get(format!("{base}/api/nope")).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn forced_advance_keeps_unlabeled_queue() {
    let state = bootstrap(2, None).await;
    let base = spawn(state.clone()).await;
    let client = reqwest::Client::new();
    let before = state.queue(None);
    let (code, _) = post_json(&client, format!("{base}/api/cycle/advance"), &json!({ "force": true })).await;
    assert_eq!(code, StatusCode::ACCEPTED);
    let done = wait_idle(&client, &base).await;
    assert_eq!(done["cycle"], 1);
    assert_eq!(done["counts"]["queued"], 12);
    let after: BTreeSet<u64> = state.queue(None).iter().map(|e| e.id).collect();
    assert!(before.iter().all(|e| after.contains(&e.id)));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn queue_order_and_cors() {
    let state = bootstrap(3, None).await;
    let base = spawn(state.clone()).await;
    let client = reqwest::Client::new();
    let resp = client
        .get(format!("{base}/api/queue"))
        .header("origin", "http://localhost:5173")
        .send()
        .await
        .unwrap();
    assert_eq!(resp.headers()["access-control-allow-origin"], "*");
    let queue: Vec<lpal_service::QueueEntry> = resp.json().await.unwrap();
    for pair in queue.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        assert!(a.predicted_loss > b.predicted_loss || (a.predicted_loss == b.predicted_loss && a.id < b.id));
    }
    let preflight = client
        .request(reqwest::Method::OPTIONS, format!("{base}/api/labels"))
        .header("origin", "http://localhost:5173")
        .header("access-control-request-method", "POST")
        .send()
        .await
        .unwrap();
    assert!(preflight.status().is_success());
    assert!(preflight.headers().contains_key("access-control-allow-methods"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn images_are_half_up_quantized_png() {
    let state = bootstrap(4, None).await;
    let base = spawn(state.clone()).await;
    let client = reqwest::Client::new();
    let id = state.queue(None)[0].id;
    let bytes = client.get(format!("{base}/api/samples/{id}/image")).send().await.unwrap().bytes().await.unwrap();
    let decoder = png::Decoder::new(&bytes[..]);
    let mut reader = decoder.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).unwrap();
    assert_eq!((info.width, info.height), (16, 16));
    assert_eq!((info.color_type, info.bit_depth), (png::ColorType::Grayscale, png::BitDepth::Eight));
    let (_, pixels) = state.image(id).unwrap();
    let expected: Vec<u8> = pixels.iter().map(|&v| (v as f64 * 255.0 + 0.5).floor() as u8).collect();
    assert_eq!(&buf[..256], &expected[..]);

    let png = encode_png(2, &[0.0, 0.5, 1.0, 0.25]).unwrap();
    let mut reader = png::Decoder::new(&png[..]).read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size()];
    reader.next_frame(&mut buf).unwrap();
    assert_eq!(buf, vec![0, 128, 255, 64]);
    assert_eq!(quantize(&[0.5]), vec![128]);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_reads_never_see_torn_counts() {
    let state = bootstrap(5, None).await;
    let base = spawn(state.clone()).await;
    let client = reqwest::Client::new();
    let total = state.snapshot().counts.human_labeled + state.snapshot().counts.queued;
    let pool_size: usize = {
        let c = state.snapshot().counts;
        c.human_labeled + c.auto_labeled + c.queued + c.deferred + c.unlabeled
    };
    let ids: Vec<u64> = state.queue(None).iter().map(|e| e.id).collect();
    let writers = ids.into_iter().map(|id| {
        let (client, base) = (client.clone(), base.clone());
        let label = LabelSet::new(Weather::Snow, Light::Moderate);
        tokio::spawn(async move {
            let body = json!({ "id": id, "weather": label.weather.token(), "light": label.light.token() });
            client.post(format!("{base}/api/labels")).json(&body).send().await.unwrap().status()
        })
    });
    let writers: Vec<_> = writers.collect();
    for _ in 0..40 {
        let status: lpal_service::StatusSnapshot =
            client.get(format!("{base}/api/status")).send().await.unwrap().json().await.unwrap();
        assert_eq!(status.counts.total(), pool_size);
        assert_eq!(status.counts.human_labeled + status.counts.queued, total);
    }
    for w in writers {
        assert_eq!(w.await.unwrap(), StatusCode::OK);
    }
    assert_eq!(state.snapshot().counts.queued, 0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn run_directory_tracks_labels_and_cycles() {
    let dir = tempfile::tempdir().unwrap();
    let writer = lpal_core::experiment::RunWriter::create(dir.path(), common::config_json().as_bytes(), true).unwrap();
    let state = bootstrap(6, Some(writer)).await;
    let seed_dir = dir.path().join("seed_6");
    assert!(seed_dir.join("cycle_0.json").exists());
    assert!(dir.path().join("checkpoints/seed_6/cycle_0.ckpt").exists());
    let entry = &state.queue(None)[0];
    state.label(entry.id, LabelSet::new(Weather::Clear, Light::Bright)).unwrap();
    let manifest: Value = serde_json::from_slice(&std::fs::read(seed_dir.join("manifest.json")).unwrap()).unwrap();
    let text = manifest.to_string();
    assert!(text.contains("human"), "{text}");
}

use std::path::Path;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use kinevae_annotate::{router, AppState, Dataset, LabelStore};
use kinevae_core::data::load_labels;
use kinevae_core::{ClassNames, DanceStream, Provenance};
use ndarray::Array2;
use serde_json::{json, Value};
use tower::ServiceExt;

const JOINTS: usize = 53;

/// Frame value encodes (stream, frame, column) so any off-by-one shows up.
fn stream(id: &str, k: usize, frames: usize) -> DanceStream {
    let data = Array2::from_shape_fn((frames, 3 * JOINTS), |(t, c)| {
        k as f64 * 1000.0 + t as f64 + c as f64 * 1e-3
    });
    DanceStream::new(id, JOINTS, 35.0, data).unwrap()
}

fn dataset() -> Dataset {
    Dataset::new(vec![stream("s0", 0, 100), stream("s1", 1, 250)])
}

fn state(dir: &Path, start_index: usize) -> AppState {
    let store = LabelStore::open(&dir.join("labels.csv"), ClassNames::default()).unwrap();
    AppState::new(Some(dataset()), store, 40, start_index)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, value)
}

fn label(stream: &str, start: usize, label: &str) -> Value {
    json!({"stream_id": stream, "start": start, "length": 40, "label": label})
}

#[tokio::test]
async fn info_reports_dataset_classes_and_cursor() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state(dir.path(), 17), None);
    let (status, info) = call(&app, "GET", "/api/info", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(info["num_joints"], 53);
    assert_eq!(info["class_names"], json!(["low", "medium", "high"]));
    assert_eq!(info["cursor"], 17);
    assert_eq!(info["window_length"], 40);
    assert_eq!(
        info["streams"][1],
        json!({"id": "s1", "num_frames": 250, "num_joints": 53, "fps": 35.0})
    );
}

#[tokio::test]
async fn missing_dataset_answers_503() {
    let dir = tempfile::tempdir().unwrap();
    let store = LabelStore::open(&dir.path().join("labels.csv"), ClassNames::default()).unwrap();
    let app = router(AppState::new(None, store, 40, 0), None);
    for uri in ["/api/info", "/api/sequence?stream=s0&start=0"] {
        let (status, body) = call(&app, "GET", uri, None).await;
        assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE, "{uri}");
        assert!(body["error"].is_string());
    }
    let (status, _) = call(&app, "POST", "/api/labels", Some(label("s0", 0, "low"))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn sequence_returns_exact_frames_and_checks_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset();
    let app = router(state(dir.path(), 0), None);

    let (status, seq) = call(&app, "GET", "/api/sequence?stream=s1&start=13&length=40", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(seq["fps"], 35.0);
    let frames = seq["frames"].as_array().unwrap();
    assert_eq!(frames.len(), 40);
    let expected = data.streams()[1].frames();
    for (t, row) in frames.iter().enumerate() {
        let row: Vec<f64> = serde_json::from_value(row.clone()).unwrap();
        assert_eq!(row.as_slice(), expected.row(13 + t).as_slice().unwrap());
        assert_eq!(seq["frame_indices"][t], 13 + t);
    }

    // Default length is the configured window.
    let (status, seq) = call(&app, "GET", "/api/sequence?stream=s0&start=0", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(seq["frames"].as_array().unwrap().len(), 40);
    let (status, _) = call(&app, "GET", "/api/sequence?stream=s0&start=60&length=40", None).await;
    assert_eq!(status, StatusCode::OK);

    let cases = [
        (
            "/api/sequence?stream=s0&start=70&length=40",
            StatusCode::RANGE_NOT_SATISFIABLE,
        ),
        (
            "/api/sequence?stream=s0&start=100&length=1",
            StatusCode::RANGE_NOT_SATISFIABLE,
        ),
        ("/api/sequence?stream=nope&start=0&length=40", StatusCode::NOT_FOUND),
        ("/api/sequence?stream=s0&start=0&length=0", StatusCode::BAD_REQUEST),
        ("/api/sequence?stream=s0", StatusCode::BAD_REQUEST),
    ];
    for (uri, code) in cases {
        assert_eq!(call(&app, "GET", uri, None).await.0, code, "{uri}");
    }
}

#[tokio::test]
async fn posted_label_lands_in_csv_and_moves_cursor() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state(dir.path(), 0), None);
    let (status, labels) = call(&app, "GET", "/api/labels", None).await;
    assert_eq!((status, labels), (StatusCode::OK, json!([])));

    let (status, resp) = call(&app, "POST", "/api/labels", Some(label("s0", 0, "Medium"))).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(resp["record"]["label"], "medium");
    assert_eq!(resp["cursor"], 40);
    let csv = std::fs::read_to_string(dir.path().join("labels.csv")).unwrap();
    assert_eq!(csv, "stream_id,start,length,label,provenance\ns0,0,40,medium,manual\n");

    let (_, info) = call(&app, "GET", "/api/info", None).await;
    assert_eq!(info["cursor"], 40);
    let (_, labels) = call(&app, "GET", "/api/labels", None).await;
    assert_eq!(labels, json!([resp["record"]]));
}

#[tokio::test]
async fn invalid_labels_and_windows_are_rejected_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state(dir.path(), 5), None);

    let (status, body) = call(&app, "POST", "/api/labels", Some(label("s0", 0, "fast"))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let msg = body["error"].as_str().unwrap();
    assert!(msg.contains("low, medium, high"), "{msg}");

    let (status, _) = call(&app, "POST", "/api/labels", Some(label("s0", 70, "low"))).await;
    assert_eq!(status, StatusCode::RANGE_NOT_SATISFIABLE);
    let (status, _) = call(&app, "POST", "/api/labels", Some(label("s9", 0, "low"))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let csv = std::fs::read_to_string(dir.path().join("labels.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
    let (_, info) = call(&app, "GET", "/api/info", None).await;
    assert_eq!(info["cursor"], 5);
}

#[tokio::test]
async fn relabel_overwrites_in_place_and_journals() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state(dir.path(), 0), None);
    for (s, start, y) in [("s0", 0, "low"), ("s1", 40, "high"), ("s1", 80, "high")] {
        assert_eq!(
            call(&app, "POST", "/api/labels", Some(label(s, start, y))).await.0,
            StatusCode::CREATED
        );
    }
    let (status, resp) = call(&app, "POST", "/api/labels", Some(label("s1", 40, "medium"))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(resp["replaced"], true);

    let (_, labels) = call(&app, "GET", "/api/labels", None).await;
    let got: Vec<(String, u64, String)> = labels
        .as_array()
        .unwrap()
        .iter()
        .map(|r| {
            (
                r["stream_id"].as_str().unwrap().to_string(),
                r["start"].as_u64().unwrap(),
                r["label"].as_str().unwrap().to_string(),
            )
        })
        .collect();
    let want =
        [("s0", 0, "low"), ("s1", 40, "medium"), ("s1", 80, "high")].map(|(s, t, y)| (s.to_string(), t, y.to_string()));
    assert_eq!(got, want);

    let records = load_labels(&dir.path().join("labels.csv"), &ClassNames::default()).unwrap();
    assert_eq!(records.len(), 3);
    assert_eq!(records[1].label, 1);
    assert!(records.iter().all(|r| r.provenance == Provenance::Manual));
    let journal = std::fs::read_to_string(dir.path().join("labels.csv.journal")).unwrap();
    let entry: Value = serde_json::from_str(journal.trim()).unwrap();
    assert_eq!(entry["previous_label"], "high");
    assert_eq!(entry["label"], "medium");
}

#[tokio::test]
async fn held_writer_lock_yields_409() {
    let dir = tempfile::tempdir().unwrap();
    let state = state(dir.path(), 0).with_lock_timeout(Duration::from_millis(50));
    let app = router(state.clone(), None);
    let guard = state.hold_writer_lock().await;
    let (status, body) = call(&app, "POST", "/api/labels", Some(label("s0", 0, "low"))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert!(body["error"].is_string());
    drop(guard);
    let (status, _) = call(&app, "POST", "/api/labels", Some(label("s0", 0, "low"))).await;
    assert_eq!(status, StatusCode::CREATED);
}

#[tokio::test]
async fn reads_do_not_touch_the_label_file() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state(dir.path(), 0), None);
    call(&app, "POST", "/api/labels", Some(label("s0", 0, "low"))).await;
    let path = dir.path().join("labels.csv");
    let before = std::fs::read(&path).unwrap();
    for uri in ["/api/info", "/api/labels", "/api/sequence?stream=s0&start=3&length=7"] {
        call(&app, "GET", uri, None).await;
    }
    assert_eq!(std::fs::read(&path).unwrap(), before);
    assert!(!dir.path().join("labels.csv.journal").exists());
}

#[tokio::test]
async fn static_bundle_is_served_at_root() {
    let dir = tempfile::tempdir().unwrap();
    let ui = dir.path().join("ui");
    std::fs::create_dir(&ui).unwrap();
    std::fs::write(ui.join("index.html"), "<html>labeler</html>").unwrap();
    let app = router(state(dir.path(), 0), Some(ui));
    let resp = app
        .clone()
        .oneshot(Request::get("/").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    assert_eq!(&bytes[..], b"<html>labeler</html>");
    assert_eq!(call(&app, "GET", "/api/labels", None).await.0, StatusCode::OK);
}

#[tokio::test]
async fn malformed_requests_get_json_errors() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state(dir.path(), 0), None);
    let (status, body) = call(&app, "POST", "/api/labels", Some(json!({"stream_id": "s0"}))).await;
    assert!(status.is_client_error());
    assert!(body["error"].is_string());
}

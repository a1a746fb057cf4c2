use std::fs;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use flowsculpt::docs::{write_shape, ShapeDocument};
use flowsculpt::flow::{default_inlet, final_shape, FlowShape, GridSpec, PillarLibrary, PillarSequence};
use flowsculpt::trainer::{train, EnvSettings, TrainConfig};
use flowsculpt_cli::api::CheckpointStore;
use flowsculpt_cli::service::{router, AppState};
use serde_json::{json, Value};
use tower::ServiceExt;

const BIN: &str = env!("CARGO_BIN_EXE_flowsculpt");

fn state(checkpoints: CheckpointStore) -> Arc<AppState> {
    Arc::new(AppState {
        env: EnvSettings::default().build().unwrap(),
        checkpoints,
    })
}

async fn call(state: &Arc<AppState>, method: &str, uri: &str, body: Option<String>) -> (StatusCode, String) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = router(Arc::clone(state)).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, String::from_utf8(bytes.to_vec()).unwrap())
}

fn doc(shape: &FlowShape) -> Value {
    serde_json::to_value(ShapeDocument::from_shape(shape)).unwrap()
}

fn shape_of(seq: &[usize]) -> FlowShape {
    let lib = PillarLibrary::surrogate(GridSpec::DEFAULT);
    final_shape(
        &default_inlet(GridSpec::DEFAULT),
        &PillarSequence::new(seq.to_vec()),
        &lib,
    )
    .unwrap()
}

/// Writes a briefly trained checkpoint as `<dir>/<name>/checkpoint.json`.
fn trained_checkpoint(dir: &Path, name: &str, seed: u64) {
    let mut cfg = TrainConfig::desk();
    cfg.episodes = 60;
    cfg.seed = seed;
    cfg.agent.warmup_random_steps = 80;
    cfg.schedule.decay_steps = 400;
    let run = train(&cfg, &shape_of(&[30, 12]), None).unwrap();
    fs::create_dir_all(dir.join(name)).unwrap();
    run.checkpoint.save(dir.join(name).join("checkpoint.json")).unwrap();
}

#[tokio::test]
async fn library_metadata() {
    let st = state(CheckpointStore::default());
    let (status, body) = call(&st, "GET", "/api/library", None).await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(v["grid"], json!({"h": 12, "w": 32}));
    assert_eq!(v["actions"], 32);
    assert_eq!(v["provenance"], "surrogate");
    assert_eq!(v["max_steps"], 7);
    assert_eq!(v["inlet"], doc(&default_inlet(GridSpec::DEFAULT)));
}

#[tokio::test]
async fn simulate_and_pmr_endpoints() {
    let st = state(CheckpointStore::default());
    let (status, body) = call(&st, "POST", "/api/simulate", Some("{}".into())).await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(v["shapes"], json!([doc(&default_inlet(GridSpec::DEFAULT))]));

    let target = shape_of(&[3, 17]);
    let req = json!({"sequence": "3, 17", "target": doc(&target)});
    let (status, body) = call(&st, "POST", "/api/simulate", Some(req.to_string())).await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(v["sequence"], json!([3, 17]));
    assert_eq!(v["shapes"][2], doc(&target));
    assert_eq!(v["pmr"][2], 1.0);
    // The id-list form gives the same reply.
    let req = json!({"sequence": [3, 17], "target": doc(&target)});
    assert_eq!(call(&st, "POST", "/api/simulate", Some(req.to_string())).await.1, body);

    let req = json!({"a": doc(&target), "b": doc(&target)});
    let (status, body) = call(&st, "POST", "/api/pmr", Some(req.to_string())).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(serde_json::from_str::<Value>(&body).unwrap(), json!({"pmr": 1.0}));
    let req = json!({"a": doc(&target), "b": doc(&FlowShape::zeros(GridSpec::DEFAULT))});
    let (status, body) = call(&st, "POST", "/api/pmr", Some(req.to_string())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(serde_json::from_str::<Value>(&body).unwrap()["field"], "b");
}

#[tokio::test]
async fn malformed_payloads_get_field_level_errors() {
    let st = state(CheckpointStore::default());
    let cases = [
        ("/api/simulate", json!({"sequence": [1, 40]}).to_string(), "sequence"),
        ("/api/simulate", json!({"sequence": "1, x"}).to_string(), "sequence"),
        ("/api/simulate", json!({"sequence": true}).to_string(), "sequence"),
        (
            "/api/simulate",
            json!({"inlet": {"lo": 0.8, "hi": 0.2}}).to_string(),
            "inlet",
        ),
        ("/api/simulate", json!({"seqeunce": [1]}).to_string(), ""),
        (
            "/api/simulate",
            json!({"target": {"h": 1, "w": 2, "rows": ["0a"]}}).to_string(),
            "target",
        ),
        (
            "/api/pmr",
            json!({"a": {"h": 1, "w": 1, "rows": ["1"]}}).to_string(),
            "",
        ),
        (
            "/api/pmr",
            json!({"a": {"h": 1, "w": 1, "rows": ["1"]}, "b": {"h": "one", "w": 1, "rows": ["1"]}}).to_string(),
            "b.h",
        ),
        (
            "/api/suggest",
            json!({"target": {"h": 1, "w": 1, "rows": ["1"]}}).to_string(),
            "",
        ),
        ("/api/simulate", "{not json".to_string(), ""),
    ];
    for (uri, body, field) in cases {
        let (status, reply) = call(&st, "POST", uri, Some(body.clone())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body} -> {reply}");
        let v: Value = serde_json::from_str(&reply).unwrap();
        assert!(!v["error"].as_str().unwrap().is_empty());
        if field.is_empty() {
            assert!(v.get("field").is_none() || v["field"] != "", "{reply}");
        } else {
            assert_eq!(v["field"], field, "{body} -> {reply}");
        }
    }
    let (status, _) = call(&st, "GET", "/api/nothing", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn checkpoints_are_listed_and_unknown_ones_are_404() {
    let dir = tempfile::tempdir().unwrap();
    trained_checkpoint(dir.path(), "beta", 1);
    trained_checkpoint(dir.path(), "alpha", 2);
    fs::copy(dir.path().join("beta/checkpoint.json"), dir.path().join("gamma.json")).unwrap();
    fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
    let st = state(CheckpointStore::load_dir(dir.path()).unwrap());
    let (status, body) = call(&st, "GET", "/api/checkpoints", None).await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_str(&body).unwrap();
    let ids: Vec<&str> = v
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["id"].as_str().unwrap())
        .collect();
    assert_eq!(ids, ["alpha", "beta", "gamma"]);
    assert_eq!(v[0]["seed"], 2);
    assert_eq!(v[0]["grid"], json!({"height": 12, "width": 32}));
    assert_eq!(v[0]["episodes"], 60);

    let req = json!({"target": doc(&shape_of(&[30, 12])), "checkpoint": "delta"});
    let (status, body) = call(&st, "POST", "/api/suggest", Some(req.to_string())).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(serde_json::from_str::<Value>(&body).unwrap()["field"], "checkpoint");

    let req = json!({"target": doc(&shape_of(&[30, 12])), "checkpoint": "alpha", "k": 0});
    let (status, body) = call(&st, "POST", "/api/suggest", Some(req.to_string())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(serde_json::from_str::<Value>(&body).unwrap()["field"], "k");
    let req = json!({"target": doc(&shape_of(&[30, 12])), "checkpoint": "alpha", "pmr_threshold": 1.5});
    let (status, body) = call(&st, "POST", "/api/suggest", Some(req.to_string())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(serde_json::from_str::<Value>(&body).unwrap()["field"], "pmr_threshold");
    let small = FlowShape::from_fn(GridSpec::new(2, 2).unwrap(), |_, _| true);
    let req = json!({"target": doc(&small), "checkpoint": "alpha"});
    let (status, body) = call(&st, "POST", "/api/suggest", Some(req.to_string())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(serde_json::from_str::<Value>(&body).unwrap()["field"], "target");
}

#[test]
fn a_broken_checkpoint_file_stops_startup() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), "{}").unwrap();
    assert!(CheckpointStore::load_dir(dir.path()).is_err());
    assert!(CheckpointStore::load_dir(&dir.path().join("absent")).is_err());
}

#[tokio::test]
async fn suggest_matches_cli_solve_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    trained_checkpoint(dir.path(), "agent", 5);
    let st = state(CheckpointStore::load_dir(dir.path()).unwrap());
    let targets = [shape_of(&[30, 12]), shape_of(&[5]), shape_of(&[1, 2, 3])];
    for (n, target) in targets.iter().enumerate() {
        let path = dir.path().join(format!("target{n}.json"));
        write_shape(&path, target).unwrap();
        for (k, seed) in [(1usize, None), (3, Some(9u64))] {
            let mut req = json!({"target": doc(target), "checkpoint": "agent", "k": k});
            let mut args = vec![
                "solve".to_string(),
                "--json".into(),
                "--checkpoint".into(),
                dir.path().join("agent/checkpoint.json").to_string_lossy().into_owned(),
                "--target".into(),
                path.to_string_lossy().into_owned(),
                "--k".into(),
                k.to_string(),
            ];
            if let Some(s) = seed {
                req["seed"] = json!(s);
                args.extend(["--seed".to_string(), s.to_string()]);
            }
            let (status, body) = call(&st, "POST", "/api/suggest", Some(req.to_string())).await;
            assert_eq!(status, StatusCode::OK, "{body}");
            let out = Command::new(BIN).args(&args).output().unwrap();
            assert!(out.status.success());
            assert_eq!(String::from_utf8(out.stdout).unwrap(), body);
            let v: Value = serde_json::from_str(&body).unwrap();
            assert!(!v["candidates"].as_array().unwrap().is_empty());
            assert!(v["candidates"].as_array().unwrap().len() <= k);
        }
    }
}

#[tokio::test]
async fn concurrent_requests_see_the_same_snapshot() {
    let st = state(CheckpointStore::default());
    let req = json!({"sequence": "8, 16, 24"}).to_string();
    let expected = call(&st, "POST", "/api/simulate", Some(req.clone())).await.1;
    let mut tasks = Vec::new();
    for _ in 0..16 {
        let (st, req) = (Arc::clone(&st), req.clone());
        tasks.push(tokio::spawn(async move {
            call(&st, "POST", "/api/simulate", Some(req)).await.1
        }));
    }
    for t in tasks {
        assert_eq!(t.await.unwrap(), expected);
    }
}

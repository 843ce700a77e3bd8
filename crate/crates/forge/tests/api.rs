use std::path::Path;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use base64::Engine;
use collage_core::image::RgbImage;
use collage_forge::api::{router, AppState, CheckpointResponse, Created, ErrorBody, HitResponse, SnapshotBody};
use collage_core::session::{EditOutcome, ExportRecord, Phase, SessionState};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

fn write_patches(dir: &Path) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..3 {
        let img = RgbImage::from_fn(12 + 2 * i, 10, |x, y| {
            [0.2 + 0.05 * i as f64, x as f64 / 20.0, y as f64 / 20.0]
        });
        img.save_png(&dir.join(format!("p{i}.png"))).unwrap();
    }
}

fn config(root: &Path) -> Value {
    write_patches(&root.join("patches"));
    json!({
        "patch_dir": root.join("patches"),
        "out_dir": root.join("out"),
        "prompts": { "global": "harbour at dusk" },
        "canvas": 32,
        "grid": 2,
        "crop": 16,
        "num_patches": 3,
        "base_scale": 0.3,
        "target_lo_res": 8,
        "mode": { "compositing": "opacity" },
        "optimizer": { "steps": 200, "seed": 5 },
        "evolution": { "population": 2, "period": 5 },
        "critic": { "kind": "pseudo_embedding", "seed": 1 }
    })
}

async fn send(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    send_with(app, method, uri, body, None).await
}

async fn send_with(
    app: &Router,
    method: Method,
    uri: &str,
    body: Option<Value>,
    accept: Option<&str>,
) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(a) = accept {
        req = req.header(header::ACCEPT, a);
    }
    let req = match body {
        Some(v) => req
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from(v.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

fn parse<T: serde::de::DeserializeOwned>(bytes: &[u8]) -> T {
    serde_json::from_slice(bytes).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(bytes)))
}

async fn create(app: &Router, cfg: Value) -> String {
    let (status, body) = send(app, Method::POST, "/session", Some(cfg)).await;
    assert_eq!(status, StatusCode::CREATED, "{}", String::from_utf8_lossy(&body));
    let created: Created = parse(&body);
    assert_eq!(created.state.step, 0);
    assert_eq!(created.state.phase, Phase::Paused);
    created.id
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn session_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(AppState::new(false));
    let id = create(&app, config(dir.path())).await;

    // At most one session unless multi-session is enabled.
    let (status, body) = send(&app, Method::POST, "/session", Some(config(dir.path()))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(parse::<ErrorBody>(&body).error, "session_exists");

    let (status, body) = send(&app, Method::POST, &format!("/session/{id}/control"), Some(json!({"action": "step_n", "n": 6}))).await;
    assert_eq!(status, StatusCode::OK);
    let st: SessionState = parse(&body);
    assert_eq!((st.step, st.phase, st.tournaments), (6, Phase::Paused, 1));

    let (status, body) = send(&app, Method::GET, &format!("/session/{id}/state"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(parse::<SessionState>(&body), st);

    // Pause while paused changes nothing.
    let (_, body) = send(&app, Method::POST, &format!("/session/{id}/control"), Some(json!({"action": "pause"}))).await;
    assert_eq!(parse::<SessionState>(&body), st);

    let (status, _) = send(&app, Method::DELETE, &format!("/session/{id}"), None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    let (status, body) = send(&app, Method::GET, &format!("/session/{id}/state"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(parse::<ErrorBody>(&body).error, "not_found");
    create(&app, config(dir.path())).await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn hit_then_edit_is_visible_in_state() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(AppState::new(false));
    let id = create(&app, config(dir.path())).await;

    let (_, body) = send(&app, Method::GET, &format!("/session/{id}/state"), None).await;
    let st: SessionState = parse(&body);
    assert_eq!(st.poses.len(), 3);
    // Probe each patch's centre; the topmost patch there is what a click selects.
    let mut picked = None;
    for pose in &st.poses {
        let (x, y) = (pose.x.round() as i64, pose.y.round() as i64);
        if !(0..32).contains(&x) || !(0..32).contains(&y) {
            continue;
        }
        let (status, body) = send(&app, Method::GET, &format!("/session/{id}/hit?x={x}&y={y}"), None).await;
        assert_eq!(status, StatusCode::OK);
        if let Some(p) = parse::<HitResponse>(&body).patch {
            picked = Some(p);
            break;
        }
    }
    let patch = picked.expect("no patch under any patch centre");
    let (status, _) = send(&app, Method::GET, &format!("/session/{id}/hit?x=40&y=0"), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let old = st.poses[patch];
    let dx = if old.x > 16.0 { -10.0 } else { 10.0 };
    let edit = json!({"genome_id": st.selected_genome, "patch_index": patch, "pose": {"x": old.x + dx}});
    let (status, body) = send(&app, Method::POST, &format!("/session/{id}/edit"), Some(edit.clone())).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let out: EditOutcome = parse(&body);
    assert!(!out.clamped);

    let (_, body) = send(&app, Method::GET, &format!("/session/{id}/state"), None).await;
    let st2: SessionState = parse(&body);
    assert!((st2.poses[patch].x - old.x - dx).abs() < 1e-9);
    assert_eq!(st2.poses[patch], out.pose);

    let (status, body) = send(
        &app,
        Method::POST,
        &format!("/session/{id}/edit"),
        Some(json!({"genome_id": 0, "patch_index": 9, "pose": {}})),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND, "{}", String::from_utf8_lossy(&body));

    // Running sessions refuse edits until paused.
    send(&app, Method::POST, &format!("/session/{id}/control"), Some(json!({"action": "run"}))).await;
    let (status, body) = send(&app, Method::POST, &format!("/session/{id}/edit"), Some(edit.clone())).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(parse::<ErrorBody>(&body).error, "edit_while_running");
    let (_, body) = send(&app, Method::POST, &format!("/session/{id}/control"), Some(json!({"action": "pause"}))).await;
    assert_eq!(parse::<SessionState>(&body).phase, Phase::Paused);
    let (status, _) = send(&app, Method::POST, &format!("/session/{id}/edit"), Some(edit)).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn snapshot_export_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(AppState::new(true));
    let id = create(&app, config(dir.path())).await;
    send(&app, Method::POST, &format!("/session/{id}/control"), Some(json!({"action": "step_n", "n": 3}))).await;

    let (status, body) = send(&app, Method::GET, &format!("/session/{id}/snapshot"), None).await;
    assert_eq!(status, StatusCode::OK);
    let snap: SnapshotBody = parse(&body);
    let png = base64::engine::general_purpose::STANDARD.decode(&snap.png_base64).unwrap();
    assert!(png.starts_with(PNG_MAGIC));
    assert_eq!(snap.poses.len(), 3);
    let (status, raw) = send_with(&app, Method::GET, &format!("/session/{id}/snapshot"), None, Some("image/png")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(raw, png);

    let (status, body) = send(&app, Method::POST, &format!("/session/{id}/export"), Some(json!({"width": 96, "height": 96}))).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let rec: ExportRecord = parse(&body);
    assert!(dir.path().join("out").join(&rec.file).exists());
    let (status, _) = send(&app, Method::POST, &format!("/session/{id}/export"), Some(json!({"width": 16, "height": 16}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let ckpt = dir.path().join("state.ckpt");
    let (status, body) = send(&app, Method::POST, &format!("/session/{id}/checkpoint"), Some(json!({"path": ckpt}))).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let saved: CheckpointResponse = parse(&body);
    send(&app, Method::POST, &format!("/session/{id}/control"), Some(json!({"action": "step_n", "n": 4}))).await;
    let (status, body) =
        send(&app, Method::POST, &format!("/session/{id}/checkpoint"), Some(json!({"path": ckpt, "action": "load"}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(parse::<CheckpointResponse>(&body).state, saved.state);

    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[20] ^= 1;
    std::fs::write(&ckpt, bytes).unwrap();
    let (status, body) =
        send(&app, Method::POST, &format!("/session/{id}/checkpoint"), Some(json!({"path": ckpt, "action": "load"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(parse::<ErrorBody>(&body).error, "checksum");

    // Multi-session mode accepts a second session.
    create(&app, config(dir.path())).await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn bad_requests_are_client_errors() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(AppState::new(false));
    let mut cfg = config(dir.path());
    cfg["patch_dir"] = json!(dir.path().join("missing"));
    let (status, _) = send(&app, Method::POST, "/session", Some(cfg)).await;
    assert!(status.is_client_error());

    let mut cfg = config(dir.path());
    cfg["crop"] = json!(20);
    let (status, body) = send(&app, Method::POST, "/session", Some(cfg)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(parse::<ErrorBody>(&body).error, "invalid_layout");

    let mut cfg = config(dir.path());
    cfg["colour"] = json!(1);
    let (status, _) = send(&app, Method::POST, "/session", Some(cfg)).await;
    assert!(status.is_client_error());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn critic_outage_pauses_with_service_unavailable() {
    let dir = tempfile::tempdir().unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut cfg = config(dir.path());
    cfg["critic"] = json!({"kind": "remote", "endpoint": format!("http://127.0.0.1:{port}"), "timeout_secs": 2.0});
    let app = router(AppState::new(false));
    let id = create(&app, cfg).await;
    let (status, body) = send(&app, Method::POST, &format!("/session/{id}/control"), Some(json!({"action": "step_n", "n": 2}))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(parse::<ErrorBody>(&body).error, "critic_unavailable");
    let (_, body) = send(&app, Method::GET, &format!("/session/{id}/state"), None).await;
    let st: SessionState = parse(&body);
    assert_eq!((st.phase, st.step), (Phase::Paused, 0));
    assert!(st.last_error.is_some());
}

use std::sync::{Arc, OnceLock};

use axum::body::{Body, Bytes};
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sanerf_cli::wire::{ClickAdded, ClickPositions, SegmentResponse, SelectionResponse, SessionInfo};
use sanerf_cli::{router, Session, SessionOptions};
use sanerf_core::camera::CameraPose;
use sanerf_core::checkpoint::Checkpoint;
use sanerf_core::config::TrainConfig;
use sanerf_core::mesh::{extract_mesh, read_obj, ClickView, TriMesh, SIGMA_THRESHOLD};
use sanerf_core::radiance::train_nerf;
use sanerf_core::rle::MaskRle;
use sanerf_core::scene::{oracle_render, Dataset, SceneSpec};
use sanerf_core::semantic::SemanticField;
use sanerf_core::teacher::{Teacher, TeacherKind, TeacherSpec};
use sanerf_core::trainer::{calibrate_prompts, train_semantic};
use serde_json::{json, Value};
use tower::ServiceExt;

const VIEW: u32 = 64;

fn tiny() -> TrainConfig {
    TrainConfig {
        nerf_steps: 40,
        sem_steps: 10,
        rays_per_step: 256,
        samples_per_ray: 16,
        grid_resolution: 16,
        sem_grid_resolution: 12,
        sem_channels: 4,
        sem_head_hidden: 8,
        feature_resolution: 8,
        warmup_fresh_steps: 4,
        cache_capacity: 6,
        correlation_samples: 16,
        eval_every: 40,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn dataset() -> &'static Dataset {
    static DS: OnceLock<Dataset> = OnceLock::new();
    DS.get_or_init(|| Dataset::standard(SceneSpec::two_object(), 16, 16).unwrap())
}

fn trained(kind: TeacherKind) -> Checkpoint {
    static BASE: OnceLock<Checkpoint> = OnceLock::new();
    let base = BASE.get_or_init(|| {
        let (field, _) = train_nerf(dataset(), &tiny()).unwrap();
        Checkpoint::new(field)
    });
    let cfg = tiny();
    let res = cfg.image_resolution();
    let mut teacher = Teacher::new(match kind {
        TeacherKind::SingleScale => TeacherSpec::single_scale(0),
        TeacherKind::MultiScale => TeacherSpec::multi_scale(0),
    })
    .unwrap();
    if kind == TeacherKind::MultiScale {
        teacher
            .set_vocabulary(calibrate_prompts(&teacher, dataset(), res).unwrap())
            .unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sem = SemanticField::new(
        base.radiance.bounds(),
        cfg.sem_grid_resolution,
        cfg.sem_channels,
        cfg.sem_head_hidden,
        &teacher.feature_dims(res, res),
        &mut rng,
    )
    .unwrap();
    train_semantic(&base.radiance, &mut sem, &teacher, dataset(), &cfg, |_, _| Ok(())).unwrap();
    Checkpoint {
        semantic: Some(sem),
        teacher: Some(teacher.spec().clone()),
        config: Some(cfg),
        ..base.clone()
    }
}

fn analytic_mesh() -> TriMesh {
    static MESH: OnceLock<TriMesh> = OnceLock::new();
    MESH.get_or_init(|| extract_mesh(&SceneSpec::two_object(), 48, SIGMA_THRESHOLD).unwrap())
        .clone()
}

fn no_mesh() -> SessionOptions {
    SessionOptions {
        mesh_resolution: None,
        ..SessionOptions::default()
    }
}

/// Single-scale session with the analytic scene mesh attached.
fn app() -> Router {
    static CK: OnceLock<Checkpoint> = OnceLock::new();
    let ck = CK.get_or_init(|| trained(TeacherKind::SingleScale)).clone();
    let session = Session::from_checkpoint(ck, &no_mesh())
        .unwrap()
        .with_mesh(analytic_mesh());
    router(Arc::new(session))
}

fn pose(i: usize) -> CameraPose {
    dataset().test[i].with_size(VIEW, VIEW)
}

fn pose_json(p: &CameraPose) -> Value {
    serde_json::to_value(p.to_record()).unwrap()
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Option<String>, Bytes) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let ctype = resp
        .headers()
        .get(header::CONTENT_TYPE)
        .map(|v| v.to_str().unwrap().to_string());
    (status, ctype, resp.into_body().collect().await.unwrap().to_bytes())
}

async fn post(app: &Router, uri: &str, body: impl Into<Body>) -> (StatusCode, Option<String>, Bytes) {
    let req = Request::post(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(body.into())
        .unwrap();
    send(app, req).await
}

async fn post_json(app: &Router, uri: &str, body: Value) -> (StatusCode, Bytes) {
    let (s, _, b) = post(app, uri, body.to_string()).await;
    (s, b)
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Option<String>, Bytes) {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

fn error_code(body: &Bytes) -> String {
    let v: Value = serde_json::from_slice(body).unwrap();
    v["error"]["code"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn session_reports_the_snapshot() {
    let app = app();
    let (status, _, body) = get(&app, "/session").await;
    assert_eq!(status, StatusCode::OK);
    let info: SessionInfo = serde_json::from_slice(&body).unwrap();
    assert_eq!(info.teacher_kind, TeacherKind::SingleScale);
    assert!(info.mesh_attached);
    assert!(info.mesh_triangle_count > 0);
    assert_eq!(info.snapshot_id.len(), 16);
}

#[tokio::test]
async fn render_returns_a_png_of_the_requested_size() {
    let app = app();
    let (status, ctype, body) = post_json_raw(
        &app,
        "/render",
        json!({"pose": pose_json(&pose(0)), "width": 40, "height": 24}),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ctype.as_deref(), Some("image/png"));
    let img = image::load_from_memory(&body).unwrap();
    assert_eq!((img.width(), img.height()), (40, 24));
}

async fn post_json_raw(app: &Router, uri: &str, body: Value) -> (StatusCode, Option<String>, Bytes) {
    post(app, uri, body.to_string()).await
}

#[tokio::test]
async fn click_segmentation_is_deterministic_and_never_encodes() {
    let app = app();
    let body = json!({"pose": pose_json(&pose(1)), "u": 32, "v": 30});
    let (s1, b1) = post_json(&app, "/segment/click", body.clone()).await;
    let (s2, b2) = post_json(&app, "/segment/click", body).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    let r1: SegmentResponse = serde_json::from_slice(&b1).unwrap();
    let r2: SegmentResponse = serde_json::from_slice(&b2).unwrap();
    assert_eq!(r1.mask_rle, r2.mask_rle);
    assert_eq!((r1.mask_rle.width, r1.mask_rle.height), (VIEW, VIEW));
    assert_eq!(r1.mask_rle.decode().unwrap().len(), (VIEW * VIEW) as usize);
    assert!(r1.mask_rle.decode().unwrap()[(30 * VIEW + 32) as usize]);
    assert!(r1.logits_stats.min <= r1.logits_stats.mean && r1.logits_stats.mean <= r1.logits_stats.max);
    let (_, _, info) = get(&app, "/session").await;
    let info: SessionInfo = serde_json::from_slice(&info).unwrap();
    assert_eq!(info.teacher_encode_calls, 0);
}

#[tokio::test]
async fn concurrent_segmentation_matches_serial() {
    let app = app();
    let bodies: Vec<Value> = (0..4)
        .map(|i| json!({"pose": pose_json(&pose(i)), "u": 10 + 10 * i as u32, "v": 31}))
        .collect();
    let mut serial = Vec::new();
    for b in &bodies {
        serial.push(post_json(&app, "/segment/click", b.clone()).await.1);
    }
    let handles: Vec<_> = bodies
        .iter()
        .map(|b| {
            let app = app.clone();
            let b = b.clone();
            tokio::spawn(async move { post_json(&app, "/segment/click", b).await.1 })
        })
        .collect();
    for (h, s) in handles.into_iter().zip(&serial) {
        let a: SegmentResponse = serde_json::from_slice(&h.await.unwrap()).unwrap();
        let b: SegmentResponse = serde_json::from_slice(s).unwrap();
        assert_eq!(a.mask_rle, b.mask_rle);
    }
}

#[tokio::test]
async fn segmentation_at_256_fits_the_interactive_budget() {
    let app = app();
    let p = dataset().test[2].with_size(256, 256);
    let (status, body) = post_json(
        &app,
        "/segment/click",
        json!({"pose": pose_json(&p), "u": 128, "v": 128}),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let r: SegmentResponse = serde_json::from_slice(&body).unwrap();
    assert!(
        r.feature_render_ms + r.decode_ms < 200.0,
        "{} + {} ms",
        r.feature_render_ms,
        r.decode_ms
    );
}

#[tokio::test]
async fn bad_requests_get_machine_readable_codes() {
    let app = app();
    let (status, _, body) = post(&app, "/segment/click", "{").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&body), "malformed_body");

    let (status, body) = post_json(&app, "/segment/click", json!({"pose": pose_json(&pose(0)), "u": 3})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&body), "malformed_body");

    let (status, body) = post_json(
        &app,
        "/segment/click",
        json!({"pose": pose_json(&pose(0)), "u": VIEW, "v": 0}),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error_code(&body), "invalid_request");

    let mut bad = pose_json(&pose(0));
    bad["quaternion"] = json!([2.0, 0.0, 0.0, 0.0]);
    let (status, body) = post_json(&app, "/segment/click", json!({"pose": bad, "u": 1, "v": 1})).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error_code(&body), "invalid_request");

    let (status, body) = post_json(
        &app,
        "/segment/prompt",
        json!({"pose": pose_json(&pose(0)), "prompt": "sphere"}),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(error_code(&body), "wrong_teacher");

    let (status, _, body) = get(&app, "/nowhere").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(error_code(&body), "not_found");

    let (status, _, body) = get(&app, "/clicks?pose=%7B").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&body), "malformed_body");
}

#[tokio::test]
async fn prompts_resolve_against_the_vocabulary() {
    let ck = trained(TeacherKind::MultiScale);
    let app = router(Arc::new(Session::from_checkpoint(ck, &no_mesh()).unwrap()));
    let (_, _, info) = get(&app, "/session").await;
    let info: SessionInfo = serde_json::from_slice(&info).unwrap();
    assert_eq!(info.teacher_kind, TeacherKind::MultiScale);
    assert!(!info.mesh_attached);
    assert!(info.prompt_vocabulary.contains(&"sphere".to_string()));

    let (status, body) = post_json(
        &app,
        "/segment/prompt",
        json!({"pose": pose_json(&pose(0)), "prompt": "sphere"}),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let r: SegmentResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!((r.mask_rle.width, r.mask_rle.height), (VIEW, VIEW));

    let (status, body) = post_json(
        &app,
        "/segment/prompt",
        json!({"pose": pose_json(&pose(0)), "prompt": "teapot"}),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(error_code(&body), "unknown_prompt");

    let mask = MaskRle::encode(VIEW, VIEW, &vec![true; (VIEW * VIEW) as usize]).unwrap();
    let (status, body) = post_json(&app, "/project", json!({"pose": pose_json(&pose(0)), "maskRle": mask})).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(error_code(&body), "no_mesh");
}

#[tokio::test]
async fn projected_silhouette_exports_the_selected_triangles() {
    let app = app();
    let (status, _, body) = get(&app, "/mesh/selected").await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(error_code(&body), "empty_selection");

    let scene = SceneSpec::two_object();
    let mut count = 0;
    for i in 0..3 {
        let p = pose(i);
        let mask = MaskRle::encode(VIEW, VIEW, &oracle_render(&scene, &p).mask_of(1)).unwrap();
        let (status, body) = post_json(&app, "/project", json!({"pose": pose_json(&p), "maskRle": mask})).await;
        assert_eq!(status, StatusCode::OK);
        count = serde_json::from_slice::<SelectionResponse>(&body)
            .unwrap()
            .selected_triangle_count;
    }
    assert!(count > 0);
    let (status, ctype, body) = get(&app, "/mesh/selected").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ctype.as_deref(), Some("model/obj"));
    let part = read_obj(&body[..]).unwrap();
    assert_eq!(part.triangles.len(), count);

    let (status, body) = post_json(&app, "/selection/reset", json!({})).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(
        serde_json::from_slice::<SelectionResponse>(&body)
            .unwrap()
            .selected_triangle_count,
        0
    );
    let (status, _, _) = get(&app, "/mesh/selected").await;
    assert_eq!(status, StatusCode::CONFLICT);

    let small = MaskRle::encode(8, 8, &[true; 64]).unwrap();
    let (status, body) = post_json(&app, "/project", json!({"pose": pose_json(&pose(0)), "maskRle": small})).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error_code(&body), "invalid_request");
}

#[tokio::test]
async fn clicks_are_tracked_across_views() {
    let app = app();
    let p = pose(0);
    let centre = p.project([-0.4, 0.0, 0.0]).unwrap();
    let (u, v) = (centre.0 as u32, centre.1 as u32);
    let (status, body) = post_json(&app, "/clicks", json!({"pose": pose_json(&p), "u": u, "v": v})).await;
    assert_eq!(status, StatusCode::OK);
    let added: ClickAdded = serde_json::from_slice(&body).unwrap();
    assert_eq!(added.click_id, 0);

    let (status, body) = post_json(&app, "/clicks", json!({"pose": pose_json(&p), "u": 0, "v": 0})).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error_code(&body), "click_missed_surface");

    let query = |p: &CameraPose| {
        let text = pose_json(p).to_string();
        let enc: String = text
            .bytes()
            .map(|b| match b {
                b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'.' | b'_' => (b as char).to_string(),
                _ => format!("%{b:02X}"),
            })
            .collect();
        format!("/clicks?pose={enc}")
    };
    let (status, _, body) = get(&app, &query(&p)).await;
    assert_eq!(status, StatusCode::OK);
    let tracked: ClickPositions = serde_json::from_slice(&body).unwrap();
    assert_eq!(tracked.clicks.len(), 1);
    match tracked.clicks[0].view {
        ClickView::Visible { x, y } => {
            assert!((x - (f64::from(u) + 0.5)).abs() <= 0.5 && (y - (f64::from(v) + 0.5)).abs() <= 0.5);
        }
        other => panic!("source view sees {other:?}"),
    }
    let other = pose(3);
    let (_, _, body) = get(&app, &query(&other)).await;
    let tracked: ClickPositions = serde_json::from_slice(&body).unwrap();
    assert_eq!(tracked.clicks[0].click_id, 0);
}

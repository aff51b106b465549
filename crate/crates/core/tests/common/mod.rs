//! Scripted walk through every service endpoint, checked against golden files.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use axum::body::{to_bytes, Body};
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;

use cellpilot::dataio::{export_session, import_session, AnnotationFile};
use cellpilot::maskcore::rle;
use cellpilot::model::{inject_lora, ModelConfig, PromptableModel, ToyBackbone};
use cellpilot::pipeline::{BlobDetector, CellDetector, ExternalDetector, Session};
use cellpilot::service::{router, AppState, ServiceConfig};
use cellpilot::{Prompt, RgbImage};

pub fn toy_model() -> Arc<dyn PromptableModel> {
    let cfg = ModelConfig::default();
    let model = inject_lora(ToyBackbone::new(cfg.clone(), 11).unwrap(), &cfg.lora).unwrap();
    Arc::new(model)
}

/// 72×100 dark field with three bright cells.
pub fn cells_image() -> RgbImage {
    let (h, w) = (72, 100);
    let cells = [
        (20.0, 25.0, 9.0, 12.0),
        (48.0, 70.0, 11.0, 8.0),
        (55.0, 20.0, 6.0, 6.0),
    ];
    let mut img = RgbImage::new(h, w);
    for r in 0..h {
        for c in 0..w {
            let inside = cells.iter().any(|&(cr, cc, ar, ac)| {
                let (dr, dc) = ((r as f64 - cr) / ar, (c as f64 - cc) / ac);
                dr * dr + dc * dc <= 1.0
            });
            let px = if inside {
                [0.9, 0.75, 0.8]
            } else {
                [0.1, 0.12, 0.2]
            };
            img.set_pixel(r, c, px);
        }
    }
    img
}

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

pub struct Reply {
    pub status: StatusCode,
    pub retry_after: Option<String>,
    pub body: Value,
}

pub async fn call(app: &Router, method: Method, uri: &str, body: impl Into<Body>) -> Reply {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .body(body.into())
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let retry_after = resp
        .headers()
        .get("retry-after")
        .map(|v| v.to_str().unwrap().to_string());
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let body = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes)
            .unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    Reply {
        status,
        retry_after,
        body,
    }
}

/// Replaces timestamps and the given ids with placeholders.
pub fn normalize(v: &Value, ids: &[(String, &str)]) -> Value {
    match v {
        Value::Object(map) => Value::Object(
            map.iter()
                .map(|(k, v)| {
                    let v = if k.ends_with("_at") && v.is_string() {
                        Value::String("<time>".into())
                    } else {
                        normalize(v, ids)
                    };
                    (k.clone(), v)
                })
                .collect(),
        ),
        Value::Array(items) => Value::Array(items.iter().map(|v| normalize(v, ids)).collect()),
        Value::String(s) => {
            let mut s = s.clone();
            for (id, label) in ids {
                s = s.replace(id.as_str(), label);
            }
            Value::String(s)
        }
        other => other.clone(),
    }
}

/// Compares against `tests/golden/<name>.json`; `UPDATE_GOLDEN=1` rewrites it.
pub fn golden(name: &str, reply: &Reply, ids: &[(String, &str)]) -> Result<(), String> {
    let actual = json!({
        "status": reply.status.as_u16(),
        "body": normalize(&reply.body, ids),
    });
    let path = golden_dir().join(format!("{name}.json"));
    if std::env::var("UPDATE_GOLDEN").as_deref() == Ok("1") {
        std::fs::create_dir_all(golden_dir()).unwrap();
        std::fs::write(&path, serde_json::to_string_pretty(&actual).unwrap() + "\n").unwrap();
        return Ok(());
    }
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let expected: Value = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    if expected == actual {
        Ok(())
    } else {
        Err(format!(
            "{name}: expected {}\n got {}",
            serde_json::to_string(&expected).unwrap(),
            serde_json::to_string(&actual).unwrap()
        ))
    }
}

fn state(detector: Option<Arc<dyn CellDetector>>, config: ServiceConfig) -> Arc<AppState> {
    AppState::new(toy_model(), detector, config).unwrap()
}

fn blob() -> Option<Arc<dyn CellDetector>> {
    Some(Arc::new(BlobDetector::default()))
}

/// One named check of the contract.
pub type Check = (String, Result<(), String>);

fn check(out: &mut Vec<Check>, name: &str, r: Result<(), String>) {
    out.push((name.to_string(), r));
}

fn expect(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn ids_of(list: &Value) -> Vec<u64> {
    list["masks"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| m["id"].as_u64().unwrap())
        .collect()
}

/// Every endpoint once, in the order a user would hit them.
pub async fn endpoint_script() -> Vec<Check> {
    let mut out = Vec::new();
    let app = router(state(blob(), ServiceConfig::default()));
    let image = cells_image();
    let png = image.encode_png().unwrap();

    let r = call(&app, Method::GET, "/health", Body::empty()).await;
    check(&mut out, "health", golden("health", &r, &[]));

    let created = call(&app, Method::POST, "/sessions?name=cells.png", png.clone()).await;
    let sid = created.body["id"].as_str().unwrap_or_default().to_string();
    let ids = vec![(sid.clone(), "<session>")];
    check(
        &mut out,
        "create_session",
        golden("create_session", &created, &ids),
    );

    let r = call(&app, Method::POST, "/sessions", Body::empty()).await;
    check(&mut out, "create_empty", golden("create_empty", &r, &ids));
    let r = call(&app, Method::POST, "/sessions", "not an image").await;
    check(
        &mut out,
        "create_undecodable",
        golden("create_undecodable", &r, &ids),
    );

    let again = call(&app, Method::POST, "/sessions?name=cells.png", png.clone()).await;
    check(
        &mut out,
        "create_distinct_handle",
        expect(
            again.status == StatusCode::CREATED && again.body["id"].as_str() != Some(sid.as_str()),
            format!("second create gave {:?}", again.body),
        ),
    );

    let r = call(&app, Method::GET, &format!("/sessions/{sid}"), Body::empty()).await;
    check(&mut out, "get_session", golden("get_session", &r, &ids));

    let auto = call(
        &app,
        Method::POST,
        &format!("/sessions/{sid}/auto"),
        Body::empty(),
    )
    .await;
    check(&mut out, "auto_segment", golden("auto_segment", &auto, &ids));
    let repeat = call(
        &app,
        Method::POST,
        &format!("/sessions/{sid}/auto"),
        Body::empty(),
    )
    .await;
    let first = ids_of(&auto.body);
    let second = ids_of(&repeat.body);
    check(
        &mut out,
        "auto_segment_repeat",
        expect(
            first.len() == second.len() && first.iter().all(|i| !second.contains(i)),
            format!("repeat gave {second:?} after {first:?}"),
        ),
    );

    let point = json!({"kind": "point", "row": 20, "col": 25, "polarity": "positive"});
    let added = call(
        &app,
        Method::POST,
        &format!("/sessions/{sid}/masks"),
        point.to_string(),
    )
    .await;
    check(&mut out, "add_point", golden("add_point", &added, &ids));
    let mid = added.body["id"].as_u64().unwrap_or(0);

    let bx = json!({"kind": "box", "row_min": 36, "col_min": 60, "row_max": 60, "col_max": 80});
    let r = call(
        &app,
        Method::POST,
        &format!("/sessions/{sid}/masks"),
        bx.to_string(),
    )
    .await;
    check(&mut out, "add_box", golden("add_box", &r, &ids));

    let neg = json!({"kind": "point", "row": 22, "col": 36, "polarity": "negative"});
    let refined = call(
        &app,
        Method::POST,
        &format!("/sessions/{sid}/masks/{mid}/prompts"),
        neg.to_string(),
    )
    .await;
    check(&mut out, "refine", golden("refine", &refined, &ids));
    check(
        &mut out,
        "refine_history_grows",
        expect(
            refined.body["history_length"].as_u64() == added.body["history_length"].as_u64().map(|n| n + 1),
            "history length did not grow by one",
        ),
    );

    let got = call(
        &app,
        Method::GET,
        &format!("/sessions/{sid}/masks/{mid}"),
        Body::empty(),
    )
    .await;
    check(&mut out, "get_mask", golden("get_mask", &got, &ids));
    check(
        &mut out,
        "get_mask_matches_replay",
        replay_matches(&image, &got.body),
    );

    let r = call(
        &app,
        Method::GET,
        &format!("/sessions/{sid}/masks"),
        Body::empty(),
    )
    .await;
    check(&mut out, "list_masks", golden("list_masks", &r, &ids));

    let r = call(
        &app,
        Method::DELETE,
        &format!("/sessions/{sid}/masks/{mid}/prompts/last"),
        Body::empty(),
    )
    .await;
    check(&mut out, "undo", golden("undo", &r, &ids));
    check(
        &mut out,
        "undo_restores_mask",
        expect(
            r.body["rle"] == added.body["rle"],
            "undo did not restore the first mask",
        ),
    );
    let r = call(
        &app,
        Method::DELETE,
        &format!("/sessions/{sid}/masks/{mid}/prompts/last"),
        Body::empty(),
    )
    .await;
    check(
        &mut out,
        "undo_initial_prompt",
        golden("undo_initial_prompt", &r, &ids),
    );

    let far = json!({"kind": "point", "row": 500, "col": 1, "polarity": "positive"});
    let r = call(
        &app,
        Method::POST,
        &format!("/sessions/{sid}/masks/{mid}/prompts"),
        far.to_string(),
    )
    .await;
    check(
        &mut out,
        "refine_out_of_range",
        golden("refine_out_of_range", &r, &ids),
    );
    let r = call(
        &app,
        Method::POST,
        &format!("/sessions/{sid}/masks"),
        "{\"kind\": \"circle\"}",
    )
    .await;
    check(&mut out, "add_bad_prompt", golden("add_bad_prompt", &r, &ids));

    let nil = uuid::Uuid::nil();
    let r = call(&app, Method::GET, &format!("/sessions/{nil}"), Body::empty()).await;
    check(&mut out, "unknown_session", golden("unknown_session", &r, &ids));
    let r = call(
        &app,
        Method::POST,
        &format!("/sessions/{nil}/auto"),
        Body::empty(),
    )
    .await;
    check(
        &mut out,
        "auto_unknown_session",
        golden("auto_unknown_session", &r, &ids),
    );
    let r = call(
        &app,
        Method::GET,
        &format!("/sessions/{sid}/masks/999"),
        Body::empty(),
    )
    .await;
    check(&mut out, "unknown_mask", golden("unknown_mask", &r, &ids));

    let exported = call(
        &app,
        Method::GET,
        &format!("/sessions/{sid}/export"),
        Body::empty(),
    )
    .await;
    check(&mut out, "export", golden("export", &exported, &ids));
    check(
        &mut out,
        "export_ingest_round_trip",
        ingest_round_trip(&image, &exported.body),
    );

    let r = call(
        &app,
        Method::DELETE,
        &format!("/sessions/{sid}/masks/{mid}"),
        Body::empty(),
    )
    .await;
    check(&mut out, "delete_mask", golden("delete_mask", &r, &ids));
    let r = call(
        &app,
        Method::DELETE,
        &format!("/sessions/{sid}/masks/{mid}"),
        Body::empty(),
    )
    .await;
    check(
        &mut out,
        "delete_missing_mask",
        golden("delete_missing_mask", &r, &ids),
    );

    let r = call(&app, Method::GET, "/nowhere", Body::empty()).await;
    check(&mut out, "no_route", golden("no_route", &r, &ids));
    let r = call(&app, Method::PUT, "/sessions", Body::empty()).await;
    check(&mut out, "wrong_method", golden("wrong_method", &r, &ids));

    out.extend(detector_failures(&png).await);
    out.extend(persistence(&png).await);
    out
}

fn replay_matches(image: &RgbImage, view: &Value) -> Result<(), String> {
    let model = toy_model();
    let session = Session::new(model.as_ref(), image.clone(), "").map_err(|e| e.to_string())?;
    let prompts: Vec<Prompt> = serde_json::from_value(view["prompts"].clone()).map_err(|e| e.to_string())?;
    let (mask, _) = session
        .decode(model.as_ref(), &prompts)
        .map_err(|e| e.to_string())?;
    let served: rle::Rle = serde_json::from_value(view["rle"].clone()).map_err(|e| e.to_string())?;
    expect(
        rle::encode(&mask) == served,
        "served mask differs from the replayed history",
    )
}

fn ingest_round_trip(image: &RgbImage, exported: &Value) -> Result<(), String> {
    let file: AnnotationFile = serde_json::from_value(exported.clone()).map_err(|e| e.to_string())?;
    file.check_schema().map_err(|e| e.to_string())?;
    let model = toy_model();
    let session = import_session(model.as_ref(), image.clone(), &file).map_err(|e| e.to_string())?;
    let mut again = export_session(&session);
    again.exported_at = file.exported_at;
    expect(
        again == file,
        "re-exported annotations differ from the original export",
    )
}

async fn detector_failures(png: &[u8]) -> Vec<Check> {
    let mut out = Vec::new();
    let app = router(state(None, ServiceConfig::default()));
    let sid = call(&app, Method::POST, "/sessions", png.to_vec()).await.body["id"]
        .as_str()
        .unwrap_or_default()
        .to_string();
    let ids = vec![(sid.clone(), "<session>")];
    let r = call(
        &app,
        Method::POST,
        &format!("/sessions/{sid}/auto"),
        Body::empty(),
    )
    .await;
    check(
        &mut out,
        "auto_without_detector",
        golden("auto_without_detector", &r, &ids),
    );

    let mut slow = ExternalDetector::new("sh");
    slow.args = vec!["-c".into(), "sleep 5".into()];
    slow.timeout = Duration::from_millis(300);
    let app = router(state(Some(Arc::new(slow)), ServiceConfig::default()));
    let sid = call(&app, Method::POST, "/sessions", png.to_vec()).await.body["id"]
        .as_str()
        .unwrap_or_default()
        .to_string();
    let ids = vec![(sid.clone(), "<session>")];
    let r = call(
        &app,
        Method::POST,
        &format!("/sessions/{sid}/auto"),
        Body::empty(),
    )
    .await;
    check(&mut out, "detector_timeout", golden("detector_timeout", &r, &ids));
    check(
        &mut out,
        "detector_timeout_retry_after",
        expect(r.retry_after.is_some(), "503 without Retry-After"),
    );
    out
}

async fn persistence(png: &[u8]) -> Vec<Check> {
    let mut out = Vec::new();
    let dir = tempfile::tempdir().unwrap();
    let config = ServiceConfig {
        persist_dir: Some(dir.path().to_path_buf()),
        max_sessions: 1,
        ..Default::default()
    };
    let point = json!({"kind": "point", "row": 48, "col": 70, "polarity": "positive"}).to_string();

    let app = router(state(blob(), config.clone()));
    let a = call(&app, Method::POST, "/sessions?name=a.png", png.to_vec())
        .await
        .body["id"]
        .as_str()
        .unwrap_or_default()
        .to_string();
    call(&app, Method::POST, &format!("/sessions/{a}/masks"), point.clone()).await;
    let before = call(&app, Method::GET, &format!("/sessions/{a}/export"), Body::empty()).await;
    // A second session pushes the first out of memory.
    let b = call(&app, Method::POST, "/sessions?name=b.png", png.to_vec())
        .await
        .body["id"]
        .as_str()
        .unwrap_or_default()
        .to_string();
    let spilled = call(&app, Method::GET, &format!("/sessions/{a}/export"), Body::empty()).await;
    let ids = vec![(a.clone(), "<a>"), (b.clone(), "<b>")];
    check(
        &mut out,
        "spilled_session_reloads",
        expect(
            normalize(&before.body, &ids) == normalize(&spilled.body, &ids),
            "spilled session came back different",
        ),
    );
    drop(app);

    let app = router(state(blob(), config));
    let after = call(&app, Method::GET, &format!("/sessions/{a}/export"), Body::empty()).await;
    check(
        &mut out,
        "session_survives_restart",
        expect(
            after.status == StatusCode::OK && normalize(&before.body, &ids) == normalize(&after.body, &ids),
            format!("after restart: {} {:?}", after.status, after.body),
        ),
    );
    let r = call(&app, Method::GET, &format!("/sessions/{b}"), Body::empty()).await;
    check(
        &mut out,
        "restart_keeps_all_sessions",
        expect(
            r.status == StatusCode::OK,
            format!("second session: {}", r.status),
        ),
    );
    out
}

mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use ecgwm::commands::{load_engine, ModelPaths};
use ecgwm::config::RunConfig;
use ecgwm::http::router;

struct Ctx {
    _fx: common::Fixture,
    app: axum::Router,
}

fn ctx() -> Ctx {
    let fx = common::fixture();
    let paths = ModelPaths { codec: Some(fx.codec.clone()), world_model: Some(fx.world_model.clone()), registry: None };
    let engine = load_engine(&paths, &RunConfig::default()).unwrap();
    Ctx { app: router(Arc::new(engine)), _fx: fx }
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn parse(b: &[u8]) -> Value {
    serde_json::from_slice(b).unwrap()
}

#[tokio::test]
async fn health_and_actions() {
    let c = ctx();
    let (s, b) = call(&c.app, "GET", "/api/health", None).await;
    assert_eq!(s, StatusCode::OK);
    let v = parse(&b);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["schema_version"], 1);
    assert!(v["versions"].is_object());

    let (s, b) = call(&c.app, "GET", "/api/actions", None).await;
    assert_eq!(s, StatusCode::OK);
    let ids: Vec<String> = parse(&b)["actions"].as_array().unwrap().iter().map(|a| a["id"].as_str().unwrap().to_string()).collect();
    assert!(ids.contains(&"dofetilide@1".to_string()));
    assert!(!ids.iter().any(|id| id.contains("diltiazem") && id.contains("dofetilide")), "forbidden pair listed");
}

#[tokio::test]
async fn simulate_returns_k_finite_samples_with_seeds() {
    let c = ctx();
    let body = json!({"action_id": "dofetilide", "dose": 1.0, "K": 3, "lambda": 0.6, "seed": 42}).to_string();
    let (s, b) = call(&c.app, "POST", "/api/simulate", Some(&body)).await;
    assert_eq!(s, StatusCode::OK, "{}", String::from_utf8_lossy(&b));
    let v = parse(&b);
    assert_eq!(v["K"], 3);
    assert_eq!(v["seed"], 42);
    assert_eq!(v["action_id"], "dofetilide@1");
    let samples = v["samples"].as_array().unwrap();
    assert_eq!(samples.len(), 3);
    assert_eq!(v["risk"]["samples"].as_array().unwrap().len(), 3);
    for smp in samples {
        assert!(smp["seed"].is_u64());
        for ch in smp["waveform"]["channels"].as_array().unwrap() {
            let ch = ch.as_array().unwrap();
            assert!(ch.len() <= 2000);
            assert!(ch.iter().all(|x| x.as_f64().is_some_and(f64::is_finite)));
        }
    }
    assert!(!v["epk_template"].as_array().unwrap().is_empty());
    let mu = v["stats"]["mu"].as_f64().unwrap();
    let s2 = v["stats"]["sigma2"].as_f64().unwrap();
    assert!((v["score"]["s"].as_f64().unwrap() - (mu + 0.6 * s2.sqrt())).abs() < 1e-12);

    // Same request, same bytes.
    let (_, b2) = call(&c.app, "POST", "/api/simulate", Some(&body)).await;
    assert_eq!(b, b2);
}

#[tokio::test]
async fn simulate_validation_errors() {
    let c = ctx();
    let (s, b) = call(&c.app, "POST", "/api/simulate", Some(r#"{"action_id": "placebo@1", "K": 0, "seed": 1}"#)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(parse(&b)["fields"][0]["field"], "K");

    let (s, b) = call(&c.app, "POST", "/api/simulate", Some(r#"{"action_id": "placebo@1", "seed": 1, "gamma": 2}"#)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(parse(&b)["fields"][0]["message"].as_str().unwrap().contains("gamma"));

    let (s, b) = call(&c.app, "POST", "/api/simulate", Some(r#"{"action_id": "placebo@1", "seed": "x"}"#)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(parse(&b)["fields"][0]["field"], "seed");

    let (s, _) = call(&c.app, "POST", "/api/simulate", Some("{not json")).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (s, b) = call(&c.app, "POST", "/api/simulate", Some(r#"{"action_id": "aspirin@1", "seed": 1}"#)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(parse(&b)["reason"], "unknown-drug");

    let (s, b) = call(&c.app, "POST", "/api/simulate", Some(r#"{"action_id": "dofetilide@99", "seed": 1}"#)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(parse(&b)["reason"], "dose-exceeded");

    let (s, b) =
        call(&c.app, "POST", "/api/rank", Some(r#"{"action_ids": ["diltiazem@1+dofetilide@1"], "seed": 1}"#)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(parse(&b)["reason"], "forbidden-pair");

    let (s, _) = call(&c.app, "POST", "/api/rank", Some(r#"{"seed": 1, "lambda": -1}"#)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn rank_subset_is_sorted_and_carries_seed() {
    let c = ctx();
    let body = r#"{"action_ids": ["placebo@1", "dofetilide@1.5", "lidocaine@0.5"], "K": 3, "lambda": 0.6, "seed": 9}"#;
    let (s, b) = call(&c.app, "POST", "/api/rank", Some(body)).await;
    assert_eq!(s, StatusCode::OK, "{}", String::from_utf8_lossy(&b));
    let v = parse(&b);
    assert_eq!(v["seed"], 9);
    assert_eq!(v["K"], 3);
    let acts = v["actions"].as_array().unwrap();
    assert_eq!(acts.len(), 3);
    let scores: Vec<f64> = acts.iter().map(|a| a["S"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(acts.iter().map(|a| a["rank"].as_u64().unwrap()).collect::<Vec<_>>(), vec![1, 2, 3]);
}

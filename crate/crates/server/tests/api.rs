use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use potsmooth::catalog::{Catalog, Dataset};
use potsmooth::geodesy::{GeoBox, GeoPoint};
use potsmooth::request::GridResponse;
use potsmooth::spatial_index::StockPoint;
use potsmooth::synthetic::uniform_points;
use potsmooth::wire::parse_text_report;
use potsmooth_server::{router, AppState, ServerConfig, CACHE_HEADER, COMPUTE_TIME_HEADER};
use serde_json::{json, Value};
use tower::ServiceExt;

const TOKEN: &str = "s3cret";

struct Fixture {
    _dir: tempfile::TempDir,
    app: Router,
}

fn fixture(config: ServerConfig) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let catalog = Catalog::open(dir.path()).unwrap();
    let one = Dataset::new(
        "one",
        "Single",
        vec!["pop".into(), "area".into()],
        vec![StockPoint {
            id: "p".into(),
            location: GeoPoint::new(40.2, 9.6).unwrap(),
            stocks: vec![1000.0, 50.0],
        }],
    )
    .unwrap();
    catalog
        .insert(one, Some(json!({"type": "FeatureCollection", "features": []})))
        .unwrap();
    let ext = GeoBox { west: 5.0, south: 38.0, east: 12.0, north: 44.0 };
    let cloud = Dataset::new("cloud", "Cloud", vec!["v0".into(), "v1".into()], uniform_points(3000, ext, 2, 4)).unwrap();
    catalog.insert(cloud, None).unwrap();
    let config = ServerConfig {
        tokens: vec![TOKEN.into()],
        ..config
    };
    let state = AppState::new(Arc::new(catalog), &config);
    Fixture { _dir: dir, app: router(state) }
}

fn default_fixture() -> Fixture {
    fixture(ServerConfig::default())
}

async fn call(app: &Router, method: &str, uri: &str, token: Option<&str>, body: Option<Value>) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(serde_json::to_vec(&v).unwrap())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, headers, bytes)
}

fn json_of(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

fn small_request() -> Value {
    json!({
        "dataset": "one",
        "numerator": "pop",
        "kernel": {"kind": "gaussian", "portee_km": 60.0},
        "grid": {"bbox": {"west": 8.0, "south": 38.0, "east": 10.0, "north": 41.0}, "width": 4, "height": 3}
    })
}

#[tokio::test]
async fn kernels_listing() {
    let f = default_fixture();
    let (status, _, body) = call(&f.app, "GET", "/api/kernels", Some(TOKEN), None).await;
    assert_eq!(status, StatusCode::OK);
    let list = json_of(&body);
    let names: Vec<&str> = list.as_array().unwrap().iter().map(|k| k["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["disk", "damped-disk", "gaussian", "pareto"]);
    let pareto = &list[3]["params"];
    assert_eq!(pareto[1]["name"], "beta");
    assert_eq!(pareto[1]["default"], 4.0);
}

#[tokio::test]
async fn authentication_required_everywhere() {
    let f = default_fixture();
    for (method, uri) in [
        ("GET", "/api/kernels"),
        ("GET", "/api/datasets"),
        ("GET", "/api/datasets/one/stocks"),
        ("GET", "/api/datasets/one/boundaries"),
        ("POST", "/api/grid"),
        ("POST", "/api/report"),
    ] {
        let (status, headers, _) = call(&f.app, method, uri, None, Some(small_request())).await;
        assert_eq!(status, StatusCode::UNAUTHORIZED, "{uri}");
        assert_eq!(headers["www-authenticate"], "Bearer");
        let (status, _, body) = call(&f.app, method, uri, Some("wrong"), Some(small_request())).await;
        assert_eq!(status, StatusCode::UNAUTHORIZED, "{uri}");
        assert_eq!(json_of(&body)["error"], "unauthorized");
    }
}

#[tokio::test]
async fn catalog_listings() {
    let f = default_fixture();
    let (status, _, body) = call(&f.app, "GET", "/api/datasets", Some(TOKEN), None).await;
    assert_eq!(status, StatusCode::OK);
    let list = json_of(&body);
    assert_eq!(list[0]["id"], "one");
    assert_eq!(list[0]["has_boundaries"], true);
    assert_eq!(list[1]["id"], "cloud");
    assert_eq!(list[1]["points"], 3000);

    let (status, _, body) = call(&f.app, "GET", "/api/datasets/one/stocks", Some(TOKEN), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json_of(&body), json!(["pop", "area"]));

    let (status, _, body) = call(&f.app, "GET", "/api/datasets/zzz/stocks", Some(TOKEN), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(json_of(&body)["error"], "not-found");

    let (status, headers, body) = call(&f.app, "GET", "/api/datasets/one/boundaries", Some(TOKEN), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(headers["content-type"], "application/geo+json");
    assert_eq!(json_of(&body)["type"], "FeatureCollection");
    let (status, _, _) = call(&f.app, "GET", "/api/datasets/cloud/boundaries", Some(TOKEN), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn minimal_grid() {
    let f = default_fixture();
    let (status, headers, body) = call(&f.app, "POST", "/api/grid", Some(TOKEN), Some(small_request())).await;
    assert_eq!(status, StatusCode::OK);
    assert!(headers[COMPUTE_TIME_HEADER].to_str().unwrap().parse::<f64>().unwrap() >= 0.0);
    assert!(headers.get(CACHE_HEADER).is_none());
    let resp: GridResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(resp.grids.len(), 1);
    let payload = &resp.grids[0].payload;
    let values = payload.decode_values().unwrap();
    assert_eq!(values.len(), 12);
    let argmax = (0..12).max_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap();
    assert_eq!(argmax, 3);
    // Every input parameter comes back in the metadata.
    let raw = json_of(&body);
    let meta = &raw["grids"][0]["payload"]["meta"];
    assert_eq!(meta["kind"], "potential");
    assert_eq!(meta["dataset"], "one");
    assert_eq!(meta["variable"], "pop");
    assert_eq!(meta["kernel"]["kind"], "gaussian");
    assert_eq!(meta["kernel"]["portee_km"], 60.0);
    assert_eq!(meta["epsilon"], 0.001);
    assert_eq!(meta["margin_km"], 60.0);
    assert_eq!(raw["grids"][0]["payload"]["spec"]["width"], 4);
    assert_eq!(raw["grids"][0]["payload"]["encoding"], "f32le-rowmajor-base64");
    let codes: Vec<&str> = raw["grids"][0]["payload"]["warnings"]
        .as_array()
        .unwrap()
        .iter()
        .map(|w| w["code"].as_str().unwrap())
        .collect();
    assert_eq!(codes, ["margin"]);
}

#[tokio::test]
async fn validation_statuses() {
    let f = default_fixture();
    let mut bad = small_request();
    bad["kernel"]["portee_km"] = json!(0);
    let (status, _, body) = call(&f.app, "POST", "/api/grid", Some(TOKEN), Some(bad)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let err = json_of(&body);
    assert_eq!(err["error"], "validation");
    assert_eq!(err["fields"][0]["field"], "kernel.portee_km");

    let mut pareto = small_request();
    pareto["kernel"] = json!({"kind": "pareto", "portee_km": 50, "beta": 2.9});
    let (status, _, body) = call(&f.app, "POST", "/api/grid", Some(TOKEN), Some(pareto)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(json_of(&body)["fields"][0]["field"], "kernel.beta");

    let mut missing = small_request();
    missing["dataset"] = json!("nowhere");
    let (status, _, _) = call(&f.app, "POST", "/api/grid", Some(TOKEN), Some(missing)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let mut var = small_request();
    var["numerator"] = json!("gdp");
    let (status, _, body) = call(&f.app, "POST", "/api/grid", Some(TOKEN), Some(var)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(json_of(&body)["fields"][0]["field"], "numerator");

    let req = Request::builder()
        .method("POST")
        .uri("/api/grid")
        .header("authorization", format!("Bearer {TOKEN}"))
        .body(Body::from("{not json"))
        .unwrap();
    assert_eq!(f.app.clone().oneshot(req).await.unwrap().status(), StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn quad_request_returns_two_pairs() {
    let f = default_fixture();
    let mut req = small_request();
    req["denominator"] = json!("area");
    req["portee2_km"] = json!(120.0);
    let (status, _, body) = call(&f.app, "POST", "/api/grid", Some(TOKEN), Some(req)).await;
    assert_eq!(status, StatusCode::OK);
    let resp: GridResponse = serde_json::from_slice(&body).unwrap();
    let layout: Vec<(String, f64)> = resp
        .grids
        .iter()
        .map(|g| (serde_json::to_value(g.role).unwrap().as_str().unwrap().to_string(), g.portee_km))
        .collect();
    assert_eq!(
        layout,
        [
            ("numerator".to_string(), 60.0),
            ("denominator".to_string(), 60.0),
            ("numerator".to_string(), 120.0),
            ("denominator".to_string(), 120.0)
        ]
    );
    assert!(resp.grids.iter().all(|g| g.payload.spec == resp.grids[0].payload.spec));
}

#[tokio::test]
async fn report_matches_payload() {
    let f = default_fixture();
    let mut req = small_request();
    req["grid"]["width"] = json!(2);
    req["grid"]["height"] = json!(2);
    let (_, _, body) = call(&f.app, "POST", "/api/grid", Some(TOKEN), Some(req.clone())).await;
    let resp: GridResponse = serde_json::from_slice(&body).unwrap();
    let values = resp.grids[0].payload.decode_values().unwrap();

    let (status, headers, text) = call(&f.app, "POST", "/api/report", Some(TOKEN), Some(req.clone())).await;
    assert_eq!(status, StatusCode::OK);
    assert!(headers["content-type"].to_str().unwrap().starts_with("text/plain"));
    let text = String::from_utf8(text).unwrap();
    assert_eq!(text.lines().count(), 5);
    let rows = parse_text_report(&text).unwrap();
    for (row, v) in rows.iter().zip(&values) {
        assert_eq!(row.2.to_bits(), v.to_bits());
    }
    assert_eq!(text.lines().nth(1).unwrap().split(',').take(2).collect::<Vec<_>>(), ["8.500000", "40.250000"]);

    let (status, headers, html) = call(&f.app, "POST", "/api/report?format=html", Some(TOKEN), Some(req.clone())).await;
    assert_eq!(status, StatusCode::OK);
    assert!(headers["content-type"].to_str().unwrap().starts_with("text/html"));
    let html = String::from_utf8(html).unwrap();
    for line in text.lines().skip(1) {
        let c: Vec<&str> = line.split(',').collect();
        assert!(html.contains(&format!("<td>{}</td><td>{}</td><td>{}</td>", c[0], c[1], c[2])));
    }

    let (status, _, body) = call(&f.app, "POST", "/api/report?format=pdf", Some(TOKEN), Some(req.clone())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(json_of(&body)["fields"][0]["field"], "format");
    let (status, _, body) = call(&f.app, "POST", "/api/report?grid=3", Some(TOKEN), Some(req)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(json_of(&body)["fields"][0]["field"], "grid");
}

#[tokio::test]
async fn cache_serves_repeats_and_references() {
    let f = fixture(ServerConfig {
        cache_entries: 8,
        ..ServerConfig::default()
    });
    let req = small_request();
    let (_, h1, b1) = call(&f.app, "POST", "/api/grid", Some(TOKEN), Some(req.clone())).await;
    let (_, h2, b2) = call(&f.app, "POST", "/api/grid", Some(TOKEN), Some(req.clone())).await;
    assert_eq!(h1[CACHE_HEADER], "miss");
    assert_eq!(h2[CACHE_HEADER], "hit");
    assert_eq!(b1, b2);
    let key = json_of(&b1)["key"].as_str().unwrap().to_string();
    let (status, _, text) = call(&f.app, "POST", "/api/report", Some(TOKEN), Some(json!({"key": key}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(String::from_utf8(text).unwrap().lines().count(), 13);
    let (status, _, _) = call(&f.app, "POST", "/api/report", Some(TOKEN), Some(json!({"key": "00"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn reference_without_cache_is_not_found() {
    let f = default_fixture();
    let (status, _, _) = call(&f.app, "POST", "/api/report", Some(TOKEN), Some(json!({"key": "ab"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn default_epsilon_from_config() {
    let f = fixture(ServerConfig {
        default_epsilon: 0.0,
        ..ServerConfig::default()
    });
    let (_, _, body) = call(&f.app, "POST", "/api/grid", Some(TOKEN), Some(small_request())).await;
    assert_eq!(json_of(&body)["request"]["epsilon"], 0.0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn slow_request_times_out() {
    let f = fixture(ServerConfig {
        timeout: Duration::from_millis(1),
        ..ServerConfig::default()
    });
    let req = json!({
        "dataset": "cloud",
        "numerator": "v0",
        "kernel": {"kind": "pareto", "portee_km": 500.0},
        "grid": {"bbox": {"west": 5.0, "south": 38.0, "east": 12.0, "north": 44.0}, "width": 400, "height": 300},
        "epsilon": 0
    });
    let (status, _, body) = call(&f.app, "POST", "/api/grid", Some(TOKEN), Some(req)).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(json_of(&body)["error"], "timeout");
}

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::Arc;

use axum::body::Body;
use axum::http::Request;
use http_body_util::BodyExt;
use potsmooth::catalog::Catalog;
use potsmooth::request::GridResponse;
use potsmooth::wire::{parse_text_report, GridPayload};
use potsmooth_server::{router, AppState, ServerConfig};
use serde_json::json;
use tower::ServiceExt;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_potsmooth"))
}

fn run(args: &[&str], catalog: &Path) -> Output {
    bin().args(args).env("POTSMOOTH_CATALOG", catalog).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        Self { dir: tempfile::tempdir().unwrap() }
    }

    fn catalog(&self) -> PathBuf {
        self.dir.path().join("catalog")
    }

    fn file(&self, name: &str, body: &str) -> PathBuf {
        let p = self.dir.path().join(name);
        fs::write(&p, body).unwrap();
        p
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        run(args, &self.catalog())
    }

    /// A 400-point dataset with stocks `pop` and `area` over northern Italy.
    fn ingest_cloud(&self) {
        let mut body = String::from("id,lon,lat,pop,area\n");
        let mut state = 12345u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for i in 0..400 {
            let lon = 7.0 + 6.0 * next();
            let lat = 44.0 + 3.0 * next();
            writeln!(body, "u{i},{lon:.5},{lat:.5},{:.1},{:.2}", 10.0 + 5000.0 * next(), 1.0 + 50.0 * next()).unwrap();
        }
        let csv = self.file("cloud.csv", &body);
        let o = self.run(&["ingest", csv.to_str().unwrap(), "--id", "cloud", "--name", "Cloud"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
}

const COMPUTE: [&str; 12] = [
    "compute",
    "--dataset",
    "cloud",
    "--num",
    "pop",
    "--kernel",
    "gaussian",
    "--portee",
    "40",
    "--bbox=7,44,13,47",
    "--size",
    "24x12",
];

#[test]
fn ingest_single_row() {
    let ws = Workspace::new();
    let csv = ws.file("s.csv", "id,lon,lat,centenarians\nNUORO,9.33,40.32,120\n");
    let o = ws.run(&["ingest", csv.to_str().unwrap(), "--id", "sardinia", "--name", "Sardinia"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("1 points"), "{out}");
    let cat = Catalog::open(ws.catalog()).unwrap();
    assert_eq!(cat.list_stocks("sardinia").unwrap(), ["centenarians"]);
}

#[test]
fn ingest_rejects_bad_latitude_with_position() {
    let ws = Workspace::new();
    let csv = ws.file("s.csv", "id,lon,lat,pop\nA,9.33,40.32,120\nB,9.0,95,3\n");
    let o = ws.run(&["ingest", csv.to_str().unwrap(), "--id", "s", "--name", "S"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("line 3") && err.contains("lat"), "{err}");
}

#[test]
fn ingest_missing_file_is_io_error() {
    let ws = Workspace::new();
    let o = ws.run(&["ingest", "/nonexistent/x.csv", "--id", "s", "--name", "S"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_one() {
    let ws = Workspace::new();
    assert_eq!(ws.run(&["compute", "--dataset", "x"]).status.code(), Some(1));
    assert_eq!(ws.run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(ws.run(&["--help"]).status.code(), Some(0));
}

#[test]
fn nonpositive_portee_is_a_validation_error() {
    let ws = Workspace::new();
    ws.ingest_cloud();
    let out = ws.path("g.json");
    let mut args = COMPUTE.to_vec();
    args[8] = "0";
    args.extend(["-o", out.to_str().unwrap()]);
    let o = ws.run(&args);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--portee"), "{}", stderr(&o));
    assert!(!out.exists());

    let mut args = COMPUTE.to_vec();
    args[2] = "missing";
    args.extend(["-o", out.to_str().unwrap()]);
    assert_eq!(ws.run(&args).status.code(), Some(1));
}

fn decode(path: &Path) -> GridResponse {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn naive_and_pruned_agree_within_threshold_bound() {
    let ws = Workspace::new();
    ws.ingest_cloud();
    let fast = ws.path("fast.json");
    let slow = ws.path("slow.json");
    let mut a = COMPUTE.to_vec();
    a.extend(["--epsilon", "0.001", "-o", fast.to_str().unwrap()]);
    let mut b = COMPUTE.to_vec();
    b.extend(["--naive", "-o", slow.to_str().unwrap()]);
    assert!(ws.run(&a).status.success());
    assert!(ws.run(&b).status.success());
    let f = decode(&fast).grids[0].payload.decode_values().unwrap();
    let s = decode(&slow).grids[0].payload.decode_values().unwrap();
    for (x, y) in f.iter().zip(&s) {
        assert!((x - y).abs() <= 1e-2 * y.abs(), "{x} vs {y}");
    }
}

#[test]
fn denominator_writes_ratio_files_and_report() {
    let ws = Workspace::new();
    ws.ingest_cloud();
    let out = ws.path("atlas.json");
    let report = ws.path("atlas.csv");
    let mut args = COMPUTE.to_vec();
    args.extend([
        "--den",
        "area",
        "--portee2",
        "90",
        "-o",
        out.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
        "--report-grid",
        "2",
    ]);
    let o = ws.run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let resp = decode(&out);
    assert_eq!(resp.grids.len(), 4);
    for tag in ["num", "den", "ratio", "num2", "den2", "ratio2", "diff"] {
        let p = ws.path(&format!("atlas.{tag}.json"));
        let payload: GridPayload = serde_json::from_slice(&fs::read(&p).unwrap()).unwrap();
        assert_eq!(payload.decode_values().unwrap().len(), 24 * 12, "{tag}");
    }
    let num: GridPayload = serde_json::from_slice(&fs::read(ws.path("atlas.num.json")).unwrap()).unwrap();
    let den: GridPayload = serde_json::from_slice(&fs::read(ws.path("atlas.den.json")).unwrap()).unwrap();
    let ratio: GridPayload = serde_json::from_slice(&fs::read(ws.path("atlas.ratio.json")).unwrap()).unwrap();
    let (n, d, r) = (
        num.decode_values().unwrap(),
        den.decode_values().unwrap(),
        ratio.decode_values().unwrap(),
    );
    for i in 0..n.len() {
        if r[i].is_finite() {
            assert!((r[i] - n[i] / d[i]).abs() <= 1e-5 * r[i].abs(), "cell {i}");
        }
    }
    assert_eq!(num, resp.grids[0].payload);

    let rows = parse_text_report(&fs::read_to_string(&report).unwrap()).unwrap();
    let values = resp.grids[2].payload.decode_values().unwrap();
    assert_eq!(rows.len(), values.len());
    for (row, v) in rows.iter().zip(&values) {
        assert_eq!(row.2.to_bits(), v.to_bits());
    }
}

#[tokio::test]
async fn compute_output_matches_api_body() {
    let ws = Workspace::new();
    ws.ingest_cloud();
    let out = ws.path("cli.json");
    let mut args = COMPUTE.to_vec();
    args.extend(["--den", "area", "-o", out.to_str().unwrap()]);
    let o = ws.run(&args);
    assert!(o.status.success(), "{}", stderr(&o));

    let catalog = Arc::new(Catalog::open(ws.catalog()).unwrap());
    let config = ServerConfig {
        tokens: vec!["t".into()],
        ..ServerConfig::default()
    };
    let app = router(AppState::new(catalog, &config));
    let body = json!({
        "dataset": "cloud",
        "numerator": "pop",
        "denominator": "area",
        "kernel": {"kind": "gaussian", "portee_km": 40},
        "grid": {"bbox": {"west": 7, "south": 44, "east": 13, "north": 47}, "width": 24, "height": 12}
    });
    let req = Request::builder()
        .method("POST")
        .uri("/api/grid")
        .header("authorization", "Bearer t")
        .body(Body::from(serde_json::to_vec(&body).unwrap()))
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert_eq!(resp.status(), 200);
    let api = resp.into_body().collect().await.unwrap().to_bytes();
    assert_eq!(fs::read(&out).unwrap(), api.to_vec());
}

#[test]
fn bench_prints_table_and_sweep() {
    let o = bin()
        .args(["bench", "--n", "800", "--size", "30x20", "--portee", "150", "--epsilon-sweep"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("naive") && out.contains("quadtree") && out.contains("speedup"), "{out}");
    assert!(out.contains("error grows with epsilon: yes"), "{out}");
}

fn http(addr: &str, path: &str, token: &str) -> String {
    let mut s = TcpStream::connect(addr).unwrap();
    write!(
        s,
        "GET {path} HTTP/1.1\r\nHost: {addr}\r\nAuthorization: Bearer {token}\r\nConnection: close\r\n\r\n"
    )
    .unwrap();
    let mut buf = String::new();
    s.read_to_string(&mut buf).unwrap();
    buf
}

#[test]
fn serve_answers_and_rejects_bad_tokens() {
    let ws = Workspace::new();
    let mut child = bin()
        .args(["serve", "--listen", "127.0.0.1:0", "--token", "good"])
        .env("POTSMOOTH_CATALOG", ws.catalog())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stderr.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").expect(&line).to_string();

    let ok = http(&addr, "/api/kernels", "good");
    let bad = http(&addr, "/api/kernels", "bad");
    let list = http(&addr, "/api/datasets", "good");
    child.kill().unwrap();
    child.wait().unwrap();

    assert!(ok.starts_with("HTTP/1.1 200"), "{ok}");
    assert!(ok.contains("\"damped-disk\""));
    assert!(bad.starts_with("HTTP/1.1 401"), "{bad}");
    assert!(list.starts_with("HTTP/1.1 200") && list.ends_with("[]"), "{list}");
}

#[test]
fn serve_requires_a_token() {
    let ws = Workspace::new();
    let o = bin()
        .args(["serve", "--listen", "127.0.0.1:0"])
        .env("POTSMOOTH_CATALOG", ws.catalog())
        .env_remove("POTSMOOTH_TOKENS")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

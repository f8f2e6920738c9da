use std::path::Path;
use std::process::Command;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use tower::ServiceExt;

use texlang::harness::{Precision, RetrievalApi};
use texlang_cli::{router, serve_api};

fn texlang(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_texlang"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let text = format!(
        r#"
[experiment]
name = "cli-demo"
model = "classifier"
seed = 1
backbone = "tiny"
image_size = 32

[data]
demo_images = 20
demo_size = 32
phrase_min_count = 1
word_min_count = 1

[output]
dir = "{}"

[classifier]
epochs = 2
batch_size = 8
hidden = 16
layer_spec = [2]
hflip = false
"#,
        dir.join("run").display()
    );
    let path = dir.join("exp.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn unknown_flag_prints_usage_and_exits_2() {
    let out = texlang(&["synth-probe", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(texlang(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(texlang(&["eval-retrieval"]).status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_nonzero_with_diagnostic() {
    let out = texlang(&["prepare-data", "--config", "/nonexistent/exp.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn random_probe_reports_chance_levels() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("probe");
    let out = texlang(&[
        "synth-probe", "--experiment", "all", "--scorer", "random", "--seed", "7", "--size", "16", "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<Vec<&str>> = stdout.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    let names: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    assert_eq!(names, vec!["foreground", "background", "color_pattern", "two_colors"]);
    let tasks: Vec<&str> = rows.iter().map(|r| r[1]).collect();
    assert_eq!(tasks, vec!["55", "11", "110", "55"]);
    assert_eq!(rows[0][4], "50.00");
    assert_eq!(rows[1][4], "50.00");
    assert_eq!(rows[3][4], "5.26");
    assert!(out_dir.join("probe_report.tsv").exists());
    assert!(out_dir.join("manifest.json").exists());
}

#[test]
fn train_then_evaluate_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let out = texlang(&["train-classifier", "--config", cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = texlang(&["eval-retrieval", "--config", cfg, "--model", "classifier", "--split", "test"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.starts_with("model\tsplit\ttask\tMAP\tMRR\tP@5\tP@20\tR@5\tR@20\n"));
    assert_eq!(table.lines().count(), 3);
    assert!(dir.path().join("run").join("manifest.json").exists());
}

async fn call(app: axum::Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn get(uri: &str) -> Request<Body> {
    Request::builder().uri(uri).body(Body::empty()).unwrap()
}

fn post(body: &str) -> Request<Body> {
    Request::builder()
        .method("POST")
        .uri("/retrieve")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

#[tokio::test(flavor = "multi_thread")]
async fn router_serves_the_api() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    assert!(texlang(&["train-classifier", "--config", cfg.to_str().unwrap()]).status.success());
    let store = dir.path().join("run").join("scores.bin");
    let api = serve_api(&store, None, None, Precision::F32, Some(&cfg)).unwrap();
    let app = router(api);

    let (s, body) = call(app.clone(), get("/phrases?q=b")).await;
    assert_eq!(s, StatusCode::OK);
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert!(v["phrases"].as_array().unwrap().iter().all(|p| p.as_str().unwrap().starts_with('b')));

    let vocab = std::fs::read_to_string(store.with_file_name("scores.bin.phrases")).unwrap();
    let phrase = vocab.lines().next().unwrap();
    let req = serde_json::json!({"mode": "phrase", "query": phrase, "top_k": 5}).to_string();
    let (s, body) = call(app.clone(), post(&req)).await;
    assert_eq!(s, StatusCode::OK);
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    let results = v["results"].as_array().unwrap();
    assert_eq!(results.len(), 5);
    let scores: Vec<f64> = results.iter().map(|r| r["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));

    let (s, again) = call(app.clone(), post(&req)).await;
    assert_eq!((s, again), (StatusCode::OK, body));

    let id = results[0]["id"].as_str().unwrap();
    let (s, png) = call(app.clone(), get(&format!("/image/{id}"))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(&png[..4], b"\x89PNG");
    let (s, _) = call(app.clone(), get(&format!("/describe/{id}"))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(call(app.clone(), get("/describe/missing")).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(app.clone(), post("{")).await.0, StatusCode::BAD_REQUEST);

    let (s, _) = call(router(RetrievalApi::unloaded()), get("/phrases?q=a")).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
}

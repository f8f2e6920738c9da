use std::sync::Arc;

use super::*;
use crate::corpus::{Corpus, Description, Split, TextureImage};
use crate::joint_embedding::{EmbeddingStore, Modality};
use crate::phrase_classifier::ScoreMatrix;
use crate::synthprobe::Experiment;

const DEMO_TOML: &str = r#"
[experiment]
name = "demo"
model = "classifier"
seed = 3
backbone = "tiny"
image_size = 32

[data]
demo_images = 24
demo_size = 32
phrase_min_count = 1
word_min_count = 1

[output]
dir = "OUT"

[classifier]
epochs = 2
batch_size = 8
hidden = 16
layer_spec = [1, 2]
hflip = false
"#;

fn demo_config(dir: &std::path::Path, model: &str) -> ExperimentConfig {
    let text = DEMO_TOML
        .replace("OUT", &dir.display().to_string())
        .replace("model = \"classifier\"", &format!("model = \"{model}\""))
        .replace("[classifier]", &format!("[{model}]"));
    let text = match model {
        "metric" => text.replace("hidden = 16", "joint_dim = 8\nword_dim = 8"),
        "captioner" => text.replace("hidden = 16\nlayer_spec = [1, 2]", "hidden = 16\nembed_dim = 8\nattention_dim = 8\nbeam = 2\nmax_len = 6\nword_min_count = 1"),
        _ => text,
    };
    ExperimentConfig::from_toml(&text).unwrap()
}

#[test]
fn config_round_trips_and_hash_is_stable() {
    let cfg = demo_config(std::path::Path::new("/tmp/x"), "classifier");
    assert_eq!(cfg.experiment.model, ModelKind::Classifier);
    let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(again, cfg);
    assert_eq!(again.hash(), cfg.hash());
    let c = cfg.classifier_config();
    assert_eq!((c.seed, c.input.size, c.epochs, c.hidden), (3, 32, 2, 16));
    assert_eq!(c.backbone, crate::encoders::BackboneConfig::tiny());
}

#[test]
fn config_rejects_schema_violations() {
    let base = DEMO_TOML.replace("OUT", "/tmp/x");
    let cases = [
        base.replace("hflip = false", "hflip = false\nbogus = 1"),
        base.replace("seed = 3", "seed = 3\nextra = true"),
        base.replace("demo_images = 24", ""),
        base.replace("layer_spec = [1, 2]", "layer_spec = [3]"),
        base.replace("epochs = 2", "epochs = 0"),
        base.replace("model = \"classifier\"", "model = \"forest\""),
        base.replace("image_size = 32", "image_size = 2"),
        base.replace("[output]\ndir = \"/tmp/x\"", ""),
    ];
    for (i, text) in cases.iter().enumerate() {
        let err = ExperimentConfig::from_toml(text).expect_err(&format!("case {i} accepted"));
        assert!(matches!(err, crate::Error::Config(_)), "case {i}: {err}");
    }
}

#[test]
fn manifest_json_round_trip() {
    let mut m = RunManifest::new("train-metric", "abc");
    m.metric("val.phrase.map", 0.25);
    m.outputs.push("retrieval.tsv".into());
    let dir = tempfile::tempdir().unwrap();
    let path = m.write(dir.path()).unwrap();
    assert_eq!(RunManifest::read(&path).unwrap(), m);
    assert_eq!(m.code_version, CODE_VERSION);
}

// -- service ---------------------------------------------------------------

fn tiny_corpus(ids: &[&str]) -> Corpus {
    let images = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let img = image::RgbImage::from_pixel(4, 4, image::Rgb([i as u8 * 40, 0, 0]));
            TextureImage::in_memory(*id, "demo", Split::Test, img)
        })
        .collect();
    let descs = vec![
        Description::parse("a", "banded, red").unwrap(),
        Description::parse("b", "bumpy, blue").unwrap(),
        Description::parse("c", "banded, bumpy").unwrap(),
        Description::parse("d", "red").unwrap(),
    ];
    Corpus::new(images, descs).unwrap()
}

fn score_api() -> RetrievalApi {
    // images a..d × phrases banded, blue, bumpy, red
    let m = ScoreMatrix::new(
        ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect(),
        ["banded", "blue", "bumpy", "red"].iter().map(|s| s.to_string()).collect(),
        vec![
            0.9, 0.1, 0.2, 0.8, //
            0.1, 0.9, 0.7, 0.1, //
            0.6, 0.2, 0.9, 0.3, //
            0.2, 0.1, 0.1, 0.95,
        ],
    )
    .unwrap();
    RetrievalApi::new(Snapshot::new(Backend::Scores(m)).unwrap().with_corpus(&tiny_corpus(&["a", "b", "c", "d"])))
}

fn post(api: &RetrievalApi, body: &str) -> ApiResponseView {
    view(api.handle("POST", "/retrieve", None, body.as_bytes()))
}

struct ApiResponseView {
    status: u16,
    json: serde_json::Value,
}

fn view(r: api::ApiResponse) -> ApiResponseView {
    ApiResponseView { status: r.status, json: r.json_body() }
}

fn result_ids(v: &serde_json::Value) -> Vec<String> {
    v["results"].as_array().unwrap().iter().map(|r| r["id"].as_str().unwrap().to_string()).collect()
}

#[test]
fn unloaded_service_answers_503() {
    let api = RetrievalApi::unloaded();
    for (m, p) in [("GET", "/phrases"), ("POST", "/retrieve"), ("GET", "/describe/a"), ("GET", "/image/a")] {
        assert_eq!(api.handle(m, p, Some("q=b"), b"{}").status, 503);
    }
}

#[test]
fn phrase_query_returns_top_k_descending() {
    let api = score_api();
    let r = post(&api, r#"{"mode":"phrase","query":"banded","top_k":3}"#);
    assert_eq!(r.status, 200);
    assert_eq!(result_ids(&r.json), vec!["a", "c", "d"]);
    let scores: Vec<f64> = r.json["results"].as_array().unwrap().iter().map(|x| x["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    assert_eq!(r.json["results"][0]["thumbnail_url"], "/image/a");
}

#[test]
fn description_query_reports_source_rank() {
    let api = score_api();
    let r = post(&api, r#"{"mode":"description","query":"Banded,  bumpy","top_k":1}"#);
    assert_eq!(r.status, 200);
    // mean of banded and bumpy: a .55, b .4, c .75, d .15
    assert_eq!(result_ids(&r.json), vec!["c"]);
    assert_eq!(r.json["source_ranks"], serde_json::json!([{"id": "c", "rank": 1}]));
    let r = post(&api, r#"{"mode":"description","query":"red"}"#);
    assert_eq!(r.json["source_ranks"], serde_json::json!([{"id": "d", "rank": 1}]));
    assert_eq!(result_ids(&r.json).len(), 4);
}

#[test]
fn image_query_ranks_itself_first() {
    let api = score_api();
    let r = post(&api, r#"{"mode":"image","query":"b","top_k":2}"#);
    assert_eq!(result_ids(&r.json)[0], "b");
    assert_eq!(r.json["results"][0]["score"].as_f64().unwrap(), 0.0);
    assert_eq!(post(&api, r#"{"mode":"image","query":"zzz"}"#).status, 404);
}

#[test]
fn malformed_requests_are_rejected() {
    let api = score_api();
    for body in [
        "not json",
        r#"{"mode":"phrase"}"#,
        r#"{"mode":"vibes","query":"x"}"#,
        r#"{"mode":"phrase","query":"banded","top_k":0}"#,
        r#"{"mode":"phrase","query":"banded","top_k":101}"#,
        r#"{"mode":"phrase","query":"   "}"#,
        r#"{"mode":"phrase","query":"banded","extra":1}"#,
        r#"{"mode":"phrase","query":"zebra"}"#,
    ] {
        assert_eq!(post(&api, body).status, 400, "{body}");
    }
    assert_eq!(api.handle("GET", "/retrieve", None, b"").status, 405);
    assert_eq!(api.handle("GET", "/nowhere", None, b"").status, 404);
    assert_eq!(api.handle("GET", "/phrases", None, b"").status, 400);
}

#[test]
fn autocomplete_matches_prefix_filter() {
    let api = score_api();
    let vocab = ["banded", "blue", "bumpy", "red"];
    for prefix in ["b", "bu", "r", "x", "BAN"] {
        let r = view(api.handle("GET", "/phrases", Some(&format!("q={prefix}")), b""));
        let want: Vec<&str> = vocab.iter().copied().filter(|p| p.starts_with(&prefix.to_lowercase())).collect();
        assert_eq!(r.json["phrases"], serde_json::json!(want), "{prefix}");
    }
    let r = view(api.handle("GET", "/phrases", Some("q="), b""));
    assert_eq!(r.json["phrases"], serde_json::json!([]));
}

#[test]
fn describe_lists_top_phrases_and_descriptions() {
    let api = score_api();
    let r = view(api.handle("GET", "/describe/c", None, b""));
    assert_eq!(r.status, 200);
    let phrases: Vec<&str> = r.json["phrases"].as_array().unwrap().iter().map(|p| p["phrase"].as_str().unwrap()).collect();
    assert_eq!(phrases, vec!["bumpy", "banded", "red", "blue"]);
    assert_eq!(r.json["descriptions"], serde_json::json!(["banded, bumpy"]));
    assert_eq!(api.handle("GET", "/describe/zzz", None, b"").status, 404);
}

#[test]
fn image_endpoint_serves_png() {
    let api = score_api();
    let r = api.handle("GET", "/image/b", None, b"");
    assert_eq!((r.status, r.content_type), (200, "image/png"));
    assert_eq!(&r.body[..8], b"\x89PNG\r\n\x1a\n");
    let decoded = image::load_from_memory(&r.body).unwrap().to_rgb8();
    assert_eq!(decoded.get_pixel(0, 0).0, [40, 0, 0]);
    assert_eq!(api.handle("GET", "/image/nope", None, b"").status, 404);
}

struct FirstLetter;

impl TextEmbedder for FirstLetter {
    fn embed(&self, text: &str) -> crate::Result<Vec<f64>> {
        Ok(vec![if text.starts_with('b') { 1.0 } else { -1.0 }, 0.0])
    }
}

fn embedding_snapshot(text: Option<Arc<dyn TextEmbedder>>) -> Snapshot {
    let ids = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
    let images = EmbeddingStore::new(Modality::Image, ids, 2, vec![1.0, 0.0, -1.0, 0.0, 0.0, 3.0]).unwrap();
    let phrases = ["banded", "red"].iter().map(|s| s.to_string()).collect();
    let phrases = EmbeddingStore::new(Modality::Text, phrases, 2, vec![1.0, 0.1, -1.0, 0.0]).unwrap();
    Snapshot::new(Backend::Embeddings { images, phrases, text }).unwrap()
}

#[test]
fn embedding_backend_scores_by_negative_squared_distance() {
    let api = RetrievalApi::new(embedding_snapshot(None));
    let r = post(&api, r#"{"mode":"phrase","query":"red","top_k":3}"#);
    assert_eq!(result_ids(&r.json), vec!["y", "x", "z"]);
    assert_eq!(r.json["results"][0]["score"].as_f64().unwrap(), 0.0);
    assert_eq!(r.json["results"][1]["score"].as_f64().unwrap(), -4.0);
    assert_eq!(post(&api, r#"{"mode":"description","query":"banded"}"#).status, 503);
    let d = view(api.handle("GET", "/describe/x", None, b""));
    assert_eq!(d.json["phrases"][0]["phrase"], "banded");

    let api = RetrievalApi::new(embedding_snapshot(Some(Arc::new(FirstLetter))));
    let r = post(&api, r#"{"mode":"description","query":"blotchy, pink"}"#);
    assert_eq!(result_ids(&r.json)[0], "x");
    let r = post(&api, r#"{"mode":"phrase","query":"red-ish"}"#);
    assert_eq!(result_ids(&r.json)[0], "y");
}

#[test]
fn request_storm_leaves_store_unchanged_and_answers_identically() {
    let api = score_api();
    let before = api.snapshot().unwrap().digest();
    let bodies = [
        r#"{"mode":"phrase","query":"banded","top_k":4}"#,
        r#"{"mode":"description","query":"bumpy, red"}"#,
        r#"{"mode":"image","query":"a"}"#,
    ];
    let reference: Vec<_> = bodies.iter().map(|b| api.handle("POST", "/retrieve", None, b.as_bytes())).collect();
    std::thread::scope(|s| {
        for _ in 0..8 {
            s.spawn(|| {
                for _ in 0..50 {
                    for (b, want) in bodies.iter().zip(&reference) {
                        assert_eq!(&api.handle("POST", "/retrieve", None, b.as_bytes()), want);
                    }
                    api.handle("GET", "/describe/b", None, b"");
                    api.handle("GET", "/phrases", Some("q=b"), b"");
                }
            });
        }
    });
    assert_eq!(api.snapshot().unwrap().digest(), before);
}

// -- pipelines ----------------------------------------------------------------

#[test]
fn prepare_data_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = demo_config(dir.path(), "classifier");
    let m = prepare_data(&cfg).unwrap();
    for f in ["phrases.tsv", "words.tsv", "splits.tsv"] {
        assert!(dir.path().join(f).exists(), "{f}");
        assert!(m.outputs.contains(&f.to_string()));
    }
    assert!(dir.path().join("config.toml").exists());
    assert!(dir.path().join("manifest.json").exists());
    assert_eq!(m.config_hash, cfg.hash());
    let total: f64 = m.metrics.iter().filter(|(k, _)| k.starts_with("images.")).map(|(_, v)| v).sum();
    assert_eq!(total, 24.0);
}

#[test]
fn classifier_run_is_reproducible_and_reloads() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let m1 = train(&demo_config(d1.path(), "classifier")).unwrap();
    let m2 = train(&demo_config(d2.path(), "classifier")).unwrap();
    let t1 = std::fs::read(d1.path().join("retrieval.tsv")).unwrap();
    assert_eq!(t1, std::fs::read(d2.path().join("retrieval.tsv")).unwrap());
    assert_eq!(m1.metrics, m2.metrics);
    assert_eq!(m1.datasets, m2.datasets);
    assert!(m1.checkpoints.contains(&"model.ckpt".to_string()));

    let cfg = demo_config(d1.path(), "classifier");
    let (table, _) = eval_retrieval(&cfg, &d1.path().join("model.ckpt"), Split::Test).unwrap();
    let trained = String::from_utf8(t1).unwrap();
    for line in table.lines().skip(1) {
        assert!(trained.contains(line), "{line}");
    }

    let snap = load_snapshot(&d1.path().join("scores.bin"), None, None, None).unwrap();
    assert_eq!(snap.num_images(), 24);
}

#[test]
fn metric_run_feeds_the_service() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = demo_config(dir.path(), "metric");
    train(&cfg).unwrap();
    let (corpus, _, _) = load_data(&cfg).unwrap();
    let model = crate::joint_embedding::MetricModel::<f32>::load(&dir.path().join("model.ckpt"), None).unwrap();
    let snap = load_snapshot(&dir.path().join("images.emb"), None, Some(&corpus), Some(Arc::new(model))).unwrap();
    let api = RetrievalApi::new(snap);
    let d = &corpus.descriptions()[0];
    let body = serde_json::json!({"mode": "description", "query": d.canonical(), "top_k": 5}).to_string();
    let r = post(&api, &body);
    assert_eq!(r.status, 200);
    assert_eq!(result_ids(&r.json).len(), 5);
    let ranks = r.json["source_ranks"].as_array().unwrap();
    assert!(ranks.iter().any(|x| x["id"] == d.image_id.as_str()));
}

#[test]
fn captioner_run_writes_caption_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = demo_config(dir.path(), "captioner");
    let m = train(&cfg).unwrap();
    assert!(m.outputs.contains(&"captions.tsv".to_string()));
    let (table, _) = eval_caption(&cfg, &dir.path().join("model.ckpt"), Split::Test).unwrap();
    assert!(table.starts_with(super::pipeline::CAPTION_TSV_HEADER));
    assert!(eval_retrieval(&cfg, &dir.path().join("model.ckpt"), Split::Test).is_err());
}

#[test]
fn random_probe_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let report = synth_probe(&[Experiment::Foreground], &ProbeScorer::Random { seed: 7 }, 16, dir.path()).unwrap();
    assert_eq!(report.summaries.len(), 1);
    assert_eq!(report.summaries[0].tasks, 55);
    let table = std::fs::read_to_string(dir.path().join("probe_report.tsv")).unwrap();
    assert!(table.starts_with(crate::synthprobe::ProbeReport::TSV_HEADER));
}

#[test]
fn transfer_runs_on_attribute_fixture() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    std::fs::create_dir_all(r.join("attributes")).unwrap();
    let (mut images, mut labels, mut split, mut attrs) = (String::new(), String::new(), String::new(), String::new());
    // 3 classes, 12 images each; attribute c+1 present exactly for class c
    for i in 1..=36 {
        let c = (i - 1) % 3;
        images.push_str(&format!("{i} {:03}.C/{i}.jpg\n", c + 1));
        labels.push_str(&format!("{i} {}\n", c + 1));
        split.push_str(&format!("{i} {}\n", u8::from(i <= 24)));
        for a in 1..=3 {
            attrs.push_str(&format!("{i} {a} {} 3 1.0\n", u8::from(a == c + 1)));
        }
    }
    std::fs::write(r.join("images.txt"), images).unwrap();
    std::fs::write(r.join("image_class_labels.txt"), labels).unwrap();
    std::fs::write(r.join("train_test_split.txt"), split).unwrap();
    std::fs::write(
        r.join("attributes.txt"),
        "1 has_bill_shape::a\n2 has_wing_shape::b\n3 has_tail_shape::c\n",
    )
    .unwrap();
    std::fs::write(r.join("attributes").join("image_attribute_labels.txt"), attrs).unwrap();
    let out = tempfile::tempdir().unwrap();
    let opts = TransferOptions {
        cub_root: r.to_path_buf(),
        sources: vec![crate::transfer::AttributeSource::CubShape],
        val_fraction: 0.3,
        cloud_classes: vec![0],
        ..TransferOptions::default()
    };
    let m = transfer_cub(&opts, out.path()).unwrap();
    assert_eq!(m.metrics["cub_shape.k3.test_accuracy"], 1.0);
    assert!(out.path().join("clouds_cub_shape.tsv").exists());
    let texture = TransferOptions { sources: vec![crate::transfer::AttributeSource::Texture], ..opts };
    assert!(transfer_cub(&texture, out.path()).is_err());
}

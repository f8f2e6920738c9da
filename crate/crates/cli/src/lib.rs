//! Subcommands of the `texlang` binary and the HTTP router of `serve`.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::http::{header, Request, Response, StatusCode};
use axum::Router;
use clap::{Parser, Subcommand, ValueEnum};

use texlang::corpus::Split;
use texlang::harness::{
    self, load_data, load_snapshot, ExperimentConfig, ModelKind, Precision, ProbeScorer, RetrievalApi, TextEmbedder,
    TransferOptions,
};
use texlang::joint_embedding::MetricModel;
use texlang::synthprobe::Experiment;
use texlang::transfer::AttributeSource;
use texlang::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "texlang", version, about = "Texture-language grounding experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RetrievalModel {
    Classifier,
    Metric,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScorerArg {
    Random,
    Classifier,
    Metric,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Precision {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the phrase vocabulary and split tables.
    PrepareData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the multi-label phrase classifier.
    TrainClassifier {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the image/text joint embedding.
    TrainMetric {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the attention captioner.
    TrainCaptioner {
        #[arg(long)]
        config: PathBuf,
    },
    /// Phrase and image retrieval table of a checkpoint.
    EvalRetrieval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        model: Option<RetrievalModel>,
        /// Defaults to `model.ckpt` in the configured output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Caption metrics table of a captioner checkpoint.
    EvalCaption {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Write the synthetic probe images, descriptions and task manifest.
    SynthGenerate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: u32,
    },
    /// Run the compositional probe experiments.
    SynthProbe {
        /// `all`, or a comma-separated list of foreground, background,
        /// color_pattern, two_colors.
        #[arg(long, default_value = "all")]
        experiment: String,
        #[arg(long, value_enum, default_value = "random")]
        scorer: ScorerArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "f32")]
        precision: PrecisionArg,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: u32,
        #[arg(long, default_value = "probe_out")]
        out: PathBuf,
    },
    /// Fine-grained bird classification from attribute features.
    TransferCub {
        #[arg(long)]
        cub_root: PathBuf,
        /// Comma-separated: texture, cub_shape, cub_pattern, cub_color, combined.
        #[arg(long, default_value = "cub_shape,cub_pattern,cub_color")]
        sources: String,
        /// Phrase classifier checkpoint for texture attributes.
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "f32")]
        precision: PrecisionArg,
        /// Comma-separated feature counts; omitted means all features.
        #[arg(long)]
        ks: Option<String>,
        #[arg(long, default_value = "0.0001,0.001,0.01,0.1")]
        l2: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated zero-based classes whose weight clouds are written.
        #[arg(long)]
        clouds: Option<String>,
        #[arg(long, default_value = "transfer_out")]
        out: PathBuf,
    },
    /// Serve the retrieval API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// `images.emb` of a metric run or `scores.bin` of a classifier run.
        #[arg(long)]
        store: PathBuf,
        /// Phrase embeddings; defaults to `phrases.emb` beside the store.
        #[arg(long)]
        phrases: Option<PathBuf>,
        /// Metric checkpoint for free-text description queries.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "f32")]
        precision: PrecisionArg,
        /// Experiment configuration whose corpus supplies descriptions and pixels.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn config_as(path: &Path, kind: Option<ModelKind>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(k) = kind {
        cfg.experiment.model = k;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn list<T>(s: &str, what: &str, parse: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| parse(x).ok_or_else(|| Error::Config(format!("bad {what} {x:?}"))))
        .collect()
}

fn print_metrics(m: &harness::RunManifest) {
    for (k, v) in &m.metrics {
        println!("{k}\t{v:.6}");
    }
}

/// Runs one non-serving subcommand, printing its table to stdout.
pub fn run(command: Command) -> Result<()> {
    match command {
        Command::PrepareData { config } => print_metrics(&harness::prepare_data(&config_as(&config, None)?)?),
        Command::TrainClassifier { config } => {
            print_metrics(&harness::train(&config_as(&config, Some(ModelKind::Classifier))?)?)
        }
        Command::TrainMetric { config } => print_metrics(&harness::train(&config_as(&config, Some(ModelKind::Metric))?)?),
        Command::TrainCaptioner { config } => {
            print_metrics(&harness::train(&config_as(&config, Some(ModelKind::Captioner))?)?)
        }
        Command::EvalRetrieval { config, model, checkpoint, split } => {
            let kind = model.map(|m| match m {
                RetrievalModel::Classifier => ModelKind::Classifier,
                RetrievalModel::Metric => ModelKind::Metric,
            });
            let cfg = config_as(&config, kind)?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.output.dir.join(harness::pipeline::CHECKPOINT_NAME));
            let (table, _) = harness::eval_retrieval(&cfg, &ckpt, split.into())?;
            print!("{table}");
        }
        Command::EvalCaption { config, checkpoint, split } => {
            let cfg = config_as(&config, Some(ModelKind::Captioner))?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.output.dir.join(harness::pipeline::CHECKPOINT_NAME));
            let (table, _) = harness::eval_caption(&cfg, &ckpt, split.into())?;
            print!("{table}");
        }
        Command::SynthGenerate { out, size } => print_metrics(&harness::synth_generate(&out, size)?),
        Command::SynthProbe { experiment, scorer, checkpoint, precision, seed, size, out } => {
            let experiments = if experiment == "all" {
                Experiment::ALL.to_vec()
            } else {
                list(&experiment, "experiment", Experiment::parse)?
            };
            let need = || checkpoint.clone().ok_or_else(|| Error::Config("this scorer needs --checkpoint".into()));
            let scorer = match scorer {
                ScorerArg::Random => ProbeScorer::Random { seed },
                ScorerArg::Classifier => ProbeScorer::Classifier { checkpoint: need()?, precision: precision.into() },
                ScorerArg::Metric => ProbeScorer::Metric { checkpoint: need()?, precision: precision.into() },
            };
            let report = harness::synth_probe(&experiments, &scorer, size, &out)?;
            println!("experiment\ttasks\tmean\tstd\tchance");
            for s in &report.summaries {
                println!(
                    "{}\t{}\t{:.2}\t{:.2}\t{:.2}",
                    s.experiment.as_str(),
                    s.tasks,
                    s.mean * 100.0,
                    s.std * 100.0,
                    s.chance * 100.0
                );
            }
        }
        Command::TransferCub { cub_root, sources, classifier, precision, ks, l2, seed, clouds, out } => {
            let opts = TransferOptions {
                cub_root,
                sources: list(&sources, "source", AttributeSource::parse)?,
                classifier: classifier.map(|c| (c, precision.into())),
                ks: match ks {
                    Some(k) => list(&k, "k", |x| x.parse().ok())?,
                    None => vec![usize::MAX],
                },
                l2_candidates: list(&l2, "l2", |x| x.parse().ok())?,
                seed,
                cloud_classes: match clouds {
                    Some(c) => list(&c, "class", |x| x.parse().ok())?,
                    None => Vec::new(),
                },
                ..TransferOptions::default()
            };
            harness::transfer_cub(&opts, &out)?;
            print!("{}", std::fs::read_to_string(out.join("transfer_accuracy.tsv")).map_err(|e| Error::io(&out, e))?);
        }
        Command::Serve { .. } => return Err(Error::Config("serve runs through serve()".into())),
    }
    Ok(())
}

/// Loads the snapshot for `serve`.
pub fn serve_api(
    store: &Path,
    phrases: Option<&Path>,
    model: Option<&Path>,
    precision: Precision,
    config: Option<&Path>,
) -> Result<RetrievalApi> {
    let corpus = match config {
        Some(c) => Some(load_data(&ExperimentConfig::load(c)?)?.0),
        None => None,
    };
    let text: Option<Arc<dyn TextEmbedder>> = match (model, precision) {
        (None, _) => None,
        (Some(p), Precision::F32) => Some(Arc::new(MetricModel::<f32>::load(p, None)?)),
        (Some(p), Precision::F64) => Some(Arc::new(MetricModel::<f64>::load(p, None)?)),
    };
    Ok(RetrievalApi::new(load_snapshot(store, phrases, corpus.as_ref(), text)?))
}

/// Every request is forwarded to the service; handlers run on the blocking
/// pool since scoring is CPU-bound.
pub fn router(api: RetrievalApi) -> Router {
    let api = Arc::new(api);
    Router::new().fallback(move |req: Request<Body>| {
        let api = api.clone();
        async move {
            let (parts, body) = req.into_parts();
            let bytes: Bytes = match axum::body::to_bytes(body, 1 << 20).await {
                Ok(b) => b,
                Err(_) => return plain(StatusCode::PAYLOAD_TOO_LARGE, "request body too large"),
            };
            let method = parts.method.as_str().to_string();
            let path = parts.uri.path().to_string();
            let query = parts.uri.query().map(str::to_string);
            let resp = tokio::task::spawn_blocking(move || api.handle(&method, &path, query.as_deref(), &bytes))
                .await
                .expect("handler does not panic");
            Response::builder()
                .status(resp.status)
                .header(header::CONTENT_TYPE, resp.content_type)
                .body(Body::from(resp.body))
                .expect("valid response")
        }
    })
}

fn plain(status: StatusCode, msg: &str) -> Response<Body> {
    Response::builder()
        .status(status)
        .header(header::CONTENT_TYPE, "text/plain")
        .body(Body::from(msg.to_string()))
        .expect("valid response")
}

pub async fn serve(api: RetrievalApi, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(api)).await
}

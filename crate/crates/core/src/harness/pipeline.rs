//! End-to-end runs behind the command-line subcommands. Each writes its
//! tables under the run directory and returns the run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::api::{Backend, Snapshot};
use super::config::{ExperimentConfig, ModelKind, Precision};
use super::manifest::{corpus_checksum, sha256_file, write_output, RunManifest};
use crate::captioner::{captions_tsv, evaluate_captions, train_captioner, Captioner};
use crate::corpus::{build_label_matrix, build_vocabulary, hash_split, load_corpus, Corpus, Split, TextureImage, Vocabulary};
use crate::joint_embedding::{evaluate_retrieval, train_metric, EmbeddingStore, MetricModel, MetricScorer, Modality};
use crate::metrics::{CaptionReport, MetricReport};
use crate::phrase_classifier::{score_description, train_classifier, Aggregation, PhraseClassifier, ScoreMatrix};
use crate::synthprobe::{
    build_all, generate_corpus, manifest_tsv, procedural_bases, run_probe, to_corpus, DescriptionScorer, Experiment,
    Palette, ProbeReport, ProbeTask, RandomScorer, SimilarGroups, SyntheticImage,
};
use crate::training::{EpochStats, StopReason};
use crate::transfer::{
    accuracy_vs_k, cloud_tsv, embed_with_classifier, select_l2, weight_cloud, AttributeSet, AttributeSource,
    CubDataset, LinearConfig,
};
use crate::{Error, Result, Scalar};

pub const RETRIEVAL_TSV_HEADER: &str = "model\tsplit\ttask\tMAP\tMRR\tP@5\tP@20\tR@5\tR@20";
pub const CAPTION_TSV_HEADER: &str = "model\tsplit\tBLEU-1\tBLEU-2\tBLEU-3\tBLEU-4\tMETEOR\tROUGE-L\tCIDEr";
pub const CHECKPOINT_NAME: &str = "model.ckpt";

/// Corpus, training-split vocabulary and dataset checksums for `cfg`.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Corpus, Vocabulary, BTreeMap<String, String>)> {
    let d = &cfg.data;
    let mut sums = BTreeMap::new();
    let corpus = match d.demo_images {
        Some(n) => {
            let base = crate::synthprobe::demo_corpus(n, d.demo_size, cfg.experiment.seed)?;
            let images = base
                .images()
                .iter()
                .map(|im| TextureImage { split: hash_split(&im.id, d.split_seed), ..im.clone() })
                .collect();
            let c = Corpus::new(images, base.descriptions().to_vec())?;
            sums.insert("demo".to_string(), corpus_checksum(&c)?);
            c
        }
        None => {
            let ann = d.annotations.as_ref().expect("validated");
            let (c, report) = load_corpus(ann, d.images.as_ref().expect("validated"), d.split_seed)?;
            if !report.missing_images.is_empty() {
                log::warn!("{} annotation records name missing images", report.missing_images.len());
            }
            sums.insert("annotations".to_string(), sha256_file(ann)?);
            c
        }
    };
    let vocab = build_vocabulary(corpus.split_descriptions(Split::Train), d.phrase_min_count, d.word_min_count)?;
    Ok((corpus, vocab, sums))
}

fn start(cfg: &ExperimentConfig, command: &str) -> Result<(RunManifest, PathBuf)> {
    cfg.write_copy()?;
    Ok((RunManifest::new(command, cfg.hash()), cfg.output.dir.clone()))
}

/// Vocabulary and split tables.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let (mut m, dir) = start(cfg, "prepare-data")?;
    let (corpus, vocab, sums) = load_data(cfg)?;
    m.datasets = sums;
    write_output(&mut m, &dir, "phrases.tsv", vocab.phrases_tsv().as_bytes())?;
    write_output(&mut m, &dir, "words.tsv", vocab.words_tsv().as_bytes())?;
    let mut splits = String::from("image_id\tsplit\n");
    for im in corpus.images() {
        splits.push_str(&format!("{}\t{}\n", im.id, im.split));
    }
    write_output(&mut m, &dir, "splits.tsv", splits.as_bytes())?;
    let (_, coverage) = build_label_matrix(&corpus, &vocab)?;
    for (s, n) in corpus.split_counts() {
        m.metric(format!("images.{s}"), n as f64);
    }
    m.metric("phrases", vocab.len() as f64);
    m.metric("words", vocab.words().len() as f64);
    m.metric("images_without_phrase", coverage.empty_rows.len() as f64);
    m.write(&dir)?;
    Ok(m)
}

fn history_tsv(history: &[EpochStats]) -> String {
    let keys: Vec<&str> = history.first().map(|h| h.val.iter().map(|(k, _)| k.as_str()).collect()).unwrap_or_default();
    let mut s = format!("epoch\ttrain_loss\t{}\n", keys.join("\t"));
    for h in history {
        let vals: Vec<String> = h.val.iter().map(|(_, v)| format!("{v:.6}")).collect();
        s.push_str(&format!("{}\t{:.6}\t{}\n", h.epoch, h.train_loss, vals.join("\t")));
    }
    s
}

fn stop_label(s: &StopReason) -> String {
    match s {
        StopReason::Completed => "completed".into(),
        StopReason::EarlyStopped { epoch } => format!("early_stopped@{epoch}"),
        StopReason::Diverged { epoch } => format!("diverged@{epoch}"),
    }
}

fn retrieval_row(model: &str, split: Split, task: &str, r: &MetricReport) -> String {
    format!("{model}\t{split}\t{task}\t{}\n", r.tsv_row())
}

fn record_retrieval(m: &mut RunManifest, split: Split, task: &str, r: &MetricReport) {
    for (k, v) in [("map", r.map), ("mrr", r.mrr), ("p5", r.p5), ("p20", r.p20), ("r5", r.r5), ("r20", r.r20)] {
        m.metric(format!("{split}.{task}.{k}"), v);
    }
}

fn eval_splits(corpus: &Corpus) -> Vec<Split> {
    [Split::Val, Split::Test]
        .into_iter()
        .filter(|&s| !corpus.split_indices(s).is_empty())
        .collect()
}

/// Trains the configured model, then writes the checkpoint, training
/// history, evaluation tables and the stores the server consumes.
pub fn train(cfg: &ExperimentConfig) -> Result<RunManifest> {
    match cfg.experiment.precision {
        Precision::F32 => train_as::<f32>(cfg),
        Precision::F64 => train_as::<f64>(cfg),
    }
}

fn train_as<T: Scalar>(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let kind = cfg.experiment.model;
    let (mut m, dir) = start(cfg, &format!("train-{}", kind.as_str()))?;
    let (corpus, vocab, sums) = load_data(cfg)?;
    m.datasets = sums;
    let ckpt = dir.join(CHECKPOINT_NAME);
    let (history, stop, best) = match kind {
        ModelKind::Classifier => {
            let out = train_classifier::<T>(&corpus, &vocab, cfg.classifier_config())?;
            out.model.save(&ckpt)?;
            classifier_outputs(&out.model, &corpus, &vocab, &mut m, &dir)?;
            (out.history, out.stop, out.best_epoch)
        }
        ModelKind::Metric => {
            let out = train_metric::<T>(&corpus, &vocab, cfg.metric_config(), None)?;
            out.model.save(&ckpt)?;
            metric_outputs(&out.model, &corpus, &vocab, &mut m, &dir)?;
            (out.history, out.stop, out.best_epoch)
        }
        ModelKind::Captioner => {
            let out = train_captioner::<T>(&corpus, cfg.captioner_config())?;
            out.model.save(&ckpt)?;
            captioner_outputs(&out.model, &corpus, &mut m, &dir)?;
            (out.history, out.stop, out.best_epoch)
        }
    };
    m.checkpoints.push(CHECKPOINT_NAME.to_string());
    write_output(&mut m, &dir, "history.tsv", history_tsv(&history).as_bytes())?;
    m.metric("best_epoch", best as f64);
    m.metric("epochs_run", history.len() as f64);
    m.stop_reason = Some(stop_label(&stop));
    m.write(&dir)?;
    Ok(m)
}

fn classifier_outputs<T: Scalar>(
    model: &PhraseClassifier<T>,
    corpus: &Corpus,
    vocab: &Vocabulary,
    m: &mut RunManifest,
    dir: &Path,
) -> Result<()> {
    let scores = model.score_corpus(corpus)?;
    scores.save(&dir.join(SCORE_STORE))?;
    m.outputs.push(SCORE_STORE.to_string());
    let mut table = format!("{RETRIEVAL_TSV_HEADER}\n");
    for split in eval_splits(corpus) {
        let (phrase, image) = classifier_reports(&scores, corpus, vocab, split)?;
        table.push_str(&retrieval_row("classifier", split, "phrase", &phrase));
        table.push_str(&retrieval_row("classifier", split, "image", &image));
        record_retrieval(m, split, "phrase", &phrase);
        record_retrieval(m, split, "image", &image);
    }
    write_output(m, dir, "retrieval.tsv", table.as_bytes())?;
    Ok(())
}

/// Phrase retrieval per image and image retrieval per phrase on one split.
fn classifier_reports(
    scores: &ScoreMatrix,
    corpus: &Corpus,
    vocab: &Vocabulary,
    split: Split,
) -> Result<(MetricReport, MetricReport)> {
    let idx = corpus.split_indices(split);
    let (labels, _) = build_label_matrix(corpus, vocab)?;
    let data: Vec<f64> = idx.iter().flat_map(|&r| scores.row(r).to_vec()).collect();
    let ids = idx.iter().map(|&r| corpus.images()[r].id.clone()).collect();
    let sub = ScoreMatrix::new(ids, scores.phrases.clone(), data)?;
    let per_image: Vec<_> = idx.iter().map(|&r| labels.positives(r).into_iter().collect()).collect();
    let per_phrase: Vec<_> = (0..vocab.len())
        .map(|p| idx.iter().filter(|&&r| labels.get(r, p)).map(|&r| corpus.images()[r].id.clone()).collect())
        .collect();
    Ok((sub.phrase_retrieval(&per_image), sub.image_retrieval(&per_phrase)))
}

pub const IMAGE_STORE: &str = "images.emb";
pub const SCORE_STORE: &str = "scores.bin";
pub const PHRASE_STORE: &str = "phrases.emb";

fn metric_outputs<T: Scalar>(
    model: &MetricModel<T>,
    corpus: &Corpus,
    vocab: &Vocabulary,
    m: &mut RunManifest,
    dir: &Path,
) -> Result<()> {
    model.embed_corpus(corpus)?.save(&dir.join(IMAGE_STORE))?;
    model.embed_texts(vocab.phrases())?.save(&dir.join(PHRASE_STORE))?;
    m.outputs.extend([IMAGE_STORE.to_string(), PHRASE_STORE.to_string()]);
    let mut table = format!("{RETRIEVAL_TSV_HEADER}\n");
    for split in eval_splits(corpus) {
        let r = evaluate_retrieval(model, corpus, vocab, &corpus.split_indices(split))?;
        table.push_str(&retrieval_row("metric", split, "phrase", &r.phrase));
        table.push_str(&retrieval_row("metric", split, "image", &r.image));
        record_retrieval(m, split, "phrase", &r.phrase);
        record_retrieval(m, split, "image", &r.image);
    }
    write_output(m, dir, "retrieval.tsv", table.as_bytes())?;
    Ok(())
}

fn captioner_outputs<T: Scalar>(model: &Captioner<T>, corpus: &Corpus, m: &mut RunManifest, dir: &Path) -> Result<()> {
    let mut table = format!("{CAPTION_TSV_HEADER}\n");
    for split in eval_splits(corpus) {
        let (caps, report) = caption_split(model, corpus, split)?;
        write_output(m, dir, &format!("captions_{split}.tsv"), captions_tsv(&caps).as_bytes())?;
        table.push_str(&format!("captioner\t{split}\t{}\n", report.tsv_row()));
        record_caption(m, split, &report);
    }
    write_output(m, dir, "captions.tsv", table.as_bytes())?;
    Ok(())
}

fn caption_split<T: Scalar>(
    model: &Captioner<T>,
    corpus: &Corpus,
    split: Split,
) -> Result<(Vec<(String, String)>, CaptionReport)> {
    let idx = corpus.split_indices(split);
    let sub = corpus.subset(&idx);
    let caps = model.caption_corpus(&sub, model.config.beam, model.config.max_len)?;
    let texts: Vec<String> = caps.iter().map(|(_, c)| c.clone()).collect();
    let all: Vec<usize> = (0..sub.len()).collect();
    let report = evaluate_captions(&sub, &all, &texts);
    Ok((caps, report))
}

fn record_caption(m: &mut RunManifest, split: Split, r: &CaptionReport) {
    for (n, b) in r.bleu.iter().enumerate() {
        m.metric(format!("{split}.bleu{}", n + 1), *b);
    }
    m.metric(format!("{split}.meteor"), r.meteor);
    m.metric(format!("{split}.rouge_l"), r.rouge_l);
    m.metric(format!("{split}.cider"), r.cider);
}

/// Retrieval table of a saved checkpoint on one split.
pub fn eval_retrieval(cfg: &ExperimentConfig, checkpoint: &Path, split: Split) -> Result<(String, RunManifest)> {
    match cfg.experiment.precision {
        Precision::F32 => eval_retrieval_as::<f32>(cfg, checkpoint, split),
        Precision::F64 => eval_retrieval_as::<f64>(cfg, checkpoint, split),
    }
}

fn eval_retrieval_as<T: Scalar>(cfg: &ExperimentConfig, checkpoint: &Path, split: Split) -> Result<(String, RunManifest)> {
    let (mut m, dir) = start(cfg, "eval-retrieval")?;
    let (corpus, vocab, sums) = load_data(cfg)?;
    m.datasets = sums;
    m.checkpoints.push(checkpoint.display().to_string());
    if corpus.split_indices(split).is_empty() {
        return Err(Error::Empty(format!("no {split} images")));
    }
    let mut table = format!("{RETRIEVAL_TSV_HEADER}\n");
    let (phrase, image) = match cfg.experiment.model {
        ModelKind::Classifier => {
            let model = PhraseClassifier::<T>::load(checkpoint)?;
            let scores = model.score_corpus(&corpus)?;
            classifier_reports(&scores, &corpus, &vocab, split)?
        }
        ModelKind::Metric => {
            let model = MetricModel::<T>::load(checkpoint, None)?;
            let r = evaluate_retrieval(&model, &corpus, &vocab, &corpus.split_indices(split))?;
            (r.phrase, r.image)
        }
        ModelKind::Captioner => {
            return Err(Error::Config("retrieval needs a classifier or metric model".into()));
        }
    };
    let name = cfg.experiment.model.as_str();
    table.push_str(&retrieval_row(name, split, "phrase", &phrase));
    table.push_str(&retrieval_row(name, split, "image", &image));
    record_retrieval(&mut m, split, "phrase", &phrase);
    record_retrieval(&mut m, split, "image", &image);
    write_output(&mut m, &dir, &format!("retrieval_{split}.tsv"), table.as_bytes())?;
    m.write(&dir)?;
    Ok((table, m))
}

/// Caption table of a saved captioner on one split.
pub fn eval_caption(cfg: &ExperimentConfig, checkpoint: &Path, split: Split) -> Result<(String, RunManifest)> {
    match cfg.experiment.precision {
        Precision::F32 => eval_caption_as::<f32>(cfg, checkpoint, split),
        Precision::F64 => eval_caption_as::<f64>(cfg, checkpoint, split),
    }
}

fn eval_caption_as<T: Scalar>(cfg: &ExperimentConfig, checkpoint: &Path, split: Split) -> Result<(String, RunManifest)> {
    let (mut m, dir) = start(cfg, "eval-caption")?;
    let (corpus, _, sums) = load_data(cfg)?;
    m.datasets = sums;
    m.checkpoints.push(checkpoint.display().to_string());
    if corpus.split_indices(split).is_empty() {
        return Err(Error::Empty(format!("no {split} images")));
    }
    let model = Captioner::<T>::load(checkpoint)?;
    let (caps, report) = caption_split(&model, &corpus, split)?;
    write_output(&mut m, &dir, &format!("captions_{split}.tsv"), captions_tsv(&caps).as_bytes())?;
    let table = format!("{CAPTION_TSV_HEADER}\ncaptioner\t{split}\t{}\n", report.tsv_row());
    write_output(&mut m, &dir, &format!("caption_metrics_{split}.tsv"), table.as_bytes())?;
    record_caption(&mut m, split, &report);
    m.write(&dir)?;
    Ok((table, m))
}

/// The synthetic images and probe tasks for base textures of `size` pixels.
pub fn synthetic_probe_set(size: u32) -> Result<(Vec<SyntheticImage>, Vec<ProbeTask>)> {
    let palette = Palette::default();
    let images = generate_corpus(&procedural_bases(size), &palette)?;
    let tasks = build_all(&images, &palette, &SimilarGroups::default())?;
    Ok((images, tasks))
}

/// Writes the synthetic images as PNG files, their descriptions and the
/// probe manifest.
pub fn synth_generate(out: &Path, size: u32) -> Result<RunManifest> {
    let mut m = RunManifest::new("synth-generate", format!("size={size}"));
    let (images, tasks) = synthetic_probe_set(size)?;
    let img_dir = out.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut desc = String::from("image_id\tdescription\n");
    for im in &images {
        let path = img_dir.join(format!("{}.png", im.id));
        im.pixels.save(&path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        desc.push_str(&format!("{}\t{}\n", im.id, im.description));
    }
    write_output(&mut m, out, "descriptions.tsv", desc.as_bytes())?;
    let manifest = manifest_tsv(&tasks);
    write_output(&mut m, out, "probe_manifest.tsv", manifest.as_bytes())?;
    m.datasets.insert("probe_manifest".into(), hex::encode(<sha2::Sha256 as sha2::Digest>::digest(manifest.as_bytes())));
    m.metric("images", images.len() as f64);
    m.metric("tasks", tasks.len() as f64);
    m.write(out)?;
    Ok(m)
}

/// Scores synthetic descriptions by averaging classifier phrase scores.
pub struct ClassifierScorer {
    pub scores: ScoreMatrix,
    pub vocab: Vocabulary,
    pub name: String,
}

impl DescriptionScorer for ClassifierScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, query: &str, image_ids: &[String]) -> Result<Vec<f64>> {
        image_ids
            .iter()
            .map(|id| {
                let r = self.scores.row_of(id).ok_or_else(|| Error::UnknownId(id.clone()))?;
                Ok(score_description(&self.vocab, self.scores.row(r), query, Aggregation::Mean))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ProbeScorer {
    Random { seed: u64 },
    Classifier { checkpoint: PathBuf, precision: Precision },
    Metric { checkpoint: PathBuf, precision: Precision },
}

/// Runs the probe experiments in `experiments` and writes the report table.
pub fn synth_probe(experiments: &[Experiment], scorer: &ProbeScorer, size: u32, out: &Path) -> Result<ProbeReport> {
    let (images, tasks) = synthetic_probe_set(size)?;
    let tasks: Vec<ProbeTask> = tasks.into_iter().filter(|t| experiments.contains(&t.experiment)).collect();
    let report = match scorer {
        ProbeScorer::Random { seed } => run_probe(&RandomScorer { seed: *seed }, &tasks)?,
        ProbeScorer::Classifier { checkpoint, precision } => match precision {
            Precision::F32 => probe_classifier::<f32>(checkpoint, &images, &tasks)?,
            Precision::F64 => probe_classifier::<f64>(checkpoint, &images, &tasks)?,
        },
        ProbeScorer::Metric { checkpoint, precision } => match precision {
            Precision::F32 => probe_metric::<f32>(checkpoint, &images, &tasks)?,
            Precision::F64 => probe_metric::<f64>(checkpoint, &images, &tasks)?,
        },
    };
    let mut m = RunManifest::new("synth-probe", format!("{scorer:?}"));
    let mut per_task = String::from("experiment\tquery\tr_precision\n");
    for (e, q, v) in &report.per_task {
        per_task.push_str(&format!("{}\t{q}\t{v:.6}\n", e.as_str()));
    }
    write_output(&mut m, out, "probe_tasks.tsv", per_task.as_bytes())?;
    let table = format!("{}\n{}\n", ProbeReport::TSV_HEADER, report.tsv_row());
    write_output(&mut m, out, "probe_report.tsv", table.as_bytes())?;
    for s in &report.summaries {
        let e = s.experiment.as_str();
        m.metric(format!("{e}.mean"), s.mean);
        m.metric(format!("{e}.std"), s.std);
        m.metric(format!("{e}.chance"), s.chance);
    }
    m.write(out)?;
    Ok(report)
}

fn probe_classifier<T: Scalar>(ckpt: &Path, images: &[SyntheticImage], tasks: &[ProbeTask]) -> Result<ProbeReport> {
    let model = PhraseClassifier::<T>::load(ckpt)?;
    let corpus = to_corpus(images, Split::Test)?;
    let scorer = ClassifierScorer {
        scores: model.score_corpus(&corpus)?,
        vocab: Vocabulary::from_phrases(&model.phrases),
        name: "classifier".into(),
    };
    run_probe(&scorer, tasks)
}

fn probe_metric<T: Scalar>(ckpt: &Path, images: &[SyntheticImage], tasks: &[ProbeTask]) -> Result<ProbeReport> {
    let model = MetricModel::<T>::load(ckpt, None)?;
    let corpus = to_corpus(images, Split::Test)?;
    let scorer = MetricScorer {
        images: model.embed_corpus(&corpus)?,
        model: &model,
        name: "metric".into(),
    };
    run_probe(&scorer, tasks)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferOptions {
    pub cub_root: PathBuf,
    pub sources: Vec<AttributeSource>,
    /// Classifier checkpoint for the texture source.
    pub classifier: Option<(PathBuf, Precision)>,
    pub ks: Vec<usize>,
    pub l2_candidates: Vec<f64>,
    /// Fraction of training images held out for choosing L2.
    pub val_fraction: f64,
    pub seed: u64,
    /// Classes whose weight clouds are written.
    pub cloud_classes: Vec<usize>,
    pub cloud_top: usize,
}

impl Default for TransferOptions {
    fn default() -> Self {
        TransferOptions {
            cub_root: PathBuf::new(),
            sources: vec![AttributeSource::CubShape, AttributeSource::CubPattern, AttributeSource::CubColor],
            classifier: None,
            ks: vec![usize::MAX],
            l2_candidates: vec![1e-4, 1e-3, 1e-2, 1e-1],
            val_fraction: 0.2,
            seed: 0,
            cloud_classes: Vec::new(),
            cloud_top: 15,
        }
    }
}

/// Fine-grained classification from attribute features. Writes the
/// accuracy-vs-k table and weight clouds.
pub fn transfer_cub(opts: &TransferOptions, out: &Path) -> Result<RunManifest> {
    let cub = CubDataset::load(&opts.cub_root)?;
    let mut m = RunManifest::new("transfer-cub", format!("{opts:?}"));
    let needs_texture = opts
        .sources
        .iter()
        .any(|s| matches!(s, AttributeSource::Texture | AttributeSource::Combined));
    let texture = if needs_texture {
        let (ckpt, precision) = opts
            .classifier
            .as_ref()
            .ok_or_else(|| Error::Config("texture attributes need a classifier checkpoint".into()))?;
        let images = cub
            .image_ids
            .iter()
            .map(|p| TextureImage {
                id: p.clone(),
                category: p.split('/').next().unwrap_or("bird").to_string(),
                split: Split::Test,
                pixels: crate::corpus::PixelSource::File(opts.cub_root.join("images").join(p)),
            })
            .collect();
        let corpus = Corpus::new(images, Vec::new())?;
        let (set, digest) = match precision {
            Precision::F32 => embed_with_classifier(&PhraseClassifier::<f32>::load(ckpt)?, &corpus, false)?,
            Precision::F64 => embed_with_classifier(&PhraseClassifier::<f64>::load(ckpt)?, &corpus, false)?,
        };
        m.checkpoints.push(format!("{} sha256-weights={digest}", ckpt.display()));
        Some(set)
    } else {
        None
    };
    let source_set = |s: AttributeSource| -> Result<AttributeSet> {
        match s {
            AttributeSource::Texture => Ok(texture.clone().expect("loaded above")),
            AttributeSource::Combined => {
                let mut parts = vec![texture.clone().expect("loaded above")];
                for c in [AttributeSource::CubShape, AttributeSource::CubPattern, AttributeSource::CubColor] {
                    parts.push(cub.attribute_set(c)?);
                }
                AttributeSet::combine(&parts.iter().collect::<Vec<_>>())
            }
            other => cub.attribute_set(other),
        }
    };

    let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
    for (i, id) in cub.image_ids.iter().enumerate() {
        if !cub.is_train[i] {
            te.push(i);
        } else if held_out(id, opts.seed, opts.val_fraction) {
            va.push(i);
        } else {
            tr.push(i);
        }
    }
    if tr.is_empty() || va.is_empty() || te.is_empty() {
        return Err(Error::Empty("train, validation and test partitions must be nonempty".into()));
    }
    let pick = |v: &[usize]| v.iter().map(|&i| cub.labels[i]).collect::<Vec<_>>();
    let (ytr, yva, yte) = (pick(&tr), pick(&va), pick(&te));
    let base = LinearConfig::default();
    let mut table = String::from("source\tk\tl2\tval_accuracy\ttest_accuracy\n");
    for &s in &opts.sources {
        let set = source_set(s)?;
        let ks: Vec<usize> = opts.ks.iter().map(|&k| k.min(set.cols())).collect();
        let points = accuracy_vs_k(
            (&set.select_rows(&tr), &ytr),
            (&set.select_rows(&va), &yva),
            (&set.select_rows(&te), &yte),
            cub.num_classes(),
            &ks,
            &opts.l2_candidates,
            &base,
        )?;
        for p in &points {
            table.push_str(&format!(
                "{}\t{}\t{}\t{:.2}\t{:.2}\n",
                s.as_str(),
                p.k,
                p.l2,
                p.val_accuracy * 100.0,
                p.test_accuracy * 100.0
            ));
            m.metric(format!("{}.k{}.test_accuracy", s.as_str(), p.k), p.test_accuracy);
        }
        if !opts.cloud_classes.is_empty() {
            let (model, _) = select_l2(
                (&set.select_rows(&tr), &ytr),
                (&set.select_rows(&va), &yva),
                cub.num_classes(),
                &opts.l2_candidates,
                &base,
            )?;
            let mut clouds = Vec::new();
            for &c in &opts.cloud_classes {
                clouds.extend(weight_cloud(&model, c, opts.cloud_top)?);
            }
            write_output(&mut m, out, &format!("clouds_{}.tsv", s.as_str()), cloud_tsv(&clouds).as_bytes())?;
        }
    }
    write_output(&mut m, out, "transfer_accuracy.tsv", table.as_bytes())?;
    m.write(out)?;
    Ok(m)
}

fn held_out(id: &str, seed: u64, fraction: f64) -> bool {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    let d = h.finalize();
    let v = u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) >> 11;
    (v as f64 / (1u64 << 53) as f64) < fraction
}

/// Server snapshot from a store file: a classifier score matrix when a
/// `.phrases` companion exists, otherwise image embeddings paired with the
/// phrase embeddings in `phrases` (default: `phrases.emb` beside the store).
/// Attaches `corpus` for descriptions and pixels, and `text` for free-text
/// queries.
pub fn load_snapshot(
    store: &Path,
    phrases: Option<&Path>,
    corpus: Option<&Corpus>,
    text: Option<Arc<dyn super::api::TextEmbedder>>,
) -> Result<Snapshot> {
    let backend = if ScoreMatrix::phrases_path(store).exists() {
        Backend::Scores(ScoreMatrix::load(store)?)
    } else {
        let images = EmbeddingStore::load(store, Modality::Image)?;
        let phrase_path = phrases
            .map(Path::to_path_buf)
            .unwrap_or_else(|| store.with_file_name(PHRASE_STORE));
        let phrases = EmbeddingStore::load(&phrase_path, Modality::Text)?;
        Backend::Embeddings { images, phrases, text }
    };
    let snap = Snapshot::new(backend)?;
    Ok(match corpus {
        Some(c) => snap.with_corpus(c),
        None => snap,
    })
}

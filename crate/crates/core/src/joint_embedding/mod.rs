//! Triplet-loss joint embedding of images and texts (phrases or whole
//! descriptions), with retrieval in both directions by squared Euclidean
//! distance.

mod store;
mod triplets;

pub use store::{EmbeddingStore, Modality, EMBEDDING_MAGIC};
pub use triplets::{
    sample_triplets, squared_distance, triplet_loss, triplet_losses, PairSet, Triplet, MARGIN, MAX_TRIES,
};

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_label_matrix, Corpus, Split, Vocabulary};
use crate::encoders::{
    stack, Backbone, BackboneConfig, ContextualEncoder, ImageEncoder, ImageInput, Projection, TextEncoder,
    TextEncoderKind, WordVectors,
};
use crate::metrics::{rank_ascending, MetricReport};
use crate::nn::checkpoint::{self, CheckpointManifest};
use crate::nn::{Adam, AdamConfig, ParamStore, Tape, Tensor, Var};
use crate::phrase_classifier::ScoreMatrix;
use crate::synthprobe::DescriptionScorer;
use crate::training::{minibatches, EpochStats, ImageCache, StopReason, TrainOutcome};
use crate::{Error, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextMode {
    /// Positives are (image, frequent phrase) pairs.
    Phrase,
    /// Positives are (image, whole description) pairs.
    Description,
}

/// When validation stops counting as improvement.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// Patience runs out once neither MAP has improved on its best.
    #[default]
    NeitherImproves,
    /// Patience runs out once the sum of both MAPs has not improved.
    SumImproves,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub backbone: BackboneConfig,
    pub layer_spec: Vec<usize>,
    pub input: ImageInput,
    pub joint_dim: usize,
    pub text_encoder: TextEncoderKind,
    pub mode: TextMode,
    pub word_dim: usize,
    pub lstm_hidden: usize,
    /// Text-format word vectors used to initialize the word table.
    #[serde(default)]
    pub word_vectors: Option<PathBuf>,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub hflip: bool,
    pub seed: u64,
    #[serde(default)]
    pub patience: Option<usize>,
    #[serde(default)]
    pub stop_rule: StopRule,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    #[serde(default)]
    pub freeze: Vec<String>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            backbone: BackboneConfig::standard(),
            layer_spec: vec![2, 4],
            input: ImageInput::default(),
            joint_dim: 256,
            text_encoder: TextEncoderKind::MeanPool,
            mode: TextMode::Phrase,
            word_dim: 300,
            lstm_hidden: 256,
            word_vectors: None,
            epochs: 60,
            batch_size: 32,
            optimizer: AdamConfig::with_lr(1e-4),
            hflip: true,
            seed: 0,
            patience: Some(5),
            stop_rule: StopRule::NeitherImproves,
            checkpoint_dir: None,
            freeze: Vec::new(),
        }
    }
}

/// `ψ(I)` = projection of pooled backbone features; `φ(T)` = projection of
/// the text encoder output. Both land in `joint_dim` dimensions.
pub struct MetricModel<T> {
    pub config: MetricConfig,
    pub image: ImageEncoder,
    image_proj: Projection,
    pub text: TextEncoder,
    text_proj: Projection,
    pub words: Vec<String>,
    pub store: ParamStore<T>,
}

impl<T: Scalar> MetricModel<T> {
    /// `words` is the text encoder's word list; `contextual` is required for
    /// the contextual encoder kind and ignored otherwise.
    pub fn new(config: MetricConfig, words: Vec<String>, contextual: Option<Arc<dyn ContextualEncoder>>) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, "backbone", "encoder", config.backbone.clone(), &mut rng);
        let image = ImageEncoder::new(bb, config.layer_spec.clone())?;
        let image_proj = Projection::new(&mut store, "joint.image", "joint", image.feature_dim(), config.joint_dim, &mut rng);
        let text = match config.text_encoder {
            TextEncoderKind::Contextual => TextEncoder::contextual(contextual)?,
            kind => {
                if words.is_empty() {
                    return Err(Error::Config("text encoder needs a nonempty word list".into()));
                }
                let vectors = config.word_vectors.as_deref().map(WordVectors::load).transpose()?;
                let std = 1.0 / (config.word_dim as f64).sqrt();
                let (table, hits) = WordVectors::table::<T, _>(vectors.as_ref(), &words, config.word_dim, std, &mut rng);
                if vectors.is_some() {
                    log::info!("word vectors cover {hits} of {} words", words.len());
                }
                if kind == TextEncoderKind::MeanPool {
                    TextEncoder::mean_pool(&mut store, "text", "text", &words, table)
                } else {
                    TextEncoder::recurrent(&mut store, "text", "text", &words, table, config.lstm_hidden, &mut rng)
                }
            }
        };
        let text_proj = Projection::new(&mut store, "joint.text", "joint", text.out_dim(), config.joint_dim, &mut rng);
        Ok(MetricModel {
            config,
            image,
            image_proj,
            text,
            text_proj,
            words,
            store,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.joint_dim
    }

    /// `[N, joint_dim]` for `[N,3,S,S]` images.
    pub fn image_forward(&self, tape: &Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let f = self.image.features(tape, store, x);
        self.image_proj.forward(tape, store, f)
    }

    /// `[B, joint_dim]` for `B` texts.
    pub fn text_forward(&self, tape: &Tape<T>, store: &ParamStore<T>, texts: &[&str]) -> Result<Var> {
        let h = self.text.forward(tape, store, texts)?;
        Ok(self.text_proj.forward(tape, store, h))
    }

    fn embed_images_with(&self, store: &ParamStore<T>, cache: &ImageCache<T>, idx: &[usize]) -> Vec<f64> {
        let chunks: Vec<Vec<f64>> = idx
            .par_chunks(32)
            .map(|chunk| {
                let items: Vec<Tensor<T>> = chunk.iter().map(|&i| cache.get(i).clone()).collect();
                let tape = Tape::new();
                let x = tape.constant(stack(&items));
                let e = self.image_forward(&tape, store, x);
                tape.value(e).data().iter().map(|v| v.as_f64()).collect()
            })
            .collect();
        chunks.concat()
    }

    fn embed_texts_with(&self, store: &ParamStore<T>, texts: &[String]) -> Result<Vec<f64>> {
        let chunks: Vec<Vec<f64>> = texts
            .par_chunks(256)
            .map(|chunk| {
                let refs: Vec<&str> = chunk.iter().map(String::as_str).collect();
                let tape = Tape::new();
                let e = self.text_forward(&tape, store, &refs)?;
                Ok(tape.value(e).data().iter().map(|v| v.as_f64()).collect())
            })
            .collect::<Result<_>>()?;
        Ok(chunks.concat())
    }

    /// Image embeddings of every corpus image.
    pub fn embed_corpus(&self, corpus: &Corpus) -> Result<EmbeddingStore> {
        let cache = ImageCache::new(corpus, &self.config.input)?;
        let idx: Vec<usize> = (0..corpus.len()).collect();
        let data = self.embed_images_with(&self.store, &cache, &idx);
        EmbeddingStore::new(Modality::Image, corpus.images().iter().map(|i| i.id.clone()).collect(), self.dim(), data)
    }

    /// Text embeddings keyed by the texts themselves.
    pub fn embed_texts(&self, texts: &[String]) -> Result<EmbeddingStore> {
        let data = self.embed_texts_with(&self.store, texts)?;
        EmbeddingStore::new(Modality::Text, texts.to_vec(), self.dim(), data)
    }

    pub fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        self.embed_texts_with(&self.store, &[text.to_string()])
    }

    fn manifest(&self) -> CheckpointManifest {
        CheckpointManifest {
            kind: "metric".into(),
            encoder_kind: Some(self.text.kind().as_str().into()),
            dims: [
                ("joint".to_string(), self.dim()),
                ("feature".to_string(), self.image.feature_dim()),
                ("text".to_string(), self.text.out_dim()),
            ]
            .into_iter()
            .collect(),
            layer_spec: self.image.layer_spec.clone(),
            seed: self.config.seed,
            extra: serde_json::json!({ "config": self.config, "words": self.words }),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.manifest(), &self.store)
    }

    pub fn load(path: &Path, contextual: Option<Arc<dyn ContextualEncoder>>) -> Result<Self> {
        let (m, store) = checkpoint::load::<T>(path)?;
        if m.kind != "metric" {
            return Err(Error::Checkpoint(format!("expected a metric checkpoint, found {}", m.kind)));
        }
        let mut config: MetricConfig = serde_json::from_value(m.extra["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let words: Vec<String> = serde_json::from_value(m.extra["words"].clone())
            .map_err(|e| Error::Checkpoint(format!("words: {e}")))?;
        // the word table comes from the checkpoint
        config.word_vectors = None;
        let mut model = Self::new(config, words, contextual)?;
        model.store.load_from(&store)?;
        Ok(model)
    }
}

/// Universe ids by ascending squared distance to `query` (ties by id).
pub fn retrieve(query: &[f64], universe: &EmbeddingStore) -> Result<Vec<String>> {
    if universe.is_empty() {
        return Err(Error::Empty("retrieval universe is empty".into()));
    }
    if query.len() != universe.dim {
        return Err(Error::Shape(format!("query has {} dims, universe {}", query.len(), universe.dim)));
    }
    let scored: Vec<(String, f64)> = (0..universe.len())
        .map(|i| (universe.ids[i].clone(), squared_distance(query, universe.row(i))))
        .collect();
    Ok(rank_ascending(&scored))
}

/// Image × text matrix of negated squared distances, so that higher means
/// closer and the classifier's retrieval code applies unchanged.
pub fn distance_scores(images: &EmbeddingStore, texts: &EmbeddingStore) -> Result<ScoreMatrix> {
    if images.dim != texts.dim {
        return Err(Error::Shape(format!("image dim {} vs text dim {}", images.dim, texts.dim)));
    }
    let data: Vec<f64> = (0..images.len())
        .into_par_iter()
        .flat_map_iter(|i| (0..texts.len()).map(move |t| -squared_distance(images.row(i), texts.row(t))))
        .collect();
    ScoreMatrix::new(images.ids.clone(), texts.ids.clone(), data)
}

/// Phrase- and image-retrieval reports over the vocabulary phrases.
#[derive(Clone, Debug)]
pub struct RetrievalEval {
    pub phrase: MetricReport,
    pub image: MetricReport,
}

fn retrieval_reports(scores: &ScoreMatrix, labels: &crate::corpus::LabelMatrix, rows: &[usize]) -> RetrievalEval {
    let per_image: Vec<BTreeSet<usize>> = rows.iter().map(|&r| labels.positives(r).into_iter().collect()).collect();
    let mut per_phrase = vec![BTreeSet::new(); labels.n_phrases];
    for (k, set) in per_image.iter().enumerate() {
        for &p in set {
            per_phrase[p].insert(scores.image_ids[k].clone());
        }
    }
    RetrievalEval {
        phrase: scores.phrase_retrieval(&per_image),
        image: scores.image_retrieval(&per_phrase),
    }
}

/// Retrieval quality of `model` on the corpus images at `idx`.
pub fn evaluate_retrieval<T: Scalar>(
    model: &MetricModel<T>,
    corpus: &Corpus,
    vocab: &Vocabulary,
    idx: &[usize],
) -> Result<RetrievalEval> {
    let sub = corpus.subset(idx);
    let (labels, _) = build_label_matrix(&sub, vocab)?;
    let images = model.embed_corpus(&sub)?;
    let texts = model.embed_texts(vocab.phrases())?;
    let scores = distance_scores(&images, &texts)?;
    let rows: Vec<usize> = (0..sub.len()).collect();
    Ok(retrieval_reports(&scores, &labels, &rows))
}

/// Text pool and positive pairs over `train_idx` (local image positions).
fn training_pairs(corpus: &Corpus, vocab: &Vocabulary, train_idx: &[usize], mode: TextMode) -> Result<(Vec<String>, PairSet)> {
    match mode {
        TextMode::Phrase => {
            let (labels, _) = build_label_matrix(corpus, vocab)?;
            let pairs = train_idx
                .iter()
                .enumerate()
                .flat_map(|(k, &r)| labels.positives(r).into_iter().map(move |p| (k, p)));
            let set = PairSet::new(train_idx.len(), vocab.len(), pairs.collect::<Vec<_>>());
            Ok((vocab.phrases().to_vec(), set))
        }
        TextMode::Description => {
            let mut pool: Vec<String> = Vec::new();
            let mut index: BTreeMap<String, usize> = BTreeMap::new();
            let mut pairs = Vec::new();
            for (k, &r) in train_idx.iter().enumerate() {
                for d in corpus.descriptions_at(r) {
                    let text = d.canonical();
                    let t = *index.entry(text.clone()).or_insert_with(|| {
                        pool.push(text);
                        pool.len() - 1
                    });
                    pairs.push((k, t));
                }
            }
            let set = PairSet::new(train_idx.len(), pool.len(), pairs);
            Ok((pool, set))
        }
    }
}

/// Adam on `mean(L_p + L_i)` with one sampled negative image and text per
/// positive pair. Validation phrase- and image-retrieval MAP are computed
/// after every epoch; the kept weights maximize their sum.
pub fn train_metric<T: Scalar>(
    corpus: &Corpus,
    vocab: &Vocabulary,
    config: MetricConfig,
    contextual: Option<Arc<dyn ContextualEncoder>>,
) -> Result<TrainOutcome<MetricModel<T>>> {
    let train_idx = corpus.split_indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Empty("no training images".into()));
    }
    let mut val_idx = corpus.split_indices(Split::Val);
    if val_idx.is_empty() {
        val_idx = train_idx.clone();
    }
    let (pool, set) = training_pairs(corpus, vocab, &train_idx, config.mode)?;
    let pairs = set.pairs();
    if pairs.is_empty() {
        return Err(Error::Empty("no positive (image, text) pairs".into()));
    }
    let (labels, _) = build_label_matrix(corpus, vocab)?;
    let cache = ImageCache::<T>::new(corpus, &config.input)?;
    let mut model = MetricModel::<T>::new(config.clone(), vocab.words().to_vec(), contextual)?;
    let mut store = std::mem::take(&mut model.store);
    for prefix in &config.freeze {
        store.set_trainable(prefix, false);
    }
    let mut opt = Adam::new(config.optimizer.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7819);
    let val_ids: Vec<String> = val_idx.iter().map(|&i| corpus.images()[i].id.clone()).collect();

    let evaluate = |model: &MetricModel<T>, store: &ParamStore<T>| -> Result<(f64, f64)> {
        let images = EmbeddingStore::new(Modality::Image, val_ids.clone(), model.dim(), model.embed_images_with(store, &cache, &val_idx))?;
        let texts = EmbeddingStore::new(Modality::Text, vocab.phrases().to_vec(), model.dim(), model.embed_texts_with(store, vocab.phrases())?)?;
        let r = retrieval_reports(&distance_scores(&images, &texts)?, &labels, &val_idx);
        Ok((r.phrase.map, r.image.map))
    };

    let (p0, i0) = evaluate(&model, &store)?;
    let (mut best_p, mut best_i, mut best_sum) = (p0, i0, p0 + i0);
    let mut best_store = store.clone();
    let mut best_epoch = 0;
    let mut since = 0;
    let mut history = Vec::new();
    let mut checkpoints = Vec::new();
    let mut stop = StopReason::Completed;
    if let Some(dir) = &config.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let pair_ids: Vec<usize> = (0..pairs.len()).collect();

    'epochs: for epoch in 1..=config.epochs {
        let mut loss_sum = 0.0;
        let mut batches = 0;
        let mut skipped = 0;
        for batch in minibatches(&pair_ids, config.batch_size, &mut rng) {
            let positives: Vec<(usize, usize)> = batch.iter().map(|&b| pairs[b]).collect();
            let (triplets, s) = sample_triplets(&positives, &set, &mut rng);
            skipped += s;
            if triplets.is_empty() {
                continue;
            }
            let mut img_slot: BTreeMap<usize, usize> = BTreeMap::new();
            let mut txt_slot: BTreeMap<usize, usize> = BTreeMap::new();
            for t in &triplets {
                for i in [t.anchor, t.negative_image] {
                    let n = img_slot.len();
                    img_slot.entry(i).or_insert(n);
                }
                for x in [t.positive, t.negative_text] {
                    let n = txt_slot.len();
                    txt_slot.entry(x).or_insert(n);
                }
            }
            let mut img_order = vec![0; img_slot.len()];
            for (&i, &s) in &img_slot {
                img_order[s] = train_idx[i];
            }
            let mut txt_order = vec![""; txt_slot.len()];
            for (&x, &s) in &txt_slot {
                txt_order[s] = pool[x].as_str();
            }
            let tape = Tape::new();
            let xv = tape.constant(cache.batch(&img_order, config.hflip, &mut rng));
            let ie = model.image_forward(&tape, &store, xv);
            let te = model.text_forward(&tape, &store, &txt_order)?;
            let pick_i = |f: fn(&Triplet) -> usize| triplets.iter().map(|t| img_slot[&f(t)]).collect::<Vec<_>>();
            let pick_t = |f: fn(&Triplet) -> usize| triplets.iter().map(|t| txt_slot[&f(t)]).collect::<Vec<_>>();
            let a = tape.select_rows(ie, pick_i(|t| t.anchor));
            let an = tape.select_rows(ie, pick_i(|t| t.negative_image));
            let p = tape.select_rows(te, pick_t(|t| t.positive));
            let pn = tape.select_rows(te, pick_t(|t| t.negative_text));
            let loss = triplet_loss(&tape, a, p, an, pn);
            let lv = tape.value(loss).data()[0].as_f64();
            if !lv.is_finite() {
                log::error!("loss diverged at epoch {epoch}; keeping epoch {best_epoch}");
                stop = StopReason::Diverged { epoch };
                break 'epochs;
            }
            let grads = tape.backward(loss).param_grads();
            opt.step(&mut store, &grads);
            if !store.all_finite() {
                stop = StopReason::Diverged { epoch };
                break 'epochs;
            }
            loss_sum += lv;
            batches += 1;
        }
        if skipped > 0 {
            log::warn!("epoch {epoch}: {skipped} positives had no valid negative");
        }
        let (pm, im) = evaluate(&model, &store)?;
        let train_loss = loss_sum / batches.max(1) as f64;
        history.push(EpochStats {
            epoch,
            train_loss,
            val: vec![("phrase_map".into(), pm), ("image_map".into(), im)],
        });
        log::info!("epoch {epoch}: loss {train_loss:.4} val phrase MAP {pm:.4} image MAP {im:.4}");
        let improved = match config.stop_rule {
            StopRule::NeitherImproves => pm > best_p || im > best_i,
            StopRule::SumImproves => pm + im > best_sum,
        };
        best_p = best_p.max(pm);
        best_i = best_i.max(im);
        if pm + im > best_sum {
            best_sum = pm + im;
            best_store = store.clone();
            best_epoch = epoch;
        }
        since = if improved { 0 } else { since + 1 };
        if let Some(dir) = &config.checkpoint_dir {
            model.store = store.clone();
            let path = dir.join(format!("metric_epoch{epoch:03}.ckpt"));
            model.save(&path)?;
            checkpoints.push(path);
        }
        if config.patience.is_some_and(|p| since >= p) {
            stop = StopReason::EarlyStopped { epoch };
            break;
        }
    }
    model.store = best_store;
    if let Some(dir) = &config.checkpoint_dir {
        let path = dir.join("metric_best.ckpt");
        model.save(&path)?;
        checkpoints.push(path);
    }
    Ok(TrainOutcome {
        model,
        history,
        stop,
        best_epoch,
        checkpoints,
    })
}

/// Scores probe queries against precomputed image embeddings by negated
/// squared distance.
pub struct MetricScorer<'a, T> {
    pub model: &'a MetricModel<T>,
    pub images: EmbeddingStore,
    pub name: String,
}

impl<T: Scalar> DescriptionScorer for MetricScorer<'_, T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, query: &str, image_ids: &[String]) -> Result<Vec<f64>> {
        let q = self.model.embed_text(query)?;
        image_ids
            .iter()
            .map(|id| {
                self.images
                    .get(id)
                    .map(|e| -squared_distance(&q, e))
                    .ok_or_else(|| Error::UnknownId(id.clone()))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests;

//! Multi-label phrase classifier over pooled backbone features: scoring,
//! sub-sequence phrase scores, retrieval and top-phrase descriptions.

mod scores;

pub use scores::{
    bce_loss, describe_top5, describe_top_k, score_description, score_phrase, Aggregation, PhraseScore, ScoreMatrix,
};

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_label_matrix, Corpus, Split, Vocabulary};
use crate::encoders::{stack, Backbone, BackboneConfig, ImageEncoder, ImageInput};
use crate::metrics::MetricReport;
use crate::nn::checkpoint::{self, CheckpointManifest};
use crate::nn::{Adam, AdamConfig, BatchNorm, Linear, ParamStore, Tape, Tensor, Var};
use crate::training::{minibatches, EpochStats, ImageCache, StopReason, TrainOutcome};
use crate::{Error, Result, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub backbone: BackboneConfig,
    pub layer_spec: Vec<usize>,
    pub hidden: usize,
    pub input: ImageInput,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub hflip: bool,
    pub seed: u64,
    /// Stop after this many epochs without validation improvement.
    #[serde(default)]
    pub patience: Option<usize>,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Parameter-name prefixes excluded from training (`""` freezes all).
    #[serde(default)]
    pub freeze: Vec<String>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            backbone: BackboneConfig::standard(),
            layer_spec: vec![2, 4],
            hidden: 512,
            input: ImageInput::default(),
            epochs: 75,
            batch_size: 32,
            optimizer: AdamConfig::with_lr(1e-4),
            hflip: true,
            seed: 0,
            patience: None,
            checkpoint_dir: None,
            freeze: Vec::new(),
        }
    }
}

/// Backbone features → affine(hidden) → batch norm → ReLU → affine(|phrases|)
/// → logistic.
pub struct PhraseClassifier<T> {
    pub config: ClassifierConfig,
    pub encoder: ImageEncoder,
    hidden: Linear,
    bn: BatchNorm,
    out: Linear,
    pub phrases: Vec<String>,
    pub store: ParamStore<T>,
}

impl<T: Scalar> PhraseClassifier<T> {
    pub fn new(config: ClassifierConfig, phrases: Vec<String>) -> Result<Self> {
        if phrases.is_empty() {
            return Err(Error::Config("classifier needs at least one phrase".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, "backbone", "encoder", config.backbone.clone(), &mut rng);
        let encoder = ImageEncoder::new(bb, config.layer_spec.clone())?;
        let hidden = Linear::new(&mut store, "head.hidden", "head", encoder.feature_dim(), config.hidden, &mut rng);
        let bn = BatchNorm::new(&mut store, "head.bn", "head", config.hidden);
        let out = Linear::new(&mut store, "head.out", "head", config.hidden, phrases.len(), &mut rng);
        Ok(PhraseClassifier {
            config,
            encoder,
            hidden,
            bn,
            out,
            phrases,
            store,
        })
    }

    pub fn num_phrases(&self) -> usize {
        self.phrases.len()
    }

    fn head(&self, tape: &Tape<T>, store: &mut ParamStore<T>, x: Var, train: bool) -> Var {
        let f = self.encoder.features(tape, store, x);
        let h = self.hidden.forward(tape, store, f);
        let h = self.bn.forward(tape, store, h, train);
        let h = tape.relu(h);
        self.out.forward(tape, store, h)
    }

    fn logits_eval(&self, tape: &Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let f = self.encoder.features(tape, store, x);
        let h = self.hidden.forward(tape, store, f);
        let h = self.bn.forward_eval(tape, store, h);
        let h = tape.relu(h);
        self.out.forward(tape, store, h)
    }

    /// Training-mode logits; batch-norm running statistics are updated.
    pub fn logits_train(&self, tape: &Tape<T>, store: &mut ParamStore<T>, x: Var) -> Var {
        self.head(tape, store, x, true)
    }

    fn probs_with(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let l = self.logits_eval(&tape, store, xv);
        tape.value(l).map(crate::nn::tape::sigmoid)
    }

    /// Phrase probabilities `[N, |phrases|]` for `[N,3,S,S]` inputs.
    pub fn scores(&self, x: &Tensor<T>) -> Tensor<T> {
        self.probs_with(&self.store, x)
    }

    fn score_cached(&self, store: &ParamStore<T>, cache: &ImageCache<T>, idx: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(idx.len() * self.num_phrases());
        for chunk in idx.chunks(32) {
            let items: Vec<Tensor<T>> = chunk.iter().map(|&i| cache.get(i).clone()).collect();
            out.extend(self.probs_with(store, &stack(&items)).data().iter().map(|v| v.as_f64()));
        }
        out
    }

    /// Scores every corpus image.
    pub fn score_corpus(&self, corpus: &Corpus) -> Result<ScoreMatrix> {
        let cache = ImageCache::new(corpus, &self.config.input)?;
        let idx: Vec<usize> = (0..corpus.len()).collect();
        let data = self.score_cached(&self.store, &cache, &idx);
        ScoreMatrix::new(
            corpus.images().iter().map(|i| i.id.clone()).collect(),
            self.phrases.clone(),
            data,
        )
    }

    fn manifest(&self) -> CheckpointManifest {
        CheckpointManifest {
            kind: "classifier".into(),
            encoder_kind: None,
            dims: [
                ("hidden".to_string(), self.config.hidden),
                ("phrases".to_string(), self.num_phrases()),
                ("feature".to_string(), self.encoder.feature_dim()),
            ]
            .into_iter()
            .collect(),
            layer_spec: self.encoder.layer_spec.clone(),
            seed: self.config.seed,
            extra: serde_json::json!({ "config": self.config, "phrases": self.phrases }),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.manifest(), &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (m, store) = checkpoint::load::<T>(path)?;
        if m.kind != "classifier" {
            return Err(Error::Checkpoint(format!("expected a classifier checkpoint, found {}", m.kind)));
        }
        let config: ClassifierConfig = serde_json::from_value(m.extra["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let phrases: Vec<String> = serde_json::from_value(m.extra["phrases"].clone())
            .map_err(|e| Error::Checkpoint(format!("phrases: {e}")))?;
        let mut model = Self::new(config, phrases)?;
        model.store.load_from(&store)?;
        Ok(model)
    }
}

/// Per-image positive phrase sets for the given corpus positions.
fn relevant_phrases(labels: &crate::corpus::LabelMatrix, idx: &[usize]) -> Vec<BTreeSet<usize>> {
    idx.iter().map(|&r| labels.positives(r).into_iter().collect()).collect()
}

/// Phrase-retrieval report of `model` on the corpus images at `idx`.
pub fn evaluate_phrase_retrieval<T: Scalar>(
    model: &PhraseClassifier<T>,
    corpus: &Corpus,
    vocab: &Vocabulary,
    idx: &[usize],
) -> Result<MetricReport> {
    let sub = corpus.subset(idx);
    let scores = model.score_corpus(&sub)?;
    let (labels, _) = build_label_matrix(&sub, vocab)?;
    let all: Vec<usize> = (0..sub.len()).collect();
    Ok(scores.phrase_retrieval(&relevant_phrases(&labels, &all)))
}

/// Adam on the logistic loss with horizontal-flip augmentation. Keeps the
/// weights with the best validation phrase-retrieval MAP (training images
/// stand in when there is no validation split).
pub fn train_classifier<T: Scalar>(
    corpus: &Corpus,
    vocab: &Vocabulary,
    config: ClassifierConfig,
) -> Result<TrainOutcome<PhraseClassifier<T>>> {
    let (labels, coverage) = build_label_matrix(corpus, vocab)?;
    if !coverage.empty_rows.is_empty() {
        log::warn!("{} images have no in-vocabulary phrase", coverage.empty_rows.len());
    }
    let train_idx = corpus.split_indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Empty("no training images".into()));
    }
    let mut val_idx = corpus.split_indices(Split::Val);
    if val_idx.is_empty() {
        val_idx = train_idx.clone();
    }
    let val_relevant = relevant_phrases(&labels, &val_idx);
    let cache = ImageCache::<T>::new(corpus, &config.input)?;
    let mut model = PhraseClassifier::<T>::new(config.clone(), vocab.phrases().to_vec())?;
    let mut store = std::mem::take(&mut model.store);
    for prefix in &config.freeze {
        store.set_trainable(prefix, false);
    }
    let mut opt = Adam::new(config.optimizer.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);

    let evaluate = |model: &PhraseClassifier<T>, store: &ParamStore<T>| -> Result<f64> {
        let data = model.score_cached(store, &cache, &val_idx);
        let ids = val_idx.iter().map(|&i| corpus.images()[i].id.clone()).collect();
        let m = ScoreMatrix::new(ids, model.phrases.clone(), data)?;
        Ok(m.phrase_retrieval(&val_relevant).map)
    };

    let mut best_map = evaluate(&model, &store)?;
    let mut best_store = store.clone();
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut checkpoints = Vec::new();
    let mut stop = StopReason::Completed;
    let mut since_best = 0;
    if let Some(dir) = &config.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    'epochs: for epoch in 1..=config.epochs {
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for batch in minibatches(&train_idx, config.batch_size, &mut rng) {
            let x = cache.batch(&batch, config.hflip, &mut rng);
            let y = labels.to_dense::<T>(&batch);
            let tape = Tape::new();
            let xv = tape.constant(x);
            let logits = model.logits_train(&tape, &mut store, xv);
            let loss = tape.bce_with_logits(logits, &y);
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
        let val_map = evaluate(&model, &store)?;
        history.push(EpochStats {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            val: vec![("phrase_map".into(), val_map)],
        });
        log::info!("epoch {epoch}: loss {:.4} val MAP {:.4}", loss_sum / batches.max(1) as f64, val_map);
        if val_map > best_map {
            best_map = val_map;
            best_store = store.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
        }
        if let Some(dir) = &config.checkpoint_dir {
            model.store = store.clone();
            let p = dir.join(format!("classifier_epoch{epoch:03}.ckpt"));
            model.save(&p)?;
            checkpoints.push(p);
        }
        if config.patience.is_some_and(|p| since_best >= p) {
            stop = StopReason::EarlyStopped { epoch };
            break;
        }
    }
    model.store = best_store;
    if let Some(dir) = &config.checkpoint_dir {
        let p = dir.join("classifier_best.ckpt");
        model.save(&p)?;
        checkpoints.push(p);
    }
    Ok(TrainOutcome {
        model,
        history,
        stop,
        best_epoch,
        checkpoints,
    })
}

#[cfg(test)]
mod tests;

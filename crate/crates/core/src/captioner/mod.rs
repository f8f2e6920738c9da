//! Attention-based recurrent captioner over the backbone's last-stage
//! feature grid, with beam-search decoding.

mod beam;

pub use beam::{beam_search, enumerate_sequences, greedy_search, Hypothesis, SearchConfig, StepModel};

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Description, Split};
use crate::encoders::{stack, Backbone, BackboneConfig, ImageInput, WordVectors};
use crate::metrics::{tokenize, CaptionReport, CaptionScorer};
use crate::nn::checkpoint::{self, CheckpointManifest};
use crate::nn::{Adam, AdamConfig, Embedding, Linear, LstmCell, ParamStore, Tape, Tensor, Var};
use crate::training::{minibatches, EpochStats, ImageCache, StopReason, TrainOutcome};
use crate::{Error, Result, Scalar};

pub const PAD: &str = "<pad>";
pub const START: &str = "<start>";
pub const END: &str = "<end>";
pub const UNK: &str = "<unk>";

/// Caption tokens of a description: lowercase words with a `,` token
/// between phrases.
pub fn caption_tokens(d: &Description) -> Vec<String> {
    let mut out = Vec::new();
    for (i, p) in d.phrases.iter().enumerate() {
        if i > 0 {
            out.push(",".to_string());
        }
        out.extend(p.tokens.iter().cloned());
    }
    out
}

/// Specials (`<pad>`, `<start>`, `<end>`, `<unk>` at ids 0..4) followed by
/// the frequent caption tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionVocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl CaptionVocab {
    pub const PAD: usize = 0;
    pub const START: usize = 1;
    pub const END: usize = 2;
    pub const UNK: usize = 3;

    /// Tokens seen at least `min_count` times, by descending count then
    /// ascending text.
    pub fn build<'a>(descriptions: impl IntoIterator<Item = &'a Description>, min_count: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for d in descriptions {
            for t in caption_tokens(d) {
                *counts.entry(t).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count.max(1)).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut words: Vec<String> = [PAD, START, END, UNK].iter().map(|s| s.to_string()).collect();
        words.extend(kept.into_iter().map(|(w, _)| w));
        Self::from_words(words)
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        CaptionVocab { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(Self::UNK)
    }

    pub fn encode(&self, d: &Description) -> Vec<usize> {
        caption_tokens(d).iter().map(|t| self.id(t)).collect()
    }

    /// Joins tokens with spaces, attaching `,` to the preceding word.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut s = String::new();
        for &i in ids {
            let w = self.words.get(i).map(String::as_str).unwrap_or(UNK);
            if w != "," && !s.is_empty() {
                s.push(' ');
            }
            s.push_str(w);
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptionerConfig {
    pub backbone: BackboneConfig,
    pub input: ImageInput,
    pub embed_dim: usize,
    pub hidden: usize,
    pub attention_dim: usize,
    pub word_min_count: usize,
    #[serde(default)]
    pub word_vectors: Option<PathBuf>,
    pub epochs: usize,
    pub batch_size: usize,
    pub encoder_lr: f64,
    pub decoder_lr: f64,
    /// Longest training caption in tokens; longer ones are truncated.
    pub max_train_len: usize,
    pub beam: usize,
    pub max_len: usize,
    pub hflip: bool,
    pub seed: u64,
    #[serde(default)]
    pub patience: Option<usize>,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    #[serde(default)]
    pub freeze: Vec<String>,
}

impl Default for CaptionerConfig {
    fn default() -> Self {
        CaptionerConfig {
            backbone: BackboneConfig::standard(),
            input: ImageInput::default(),
            embed_dim: 300,
            hidden: 512,
            attention_dim: 512,
            word_min_count: 5,
            word_vectors: None,
            epochs: 30,
            batch_size: 32,
            encoder_lr: 1e-4,
            decoder_lr: 4e-4,
            max_train_len: 40,
            beam: 5,
            max_len: 30,
            hflip: true,
            seed: 0,
            patience: Some(5),
            checkpoint_dir: None,
            freeze: Vec::new(),
        }
    }
}

struct Decoder {
    embed: Embedding,
    init_h: Linear,
    init_c: Linear,
    att_feat: Linear,
    att_hidden: Linear,
    att_score: Linear,
    gate: Linear,
    lstm: LstmCell,
    out: Linear,
}

/// Per-image encoder output reused across decoding steps.
#[derive(Clone)]
pub struct EncodedImage<T> {
    /// `[L, C]` feature grid.
    pub grid: Tensor<T>,
    /// `[L, attention_dim]` projected grid.
    pub keys: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct DecoderState<T> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
    /// Attention weights of the last step (empty before the first step).
    pub alpha: Vec<T>,
}

pub struct Captioner<T> {
    pub config: CaptionerConfig,
    pub vocab: CaptionVocab,
    backbone: Backbone,
    decoder: Decoder,
    pub store: ParamStore<T>,
}

/// One decoding step on the tape for `B` sequences.
struct StepVars {
    h: Var,
    c: Var,
    logits: Var,
    alpha: Var,
}

impl<T: Scalar> Captioner<T> {
    pub fn new(config: CaptionerConfig, vocab: CaptionVocab) -> Result<Self> {
        if vocab.len() <= 4 {
            return Err(Error::Config("caption vocabulary has no words besides the specials".into()));
        }
        if config.backbone.stages.is_empty() {
            return Err(Error::Config("captioner backbone needs at least one stage".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, "backbone", "encoder", config.backbone.clone(), &mut rng);
        let feat = backbone.stage_channels(backbone.num_stages());
        let vectors = config.word_vectors.as_deref().map(WordVectors::load).transpose()?;
        let std = 1.0 / (config.embed_dim as f64).sqrt();
        let (table, _) = WordVectors::table::<T, _>(vectors.as_ref(), vocab.words(), config.embed_dim, std, &mut rng);
        let (e, h, a) = (config.embed_dim, config.hidden, config.attention_dim);
        let g = "decoder";
        let out = Linear::new(&mut store, "decoder.out", g, h, vocab.len(), &mut rng);
        // near-uniform initial next-token distribution
        let w = &mut store.get_mut(out.weight).value;
        *w = w.map(|v| v * T::c(0.01));
        let decoder = Decoder {
            embed: Embedding::new(&mut store, "decoder.embed", g, table),
            init_h: Linear::new(&mut store, "decoder.init_h", g, feat, h, &mut rng),
            init_c: Linear::new(&mut store, "decoder.init_c", g, feat, h, &mut rng),
            att_feat: Linear::new(&mut store, "decoder.att_feat", g, feat, a, &mut rng),
            att_hidden: Linear::new(&mut store, "decoder.att_hidden", g, h, a, &mut rng),
            att_score: Linear::new(&mut store, "decoder.att_score", g, a, 1, &mut rng),
            gate: Linear::new(&mut store, "decoder.gate", g, h, feat, &mut rng),
            lstm: LstmCell::new(&mut store, "decoder.lstm", g, e + feat, h, &mut rng),
            out,
        };
        Ok(Captioner {
            config,
            vocab,
            backbone,
            decoder,
            store,
        })
    }

    pub fn search_config(&self, beam: usize, max_len: usize) -> SearchConfig {
        SearchConfig {
            beam,
            max_len,
            start: CaptionVocab::START,
            end: CaptionVocab::END,
            banned: vec![CaptionVocab::PAD, CaptionVocab::START],
        }
    }

    /// Feature grid `[B*L, C]`, cell count `L` and the attention keys.
    fn encode(&self, tape: &Tape<T>, store: &ParamStore<T>, x: Var) -> (Var, usize, Var) {
        let n = self.backbone.num_stages();
        let outs = self.backbone.forward(tape, store, x, n);
        let last = outs[n - 1];
        let s = tape.shape(last);
        let grid = tape.to_grid(last);
        let keys = self.decoder.att_feat.forward(tape, store, grid);
        (grid, s[2] * s[3], keys)
    }

    fn init_state(&self, tape: &Tape<T>, store: &ParamStore<T>, grid: Var, b: usize, l: usize) -> (Var, Var) {
        let mean = tape.segment_mean(grid, (0..b).map(|i| i * l..(i + 1) * l).collect());
        let h = tape.tanh(self.decoder.init_h.forward(tape, store, mean));
        let c = tape.tanh(self.decoder.init_c.forward(tape, store, mean));
        (h, c)
    }

    #[allow(clippy::too_many_arguments)]
    fn step_vars(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        grid: Var,
        keys: Var,
        l: usize,
        h: Var,
        c: Var,
        tokens: Vec<usize>,
    ) -> StepVars {
        let d = &self.decoder;
        let b = tokens.len();
        let q = d.att_hidden.forward(tape, store, h);
        let e = tape.tanh(tape.add(keys, tape.repeat_rows(q, l)));
        let scores = d.att_score.forward(tape, store, e);
        let alpha = tape.softmax_rows(tape.reshape(scores, vec![b, l]));
        let ctx = tape.weighted_rows(alpha, grid);
        let ctx = tape.mul(ctx, tape.sigmoid(d.gate.forward(tape, store, h)));
        let emb = d.embed.lookup(tape, store, tokens);
        let (h, c) = d.lstm.step(tape, store, tape.concat_cols(&[emb, ctx]), h, c);
        let logits = d.out.forward(tape, store, h);
        StepVars { h, c, logits, alpha }
    }

    /// Teacher-forced mean token cross-entropy for `[B,3,S,S]` images and
    /// one caption (token ids without specials) per image.
    pub fn loss(&self, tape: &Tape<T>, store: &ParamStore<T>, x: Var, captions: &[Vec<usize>]) -> Var {
        let b = captions.len();
        let (grid, l, keys) = self.encode(tape, store, x);
        let (mut h, mut c) = self.init_state(tape, store, grid, b, l);
        let steps = captions.iter().map(|s| s.len() + 1).max().unwrap_or(1);
        let mut logits = Vec::with_capacity(steps);
        let mut targets = Vec::with_capacity(steps * b);
        for t in 0..steps {
            let input: Vec<usize> = captions
                .iter()
                .map(|s| match t {
                    0 => CaptionVocab::START,
                    _ if t <= s.len() => s[t - 1],
                    _ => CaptionVocab::PAD,
                })
                .collect();
            let sv = self.step_vars(tape, store, grid, keys, l, h, c, input);
            h = sv.h;
            c = sv.c;
            logits.push(sv.logits);
            targets.extend(captions.iter().map(|s| match t.cmp(&s.len()) {
                std::cmp::Ordering::Less => Some(s[t]),
                std::cmp::Ordering::Equal => Some(CaptionVocab::END),
                std::cmp::Ordering::Greater => None,
            }));
        }
        tape.cross_entropy(tape.concat_rows(&logits), &targets)
    }

    /// Encoder output for one `[3,S,S]` image.
    pub fn encode_image(&self, image: &Tensor<T>) -> EncodedImage<T> {
        let tape = Tape::new();
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        let x = tape.constant(image.clone().reshaped(shape));
        let (grid, _, keys) = self.encode(&tape, &self.store, x);
        EncodedImage {
            grid: (*tape.value(grid)).clone(),
            keys: (*tape.value(keys)).clone(),
        }
    }

    /// Step model for decoding `image`.
    pub fn stepper<'a>(&'a self, image: &'a EncodedImage<T>) -> ImageStepper<'a, T> {
        ImageStepper { model: self, image }
    }

    pub fn decode(&self, image: &Tensor<T>, beam: usize, max_len: usize) -> (String, Hypothesis) {
        let enc = self.encode_image(image);
        let cfg = self.search_config(beam, max_len);
        let hyp = if beam <= 1 {
            greedy_search(&self.stepper(&enc), &cfg)
        } else {
            beam_search(&self.stepper(&enc), &cfg)
        };
        if !hyp.finished {
            log::warn!("no hypothesis reached the end token within {max_len} tokens");
        }
        (self.vocab.decode(&hyp.tokens), hyp)
    }

    fn caption_cached(&self, cache: &ImageCache<T>, idx: &[usize], beam: usize, max_len: usize) -> Vec<String> {
        idx.par_iter().map(|&i| self.decode(cache.get(i), beam, max_len).0).collect()
    }

    /// `(image id, caption)` for every corpus image.
    pub fn caption_corpus(&self, corpus: &Corpus, beam: usize, max_len: usize) -> Result<Vec<(String, String)>> {
        let cache = ImageCache::new(corpus, &self.config.input)?;
        let idx: Vec<usize> = (0..corpus.len()).collect();
        let caps = self.caption_cached(&cache, &idx, beam, max_len);
        Ok(corpus.images().iter().map(|i| i.id.clone()).zip(caps).collect())
    }

    fn manifest(&self) -> CheckpointManifest {
        CheckpointManifest {
            kind: "captioner".into(),
            encoder_kind: None,
            dims: [
                ("hidden".to_string(), self.config.hidden),
                ("attention".to_string(), self.config.attention_dim),
                ("embed".to_string(), self.config.embed_dim),
                ("vocab".to_string(), self.vocab.len()),
            ]
            .into_iter()
            .collect(),
            layer_spec: vec![self.backbone.num_stages()],
            seed: self.config.seed,
            extra: serde_json::json!({ "config": self.config, "words": self.vocab.words() }),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.manifest(), &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (m, store) = checkpoint::load::<T>(path)?;
        if m.kind != "captioner" {
            return Err(Error::Checkpoint(format!("expected a captioner checkpoint, found {}", m.kind)));
        }
        let mut config: CaptionerConfig = serde_json::from_value(m.extra["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let words: Vec<String> = serde_json::from_value(m.extra["words"].clone())
            .map_err(|e| Error::Checkpoint(format!("words: {e}")))?;
        config.word_vectors = None;
        let mut model = Self::new(config, CaptionVocab::from_words(words))?;
        model.store.load_from(&store)?;
        Ok(model)
    }
}

/// Decoding one image: state = LSTM state plus last attention weights.
pub struct ImageStepper<'a, T> {
    model: &'a Captioner<T>,
    image: &'a EncodedImage<T>,
}

impl<T: Scalar> StepModel for ImageStepper<'_, T> {
    type State = Option<DecoderState<T>>;

    fn vocab_size(&self) -> usize {
        self.model.vocab.len()
    }

    fn initial(&self) -> Self::State {
        None
    }

    fn step(&self, state: &Self::State, token: usize) -> (Vec<f64>, Self::State) {
        let m = self.model;
        let tape = Tape::new();
        let grid = tape.constant(self.image.grid.clone());
        let keys = tape.constant(self.image.keys.clone());
        let l = self.image.grid.rows();
        let (h, c) = match state {
            Some(s) => (tape.constant(s.h.clone()), tape.constant(s.c.clone())),
            None => m.init_state(&tape, &m.store, grid, 1, l),
        };
        let sv = m.step_vars(&tape, &m.store, grid, keys, l, h, c, vec![token]);
        let logits = tape.value(sv.logits);
        let row: Vec<f64> = logits.data().iter().map(|v| v.as_f64()).collect();
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        let next = DecoderState {
            h: (*tape.value(sv.h)).clone(),
            c: (*tape.value(sv.c)).clone(),
            alpha: tape.value(sv.alpha).data().to_vec(),
        };
        (row.iter().map(|v| v - lse).collect(), Some(next))
    }
}

fn reference_sets(corpus: &Corpus, idx: &[usize]) -> Vec<Vec<Vec<String>>> {
    idx.iter()
        .map(|&i| corpus.descriptions_at(i).map(|d| tokenize(&d.canonical())).collect())
        .collect()
}

/// Caption metrics of `captions[k]` against the references of image `idx[k]`.
pub fn evaluate_captions(corpus: &Corpus, idx: &[usize], captions: &[String]) -> CaptionReport {
    let scorer = CaptionScorer::new(reference_sets(corpus, idx));
    let cands: Vec<Vec<String>> = captions.iter().map(|c| tokenize(c)).collect();
    scorer.score(&cands)
}

/// Teacher-forced training with Adam (separate encoder and decoder learning
/// rates). Each epoch visits every (image, description) pair once; the kept
/// weights maximize validation BLEU-4 of beam-decoded captions.
pub fn train_captioner<T: Scalar>(corpus: &Corpus, config: CaptionerConfig) -> Result<TrainOutcome<Captioner<T>>> {
    let train_idx = corpus.split_indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Empty("no training images".into()));
    }
    let mut val_idx = corpus.split_indices(Split::Val);
    if val_idx.is_empty() {
        val_idx = train_idx.clone();
    }
    let train_descs: Vec<&Description> = train_idx.iter().flat_map(|&i| corpus.descriptions_at(i)).collect();
    let vocab = CaptionVocab::build(train_descs.iter().copied(), config.word_min_count);
    let mut pairs: Vec<(usize, Vec<usize>)> = Vec::new();
    for &i in &train_idx {
        for d in corpus.descriptions_at(i) {
            let mut ids = vocab.encode(d);
            ids.truncate(config.max_train_len);
            pairs.push((i, ids));
        }
    }
    if pairs.is_empty() {
        return Err(Error::Empty("no training descriptions".into()));
    }
    let cache = ImageCache::<T>::new(corpus, &config.input)?;
    let mut model = Captioner::<T>::new(config.clone(), vocab)?;
    let mut store = std::mem::take(&mut model.store);
    for prefix in &config.freeze {
        store.set_trainable(prefix, false);
    }
    let opt_config = AdamConfig::with_lr(config.decoder_lr)
        .group("encoder", config.encoder_lr)
        .group("decoder", config.decoder_lr);
    let mut opt = Adam::new(opt_config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xca9);
    let scorer = CaptionScorer::new(reference_sets(corpus, &val_idx));

    let evaluate = |model: &mut Captioner<T>, store: &mut ParamStore<T>| -> f64 {
        std::mem::swap(&mut model.store, store);
        let caps = model.caption_cached(&cache, &val_idx, config.beam, config.max_len);
        std::mem::swap(&mut model.store, store);
        let cands: Vec<Vec<String>> = caps.iter().map(|c| tokenize(c)).collect();
        scorer.score(&cands).bleu[3]
    };

    let mut best_bleu = evaluate(&mut model, &mut store);
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
        for batch in minibatches(&pair_ids, config.batch_size, &mut rng) {
            let imgs: Vec<usize> = batch.iter().map(|&b| pairs[b].0).collect();
            let caps: Vec<Vec<usize>> = batch.iter().map(|&b| pairs[b].1.clone()).collect();
            let tape = Tape::new();
            let x = tape.constant(cache.batch(&imgs, config.hflip, &mut rng));
            let loss = model.loss(&tape, &store, x, &caps);
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
        let bleu4 = evaluate(&mut model, &mut store);
        let train_loss = loss_sum / batches.max(1) as f64;
        history.push(EpochStats {
            epoch,
            train_loss,
            val: vec![("bleu4".into(), bleu4)],
        });
        log::info!("epoch {epoch}: loss {train_loss:.4} val BLEU-4 {bleu4:.4}");
        if bleu4 > best_bleu {
            best_bleu = bleu4;
            best_store = store.clone();
            best_epoch = epoch;
            since = 0;
        } else {
            since += 1;
        }
        if let Some(dir) = &config.checkpoint_dir {
            model.store = store.clone();
            let path = dir.join(format!("captioner_epoch{epoch:03}.ckpt"));
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
        let path = dir.join("captioner_best.ckpt");
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

/// `image_id \t caption` lines.
pub fn captions_tsv(captions: &[(String, String)]) -> String {
    captions.iter().map(|(id, c)| format!("{id}\t{c}\n")).collect()
}

/// Batched teacher-forced loss over corpus positions, without gradients.
pub fn teacher_forced_loss<T: Scalar>(model: &Captioner<T>, corpus: &Corpus, idx: &[usize]) -> Result<f64> {
    let cache = ImageCache::<T>::new(corpus, &model.config.input)?;
    let mut total = 0.0;
    let mut n = 0usize;
    for &i in idx {
        for d in corpus.descriptions_at(i) {
            let tape = Tape::new();
            let x = tape.constant(stack(&[cache.get(i).clone()]));
            let ids = model.vocab.encode(d);
            let loss = model.loss(&tape, &model.store, x, &[ids]);
            total += tape.value(loss).data()[0].as_f64();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("no descriptions to score".into()));
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests;

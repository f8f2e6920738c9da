use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::split_description;
use crate::nn::{Embedding, LstmCell, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextEncoderKind {
    MeanPool,
    Recurrent,
    Contextual,
}

impl TextEncoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TextEncoderKind::MeanPool => "mean_pool",
            TextEncoderKind::Recurrent => "recurrent",
            TextEncoderKind::Contextual => "contextual",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mean_pool" | "meanpool" => Some(TextEncoderKind::MeanPool),
            "recurrent" | "lstm" => Some(TextEncoderKind::Recurrent),
            "contextual" => Some(TextEncoderKind::Contextual),
            _ => None,
        }
    }
}

/// Normalized word tokens of a phrase or description (delimiters dropped).
pub fn text_tokens(text: &str) -> Vec<String> {
    split_description(text).into_iter().flat_map(|p| p.tokens).collect()
}

/// Word vectors in the text format `word v1 ... vd`, one word per line.
#[derive(Clone, Debug, Default)]
pub struct WordVectors {
    pub dim: usize,
    map: HashMap<String, Vec<f64>>,
}

impl WordVectors {
    pub fn from_reader<R: BufRead>(r: R) -> Result<Self> {
        let mut wv = WordVectors::default();
        for (n, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<word vectors>", e))?;
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let v: std::result::Result<Vec<f64>, _> = parts.map(str::parse).collect();
            let v = v.map_err(|_| Error::MalformedRecord {
                path: "<word vectors>".into(),
                line: n + 1,
                reason: "non-numeric component".into(),
            })?;
            // fastText headers: "<count> <dim>"
            if n == 0 && v.len() == 1 && word.parse::<usize>().is_ok() {
                continue;
            }
            if wv.dim == 0 {
                wv.dim = v.len();
            } else if v.len() != wv.dim {
                return Err(Error::MalformedRecord {
                    path: "<word vectors>".into(),
                    line: n + 1,
                    reason: format!("expected {} components, got {}", wv.dim, v.len()),
                });
            }
            wv.map.insert(word.to_string(), v);
        }
        Ok(wv)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(std::io::BufReader::new(f))
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.map.get(word).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Table for `words`: pretrained rows where present, otherwise seeded
    /// normal rows with standard deviation `std`. Returns the hit count.
    pub fn table<T: Scalar, R: Rng + ?Sized>(
        vectors: Option<&WordVectors>,
        words: &[String],
        dim: usize,
        std: f64,
        rng: &mut R,
    ) -> (Tensor<T>, usize) {
        let normal = Normal::new(0.0, std).expect("valid std");
        let mut data = Vec::with_capacity(words.len() * dim);
        let mut hits = 0;
        for w in words {
            match vectors.and_then(|v| v.get(w)).filter(|v| v.len() == dim) {
                Some(v) => {
                    hits += 1;
                    data.extend(v.iter().map(|&x| T::c(x)));
                }
                None => data.extend((0..dim).map(|_| T::c(normal.sample(rng)))),
            }
        }
        (Tensor::new(vec![words.len(), dim], data), hits)
    }
}

/// Word → row mapping; unknown words are skipped.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WordIndex {
    words: Vec<String>,
    map: HashMap<String, usize>,
}

impl WordIndex {
    pub fn new(words: &[String]) -> Self {
        WordIndex {
            words: words.to_vec(),
            map: words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect(),
        }
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

    pub fn ids(&self, text: &str) -> Vec<usize> {
        let ids: Vec<usize> = text_tokens(text)
            .iter()
            .filter_map(|t| self.map.get(t).copied())
            .collect();
        if ids.is_empty() {
            log::warn!("no known token in {text:?}; encoding as zeros");
        }
        ids
    }
}

/// Mean of per-token embeddings.
#[derive(Clone, Debug)]
pub struct MeanPoolEncoder {
    pub embedding: Embedding,
}

impl MeanPoolEncoder {
    pub fn out_dim(&self) -> usize {
        self.embedding.dim
    }

    /// `[B, dim]`; sequences without known tokens give zero rows.
    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>, seqs: &[Vec<usize>]) -> Var {
        let mut ids = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        for s in seqs {
            let start = ids.len();
            ids.extend_from_slice(s);
            segments.push(start..ids.len());
        }
        if ids.is_empty() {
            return tape.constant(Tensor::zeros(&[seqs.len(), self.embedding.dim]));
        }
        let rows = self.embedding.lookup(tape, store, ids);
        tape.segment_mean(rows, segments)
    }
}

/// Single-layer bidirectional LSTM; the output concatenates the final
/// forward state and the final backward state.
#[derive(Clone, Debug)]
pub struct RecurrentEncoder {
    pub embedding: Embedding,
    pub forward_cell: LstmCell,
    pub backward_cell: LstmCell,
}

impl RecurrentEncoder {
    pub fn hidden(&self) -> usize {
        self.forward_cell.hidden
    }

    pub fn out_dim(&self) -> usize {
        2 * self.hidden()
    }

    fn run<T: Scalar>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        cell: &LstmCell,
        seqs: &[Vec<usize>],
        reverse: bool,
    ) -> Var {
        let b = seqs.len();
        let hd = cell.hidden;
        let max_len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut h = tape.constant(Tensor::zeros(&[b, hd]));
        let mut c = h;
        for t in 0..max_len {
            let ids: Vec<usize> = seqs
                .iter()
                .map(|s| match s.len() {
                    l if t < l => s[if reverse { l - 1 - t } else { t }],
                    _ => 0,
                })
                .collect();
            let x = self.embedding.lookup(tape, store, ids);
            let (h_new, c_new) = cell.step(tape, store, x, h, c);
            if seqs.iter().all(|s| t < s.len()) {
                h = h_new;
                c = c_new;
            } else {
                let m: Vec<T> = seqs.iter().map(|s| if t < s.len() { T::one() } else { T::zero() }).collect();
                let keep: Vec<T> = m.iter().map(|&v| T::one() - v).collect();
                let m = tape.constant(Tensor::new(vec![b, 1], m));
                let keep = tape.constant(Tensor::new(vec![b, 1], keep));
                h = tape.add(tape.mul_col(h_new, m), tape.mul_col(h, keep));
                c = tape.add(tape.mul_col(c_new, m), tape.mul_col(c, keep));
            }
        }
        h
    }

    /// `[B, 2·hidden]`.
    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>, seqs: &[Vec<usize>]) -> Var {
        let f = self.run(tape, store, &self.forward_cell, seqs, false);
        let r = self.run(tape, store, &self.backward_cell, seqs, true);
        tape.concat_cols(&[f, r])
    }
}

/// A frozen pretrained encoder producing one hidden state per token of its
/// own tokenization.
pub trait ContextualEncoder: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn hidden_states(&self, text: &str) -> Result<Vec<Vec<f64>>>;
}

/// Mean over token positions of the final hidden states.
pub fn encode_text_contextual(enc: &dyn ContextualEncoder, text: &str) -> Result<Vec<f64>> {
    let states = enc.hidden_states(text)?;
    let mut out = vec![0.0; enc.dim()];
    if states.is_empty() {
        log::warn!("contextual encoder produced no states for {text:?}");
        return Ok(out);
    }
    for s in &states {
        if s.len() != out.len() {
            return Err(Error::Shape(format!("hidden state of width {} != {}", s.len(), out.len())));
        }
        for (o, v) in out.iter_mut().zip(s) {
            *o += v;
        }
    }
    let n = states.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// Context-free stand-in backed by a word-vector table: each known token's
/// vector is its hidden state.
pub struct StaticVectorEncoder {
    vectors: WordVectors,
}

impl StaticVectorEncoder {
    pub fn new(vectors: WordVectors) -> Self {
        StaticVectorEncoder { vectors }
    }
}

impl ContextualEncoder for StaticVectorEncoder {
    fn name(&self) -> &str {
        "static_vectors"
    }

    fn dim(&self) -> usize {
        self.vectors.dim
    }

    fn hidden_states(&self, text: &str) -> Result<Vec<Vec<f64>>> {
        Ok(text_tokens(text)
            .iter()
            .filter_map(|t| self.vectors.get(t).map(<[f64]>::to_vec))
            .collect())
    }
}

enum TextModel {
    MeanPool(MeanPoolEncoder),
    Recurrent(RecurrentEncoder),
    Contextual(Arc<dyn ContextualEncoder>),
}

/// Any of the three language encoders with its tokenizer.
pub struct TextEncoder {
    model: TextModel,
    pub index: WordIndex,
}

impl std::fmt::Debug for TextEncoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "TextEncoder({}, {})", self.kind().as_str(), self.out_dim())
    }
}

impl TextEncoder {
    pub fn mean_pool<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, group: &str, words: &[String], table: Tensor<T>) -> Self {
        assert_eq!(table.rows(), words.len());
        TextEncoder {
            model: TextModel::MeanPool(MeanPoolEncoder {
                embedding: Embedding::new(store, &format!("{prefix}.embed"), group, table),
            }),
            index: WordIndex::new(words),
        }
    }

    pub fn recurrent<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        group: &str,
        words: &[String],
        table: Tensor<T>,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let dim = table.cols();
        TextEncoder {
            model: TextModel::Recurrent(RecurrentEncoder {
                embedding: Embedding::new(store, &format!("{prefix}.embed"), group, table),
                forward_cell: LstmCell::new(store, &format!("{prefix}.lstm_fwd"), group, dim, hidden, rng),
                backward_cell: LstmCell::new(store, &format!("{prefix}.lstm_bwd"), group, dim, hidden, rng),
            }),
            index: WordIndex::new(words),
        }
    }

    pub fn contextual(encoder: Option<Arc<dyn ContextualEncoder>>) -> Result<Self> {
        let enc = encoder.ok_or_else(|| {
            Error::Config(
                "no pretrained contextual encoder is available; use the mean_pool or recurrent encoder instead".into(),
            )
        })?;
        Ok(TextEncoder {
            model: TextModel::Contextual(enc),
            index: WordIndex::default(),
        })
    }

    pub fn kind(&self) -> TextEncoderKind {
        match self.model {
            TextModel::MeanPool(_) => TextEncoderKind::MeanPool,
            TextModel::Recurrent(_) => TextEncoderKind::Recurrent,
            TextModel::Contextual(_) => TextEncoderKind::Contextual,
        }
    }

    pub fn out_dim(&self) -> usize {
        match &self.model {
            TextModel::MeanPool(m) => m.out_dim(),
            TextModel::Recurrent(r) => r.out_dim(),
            TextModel::Contextual(c) => c.dim(),
        }
    }

    /// Whether this encoder has parameters in the store.
    pub fn is_trainable(&self) -> bool {
        !matches!(self.model, TextModel::Contextual(_))
    }

    /// `[B, out_dim]` for the given texts.
    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>, texts: &[&str]) -> Result<Var> {
        match &self.model {
            TextModel::MeanPool(m) => {
                let seqs: Vec<Vec<usize>> = texts.iter().map(|t| self.index.ids(t)).collect();
                Ok(m.forward(tape, store, &seqs))
            }
            TextModel::Recurrent(r) => {
                let seqs: Vec<Vec<usize>> = texts.iter().map(|t| self.index.ids(t)).collect();
                Ok(r.forward(tape, store, &seqs))
            }
            TextModel::Contextual(c) => {
                let mut data = Vec::with_capacity(texts.len() * c.dim());
                for t in texts {
                    data.extend(encode_text_contextual(c.as_ref(), t)?.into_iter().map(T::c));
                }
                Ok(tape.constant(Tensor::new(vec![texts.len(), c.dim()], data)))
            }
        }
    }

    /// Inference without gradients.
    pub fn encode<T: Scalar>(&self, store: &ParamStore<T>, texts: &[&str]) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let v = self.forward(&tape, store, texts)?;
        Ok((*tape.value(v)).clone())
    }
}

//! Shared training plumbing: cached input tensors, stop reasons, histories.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::encoders::{hflip_chw, stack, ImageInput};
use crate::nn::Tensor;
use crate::{Result, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    EarlyStopped { epoch: usize },
    /// Loss became non-finite; the returned model is the best one seen so far.
    Diverged { epoch: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation metrics monitored for model selection, by name.
    pub val: Vec<(String, f64)>,
}

/// A trained model together with how training went.
#[derive(Debug)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub history: Vec<EpochStats>,
    pub stop: StopReason,
    /// Epoch whose weights were kept (0 when no epoch improved).
    pub best_epoch: usize,
    pub checkpoints: Vec<PathBuf>,
}

/// Every corpus image resized and normalized once, as `[3,S,S]` tensors.
pub struct ImageCache<T> {
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ImageCache<T> {
    pub fn new(corpus: &Corpus, input: &ImageInput) -> Result<Self> {
        use rayon::prelude::*;
        let tensors = corpus
            .images()
            .par_iter()
            .map(|img| img.load_rgb().map(|rgb| input.tensor::<T>(&rgb)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ImageCache { tensors })
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    /// `[N,3,S,S]` of the given positions, each flipped with probability 1/2
    /// when `flip` is set.
    pub fn batch<R: Rng + ?Sized>(&self, idx: &[usize], flip: bool, rng: &mut R) -> Tensor<T> {
        let items: Vec<Tensor<T>> = idx
            .iter()
            .map(|&i| {
                if flip && rng.random_bool(0.5) {
                    hflip_chw(&self.tensors[i])
                } else {
                    self.tensors[i].clone()
                }
            })
            .collect();
        stack(&items)
    }
}

/// Shuffled mini-batches of `items`.
pub fn minibatches<R: Rng + ?Sized>(items: &[usize], batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut v = items.to_vec();
    v.shuffle(rng);
    v.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

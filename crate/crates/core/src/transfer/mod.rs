//! Texture phrases as features for other recognition tasks: per-phrase
//! log-likelihood embeddings, bird-dataset attributes, L2-regularized
//! multinomial logistic regression and per-class weight clouds.

mod attributes;
mod linear;

pub use attributes::{embed_attributes, AttributeSet, AttributeSource, CubDataset, MIN_PROB};
pub use linear::{
    accuracy_vs_k, cloud_tsv, select_l2, train_linear, weight_cloud, AccuracyPoint, CloudEntry, LinearConfig,
    LinearModel,
};

use crate::corpus::Corpus;
use crate::phrase_classifier::PhraseClassifier;
use crate::{Result, Scalar};

/// Texture attributes of every corpus image from a frozen classifier, with
/// the digest of the weights that produced them.
pub fn embed_with_classifier<T: Scalar>(
    model: &PhraseClassifier<T>,
    corpus: &Corpus,
    raw: bool,
) -> Result<(AttributeSet, String)> {
    let scores = model.score_corpus(corpus)?;
    Ok((embed_attributes(&scores, raw)?, model.store.digest()))
}

#[cfg(test)]
mod tests;

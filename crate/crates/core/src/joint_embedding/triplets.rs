use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Tape, Var};
use crate::Scalar;

/// `1` in both hinge losses.
pub const MARGIN: f64 = 1.0;

pub fn squared_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// `(L_p, L_i)` for anchor image `a`, positive text `p`, negative image
/// `a_neg` and negative text `p_neg`:
///
/// - `L_p = max(0, 1 + d(a,p) − d(a,p_neg))`
/// - `L_i = max(0, 1 + d(a,p) − d(a_neg,p))`
///
/// with `d` the squared Euclidean distance.
pub fn triplet_losses<T: Scalar>(a: &[T], p: &[T], a_neg: &[T], p_neg: &[T]) -> (T, T) {
    let m = T::c(MARGIN);
    let d_pos = squared_distance(a, p);
    let lp = (m + d_pos - squared_distance(a, p_neg)).max(T::zero());
    let li = (m + d_pos - squared_distance(a_neg, p)).max(T::zero());
    (lp, li)
}

fn row_sq_dist<T: Scalar>(tape: &Tape<T>, x: Var, y: Var) -> Var {
    tape.sum_cols(tape.square(tape.sub(x, y)))
}

/// Batched `mean(L_p + L_i)` over rows of `[B,d]` embeddings, on the tape.
pub fn triplet_loss<T: Scalar>(tape: &Tape<T>, a: Var, p: Var, a_neg: Var, p_neg: Var) -> Var {
    let d_pos = row_sq_dist(tape, a, p);
    let lp = tape.relu(tape.add_scalar(tape.sub(d_pos, row_sq_dist(tape, a, p_neg)), T::c(MARGIN)));
    let li = tape.relu(tape.add_scalar(tape.sub(d_pos, row_sq_dist(tape, a_neg, p)), T::c(MARGIN)));
    tape.mean(tape.add(lp, li))
}

/// Positive `(image, text)` pairs. Images and texts are indices into the
/// caller's image list and text pool.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairSet {
    /// Ground-truth texts of each image.
    pub image_texts: Vec<BTreeSet<usize>>,
    /// Images of each text.
    pub text_images: Vec<BTreeSet<usize>>,
}

impl PairSet {
    pub fn new(n_images: usize, n_texts: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut s = PairSet {
            image_texts: vec![BTreeSet::new(); n_images],
            text_images: vec![BTreeSet::new(); n_texts],
        };
        for (i, t) in pairs {
            s.image_texts[i].insert(t);
            s.text_images[t].insert(i);
        }
        s
    }

    pub fn n_images(&self) -> usize {
        self.image_texts.len()
    }

    pub fn n_texts(&self) -> usize {
        self.text_images.len()
    }

    /// Every positive pair, ordered by image then text.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.image_texts
            .iter()
            .enumerate()
            .flat_map(|(i, ts)| ts.iter().map(move |&t| (i, t)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    /// An image that does not have `positive`.
    pub negative_image: usize,
    /// A text that is not among `anchor`'s texts.
    pub negative_text: usize,
}

impl Triplet {
    pub fn is_valid(&self, set: &PairSet) -> bool {
        set.image_texts[self.anchor].contains(&self.positive)
            && !set.image_texts[self.anchor].contains(&self.negative_text)
            && !set.image_texts[self.negative_image].contains(&self.positive)
    }
}

pub const MAX_TRIES: usize = 50;

/// Uniform draw from `0..n` satisfying `ok`: rejection sampling for
/// [`MAX_TRIES`] draws, then a uniform pick among all valid candidates.
fn draw<R: Rng + ?Sized>(n: usize, rng: &mut R, ok: impl Fn(usize) -> bool) -> Option<usize> {
    if n == 0 {
        return None;
    }
    for _ in 0..MAX_TRIES {
        let c = rng.random_range(0..n);
        if ok(c) {
            return Some(c);
        }
    }
    let valid: Vec<usize> = (0..n).filter(|&c| ok(c)).collect();
    (!valid.is_empty()).then(|| valid[rng.random_range(0..valid.len())])
}

/// One negative image and one negative text per positive pair. Pairs without
/// any valid negative are skipped; the skip count is returned.
pub fn sample_triplets<R: Rng + ?Sized>(
    batch: &[(usize, usize)],
    set: &PairSet,
    rng: &mut R,
) -> (Vec<Triplet>, usize) {
    let mut out = Vec::with_capacity(batch.len());
    let mut skipped = 0;
    for &(anchor, positive) in batch {
        let neg_text = draw(set.n_texts(), rng, |t| !set.image_texts[anchor].contains(&t));
        let neg_img = draw(set.n_images(), rng, |i| !set.image_texts[i].contains(&positive));
        match (neg_img, neg_text) {
            (Some(negative_image), Some(negative_text)) => out.push(Triplet {
                anchor,
                positive,
                negative_image,
                negative_text,
            }),
            _ => skipped += 1,
        }
    }
    if skipped > 0 {
        log::debug!("{skipped} positives without a valid negative");
    }
    (out, skipped)
}

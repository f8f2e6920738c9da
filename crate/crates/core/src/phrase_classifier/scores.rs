use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::corpus::{normalize_segment, split_description, Vocabulary};
use crate::joint_embedding::{EmbeddingStore, Modality};
use crate::metrics::{rank_descending, MetricReport, Ranking};
use crate::nn::Tensor;
use crate::{Error, Result, Scalar};

/// Dense images × phrases relevance scores, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub image_ids: Vec<String>,
    pub phrases: Vec<String>,
    data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(image_ids: Vec<String>, phrases: Vec<String>, data: Vec<f64>) -> Result<Self> {
        if data.len() != image_ids.len() * phrases.len() {
            return Err(Error::Shape(format!(
                "score matrix {}×{} needs {} entries, got {}",
                image_ids.len(),
                phrases.len(),
                image_ids.len() * phrases.len(),
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("non-finite score {v}")));
        }
        Ok(ScoreMatrix { image_ids, phrases, data })
    }

    pub fn from_tensor<T: Scalar>(image_ids: Vec<String>, phrases: Vec<String>, t: &Tensor<T>) -> Result<Self> {
        Self::new(image_ids, phrases, t.data().iter().map(|v| v.as_f64()).collect())
    }

    pub fn rows(&self) -> usize {
        self.image_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.phrases.len()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols()..(r + 1) * self.cols()]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row_of(&self, image_id: &str) -> Option<usize> {
        self.image_ids.iter().position(|i| i == image_id)
    }

    /// Phrase indices of row `r`, best first (ties by ascending index).
    pub fn phrase_ranking(&self, r: usize) -> Vec<usize> {
        let scored: Vec<(usize, f64)> = self.row(r).iter().copied().enumerate().collect();
        rank_descending(&scored)
    }

    /// Image ids ranked by column `c`, best first (ties by ascending id).
    pub fn image_ranking(&self, c: usize) -> Vec<String> {
        let scored: Vec<(String, f64)> = (0..self.rows()).map(|r| (self.image_ids[r].clone(), self.get(r, c))).collect();
        rank_descending(&scored)
    }

    /// Phrase retrieval: one query per image, relevant phrases given per row.
    pub fn phrase_retrieval(&self, relevant: &[BTreeSet<usize>]) -> MetricReport {
        let rankings: Vec<Ranking<usize>> = (0..self.rows())
            .map(|r| Ranking::new(self.image_ids[r].clone(), self.phrase_ranking(r), relevant[r].clone()))
            .collect();
        MetricReport::from_rankings(&rankings)
    }

    /// Image retrieval: one query per phrase, relevant images given per column.
    pub fn image_retrieval(&self, relevant: &[BTreeSet<String>]) -> MetricReport {
        let rankings: Vec<Ranking<String>> = (0..self.cols())
            .map(|c| Ranking::new(self.phrases[c].clone(), self.image_ranking(c), relevant[c].clone()))
            .collect();
        MetricReport::from_rankings(&rankings)
    }

    pub fn phrases_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".phrases");
        PathBuf::from(s)
    }

    /// Binary matrix with an `.ids` file for rows and a `.phrases` file for
    /// columns.
    pub fn save(&self, path: &Path) -> Result<()> {
        EmbeddingStore::new(Modality::Image, self.image_ids.clone(), self.cols(), self.data.clone())?.save(path)?;
        let p = Self::phrases_path(path);
        let mut text = self.phrases.join("\n");
        text.push('\n');
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m = EmbeddingStore::load(path, Modality::Image)?;
        let p = Self::phrases_path(path);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let phrases: Vec<String> = text.lines().map(str::to_string).collect();
        if phrases.len() != m.dim {
            return Err(Error::Shape(format!("{} phrase names for {} score columns", phrases.len(), m.dim)));
        }
        Self::new(m.ids, phrases, m.data)
    }

    /// `image_id \t phrase_index \t score` rows.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("image_id\tphrase_index\tscore\n");
        for r in 0..self.rows() {
            for c in 0..self.cols() {
                s.push_str(&format!("{}\t{}\t{:.9}\n", self.image_ids[r], c, self.get(r, c)));
            }
        }
        s
    }
}

/// Mean negative log-likelihood per image, summed over phrases, with scores
/// clamped to `[ε, 1−ε]`.
pub fn bce_loss<T: Scalar>(scores: &Tensor<T>, labels: &Tensor<T>) -> Result<T> {
    if scores.shape() != labels.shape() {
        return Err(Error::Shape(format!("scores {:?} vs labels {:?}", scores.shape(), labels.shape())));
    }
    let eps = T::c(1e-7);
    let mut total = T::zero();
    for (&y, &z) in scores.data().iter().zip(labels.data()) {
        let y = y.max(eps).min(T::one() - eps);
        total = total - (z * y.ln() + (T::one() - z) * (T::one() - y).ln());
    }
    Ok(total / T::c(scores.rows().max(1) as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhraseScore {
    pub score: f64,
    /// Vocabulary indices whose scores were averaged.
    pub matched: Vec<usize>,
    /// No sub-sequence of the phrase is in the vocabulary.
    pub unmatched: bool,
}

/// Score of an arbitrary phrase: its own entry when in the vocabulary,
/// otherwise the mean over every contiguous token sub-sequence present in it.
pub fn score_phrase(vocab: &Vocabulary, row: &[f64], phrase: &str) -> PhraseScore {
    let canonical = normalize_segment(phrase);
    if let Some(i) = vocab.index(&canonical) {
        return PhraseScore { score: row[i], matched: vec![i], unmatched: false };
    }
    let tokens: Vec<&str> = canonical.split(' ').filter(|t| !t.is_empty()).collect();
    let mut matched = Vec::new();
    for len in (1..tokens.len()).rev() {
        for start in 0..=tokens.len() - len {
            if let Some(i) = vocab.index(&tokens[start..start + len].join(" ")) {
                matched.push(i);
            }
        }
    }
    if matched.is_empty() {
        return PhraseScore { score: 0.0, matched, unmatched: true };
    }
    let score = matched.iter().map(|&i| row[i]).sum::<f64>() / matched.len() as f64;
    PhraseScore { score, matched, unmatched: false }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    Sum,
}

/// Description score from its phrase scores.
pub fn score_description(vocab: &Vocabulary, row: &[f64], description: &str, agg: Aggregation) -> f64 {
    let phrases = split_description(description);
    if phrases.is_empty() {
        return 0.0;
    }
    let total: f64 = phrases.iter().map(|p| score_phrase(vocab, row, &p.canonical).score).sum();
    match agg {
        Aggregation::Mean => total / phrases.len() as f64,
        Aggregation::Sum => total,
    }
}

/// Top `k` phrases of a score row joined with `", "`, best first.
pub fn describe_top_k(phrases: &[String], row: &[f64], k: usize) -> String {
    let scored: Vec<(usize, f64)> = row.iter().copied().enumerate().collect();
    rank_descending(&scored)
        .into_iter()
        .take(k)
        .map(|i| phrases[i].as_str())
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn describe_top5(phrases: &[String], row: &[f64]) -> String {
    describe_top_k(phrases, row, 5)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_at_half_is_ln2_per_phrase() {
        let s = Tensor::full(&[2, 655], 0.5f64);
        let z = Tensor::new(vec![2, 655], (0..1310).map(|i| (i % 3 == 0) as u8 as f64).collect());
        let l = bce_loss(&s, &z).unwrap();
        assert!((l - 655.0 * 2f64.ln()).abs() < 1e-9);
        assert!(bce_loss(&s, &Tensor::zeros(&[1, 655])).is_err());
    }

    #[test]
    fn bce_perfect_prediction_near_zero() {
        let z = Tensor::new(vec![1, 2], vec![1.0f64, 0.0]);
        let s = Tensor::new(vec![1, 2], vec![1.0 - 1e-7, 1e-7]);
        assert!(bce_loss(&s, &z).unwrap() < 1e-6);
    }

    #[test]
    fn sub_sequence_scoring_example() {
        let vocab = Vocabulary::from_phrases(&["red maroon", "maroon dot", "red", "maroon", "dot", "blue"]);
        let row = [0.1, 0.2, 0.3, 0.4, 0.5, 0.9];
        let s = score_phrase(&vocab, &row, "red maroon dot");
        assert!((s.score - 0.3).abs() < 1e-12);
        assert_eq!(s.matched.len(), 5);
        assert_eq!(score_phrase(&vocab, &row, "blue").score, 0.9);
        let miss = score_phrase(&vocab, &row, "green");
        assert!(miss.unmatched && miss.score == 0.0);
    }

    #[test]
    fn top5_breaks_ties_by_id() {
        let phrases: Vec<String> = (0..7).map(|i| format!("p{i}")).collect();
        assert_eq!(describe_top5(&phrases, &[0.5; 7]), "p0, p1, p2, p3, p4");
        let row = [0.1, 0.9, 0.3, 0.8, 0.2, 0.7, 0.6];
        assert_eq!(describe_top5(&phrases, &row), "p1, p3, p5, p6, p2");
    }

    #[test]
    fn description_aggregation() {
        let vocab = Vocabulary::from_phrases(&["red", "dots"]);
        let row = [0.2, 0.6];
        assert!((score_description(&vocab, &row, "red, dots", Aggregation::Mean) - 0.4).abs() < 1e-12);
        assert!((score_description(&vocab, &row, "red, dots", Aggregation::Sum) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn rankings_are_permutations() {
        let m = ScoreMatrix::new(vec!["a".into(), "b".into()], vec!["x".into(), "y".into(), "z".into()], vec![0.1, 0.5, 0.5, 0.9, 0.0, 0.3]).unwrap();
        let mut r = m.phrase_ranking(0);
        assert_eq!(r, vec![1, 2, 0]);
        r.sort();
        assert_eq!(r, vec![0, 1, 2]);
        assert_eq!(m.image_ranking(0), vec!["b".to_string(), "a".to_string()]);
    }
}

use super::{Corpus, Vocabulary};
use crate::{Error, Result};

/// Binary image × phrase matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMatrix {
    pub image_ids: Vec<String>,
    pub n_phrases: usize,
    data: Vec<u8>,
}

impl LabelMatrix {
    pub fn get(&self, row: usize, phrase: usize) -> bool {
        self.data[row * self.n_phrases + phrase] != 0
    }

    pub fn row(&self, row: usize) -> &[u8] {
        &self.data[row * self.n_phrases..(row + 1) * self.n_phrases]
    }

    pub fn rows(&self) -> usize {
        self.image_ids.len()
    }

    /// Phrase indices labeled positive for `row`.
    pub fn positives(&self, row: usize) -> Vec<usize> {
        (0..self.n_phrases).filter(|&p| self.get(row, p)).collect()
    }

    /// Image rows labeled positive for `phrase`.
    pub fn images_with(&self, phrase: usize) -> Vec<usize> {
        (0..self.rows()).filter(|&r| self.get(r, phrase)).collect()
    }

    /// Rows as 0/1 values in any float type.
    pub fn to_dense<T: crate::Scalar>(&self, rows: &[usize]) -> crate::nn::Tensor<T> {
        let mut data = Vec::with_capacity(rows.len() * self.n_phrases);
        for &r in rows {
            data.extend(self.row(r).iter().map(|&b| if b != 0 { T::one() } else { T::zero() }));
        }
        crate::nn::Tensor::new(vec![rows.len(), self.n_phrases], data)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CoverageReport {
    /// Images with no in-vocabulary phrase.
    pub empty_rows: Vec<String>,
    pub mean_positives: f64,
}

/// Row `i` marks the union of in-vocabulary phrases over all descriptions of
/// image `corpus.images()[i]`.
pub fn build_label_matrix(corpus: &Corpus, vocab: &Vocabulary) -> Result<(LabelMatrix, CoverageReport)> {
    let n = vocab.len();
    let mut data = vec![0u8; corpus.len() * n];
    for d in corpus.descriptions() {
        let row = corpus
            .index_of(&d.image_id)
            .ok_or_else(|| Error::UnknownId(d.image_id.clone()))?;
        for p in &d.phrases {
            if let Some(j) = vocab.index(&p.canonical) {
                data[row * n + j] = 1;
            }
        }
    }
    let m = LabelMatrix {
        image_ids: corpus.images().iter().map(|i| i.id.clone()).collect(),
        n_phrases: n,
        data,
    };
    let mut report = CoverageReport::default();
    let mut total = 0usize;
    for r in 0..m.rows() {
        let k = m.row(r).iter().filter(|&&b| b != 0).count();
        total += k;
        if k == 0 {
            report.empty_rows.push(m.image_ids[r].clone());
        }
    }
    report.mean_positives = total as f64 / m.rows().max(1) as f64;
    Ok((m, report))
}

#[cfg(test)]
mod tests {
    use super::super::{Description, Split, TextureImage};
    use super::*;

    fn corpus() -> Corpus {
        let img = |id: &str| TextureImage::in_memory(id, "dotted", Split::Train, image::RgbImage::new(1, 1));
        Corpus::new(
            vec![img("a"), img("b")],
            vec![
                Description::parse("a", "red dots, dots").unwrap(),
                Description::parse("a", "red dots").unwrap(),
                Description::parse("b", "zigzag").unwrap(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn union_over_descriptions() {
        let vocab = Vocabulary::from_phrases(&["red dots", "dots", "blue"]);
        let (m, report) = build_label_matrix(&corpus(), &vocab).unwrap();
        assert_eq!(m.row(0), &[1, 1, 0]);
        assert_eq!(m.row(1), &[0, 0, 0]);
        assert_eq!(report.empty_rows, vec!["b".to_string()]);
        assert_eq!(m.images_with(0), vec![0]);
    }

    #[test]
    fn unknown_image_is_rejected() {
        let img = TextureImage::in_memory("a", "x", Split::Train, image::RgbImage::new(1, 1));
        let bad = Corpus::new(vec![img], vec![Description::parse("zzz", "dots").unwrap()]);
        assert!(matches!(bad, Err(Error::UnknownId(_))));
    }
}

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::phrase_classifier::ScoreMatrix;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeSource {
    Texture,
    CubShape,
    CubPattern,
    CubColor,
    Combined,
}

impl AttributeSource {
    pub fn as_str(self) -> &'static str {
        match self {
            AttributeSource::Texture => "texture",
            AttributeSource::CubShape => "cub_shape",
            AttributeSource::CubPattern => "cub_pattern",
            AttributeSource::CubColor => "cub_color",
            AttributeSource::Combined => "combined",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            AttributeSource::Texture,
            AttributeSource::CubShape,
            AttributeSource::CubPattern,
            AttributeSource::CubColor,
            AttributeSource::Combined,
        ]
        .into_iter()
        .find(|a| a.as_str() == s)
    }

    /// Source of a bird attribute by its name (`has_wing_color::blue`, ...).
    pub fn of_cub_attribute(name: &str) -> Self {
        let group = name.split("::").next().unwrap_or(name);
        if group.contains("color") {
            AttributeSource::CubColor
        } else if group.contains("pattern") {
            AttributeSource::CubPattern
        } else {
            AttributeSource::CubShape
        }
    }
}

/// Per-image attribute values, row-major `[images, names]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSet {
    pub source: AttributeSource,
    pub image_ids: Vec<String>,
    pub names: Vec<String>,
    pub data: Vec<f64>,
}

impl AttributeSet {
    pub fn new(source: AttributeSource, image_ids: Vec<String>, names: Vec<String>, data: Vec<f64>) -> Result<Self> {
        if data.len() != image_ids.len() * names.len() {
            return Err(Error::Shape(format!(
                "{} images × {} attributes needs {} values, got {}",
                image_ids.len(),
                names.len(),
                image_ids.len() * names.len(),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("attribute values must be finite".into()));
        }
        Ok(AttributeSet { source, image_ids, names, data })
    }

    pub fn rows(&self) -> usize {
        self.image_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.names.len()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols()..(r + 1) * self.cols()]
    }

    /// The first `k` columns (all when `k` exceeds the width).
    pub fn truncate(&self, k: usize) -> AttributeSet {
        let k = k.min(self.cols());
        let data = (0..self.rows()).flat_map(|r| self.row(r)[..k].to_vec()).collect();
        AttributeSet {
            source: self.source,
            image_ids: self.image_ids.clone(),
            names: self.names[..k].to_vec(),
            data,
        }
    }

    /// Rows at the given positions.
    pub fn select_rows(&self, rows: &[usize]) -> AttributeSet {
        AttributeSet {
            source: self.source,
            image_ids: rows.iter().map(|&r| self.image_ids[r].clone()).collect(),
            names: self.names.clone(),
            data: rows.iter().flat_map(|&r| self.row(r).to_vec()).collect(),
        }
    }

    /// Column-wise concatenation of sets over the same images, in order.
    pub fn combine(sets: &[&AttributeSet]) -> Result<AttributeSet> {
        let first = sets.first().ok_or_else(|| Error::Empty("no attribute sets to combine".into()))?;
        if let Some(bad) = sets.iter().find(|s| s.image_ids != first.image_ids) {
            return Err(Error::Shape(format!(
                "attribute set {} covers different images",
                bad.source.as_str()
            )));
        }
        let names = sets
            .iter()
            .flat_map(|s| s.names.iter().map(move |n| format!("{}:{n}", s.source.as_str())))
            .collect();
        let data = (0..first.rows()).flat_map(|r| sets.iter().flat_map(move |s| s.row(r).to_vec())).collect();
        AttributeSet::new(AttributeSource::Combined, first.image_ids.clone(), names, data)
    }

    /// `image_id` then one column per attribute.
    pub fn to_tsv(&self) -> String {
        let mut s = format!("image_id\t{}\n", self.names.join("\t"));
        for r in 0..self.rows() {
            s.push_str(&self.image_ids[r]);
            for v in self.row(r) {
                s.push_str(&format!("\t{v:.9}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Smallest probability fed to the logarithm.
pub const MIN_PROB: f64 = 1e-12;

/// Texture attributes from phrase probabilities: `ln(p)` per phrase, or the
/// probabilities themselves when `raw` is set. Columns keep the score
/// matrix order (vocabulary order, most frequent phrase first).
pub fn embed_attributes(scores: &ScoreMatrix, raw: bool) -> Result<AttributeSet> {
    let data = scores
        .data()
        .iter()
        .map(|&p| if raw { p } else { p.max(MIN_PROB).ln() })
        .collect();
    AttributeSet::new(AttributeSource::Texture, scores.image_ids.clone(), scores.phrases.clone(), data)
}

/// Bird-dataset metadata: images, classes, the standard split and the
/// majority-vote binarized attributes.
#[derive(Clone, Debug, PartialEq)]
pub struct CubDataset {
    pub image_ids: Vec<String>,
    /// Zero-based class per image.
    pub labels: Vec<usize>,
    pub is_train: Vec<bool>,
    pub attribute_names: Vec<String>,
    /// `[images, attributes]` in {0, 1}.
    pub attributes: Vec<u8>,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn fields<'a>(path: &Path, line_no: usize, line: &'a str, n: usize) -> Result<Vec<&'a str>> {
    let f: Vec<&str> = line.split_whitespace().collect();
    if f.len() < n {
        return Err(Error::MalformedRecord {
            path: path.to_path_buf(),
            line: line_no,
            reason: format!("expected at least {n} fields"),
        });
    }
    Ok(f)
}

fn int(path: &Path, line_no: usize, s: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::MalformedRecord {
        path: path.to_path_buf(),
        line: line_no,
        reason: format!("not an integer: {s:?}"),
    })
}

impl CubDataset {
    /// Reads `images.txt`, `image_class_labels.txt`, `train_test_split.txt`,
    /// `attributes.txt` (or `attributes/attributes.txt`) and
    /// `attributes/image_attribute_labels.txt` under `root`.
    pub fn load(root: &Path) -> Result<Self> {
        let images_path = root.join("images.txt");
        let mut ids: BTreeMap<usize, String> = BTreeMap::new();
        for (i, line) in read(&images_path)?.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f = fields(&images_path, i + 1, line, 2)?;
            ids.insert(int(&images_path, i + 1, f[0])?, f[1].to_string());
        }
        let pos: BTreeMap<usize, usize> = ids.keys().enumerate().map(|(p, &k)| (k, p)).collect();
        let n = ids.len();
        let lookup = |path: &Path, line: usize, s: &str| -> Result<usize> {
            let k = int(path, line, s)?;
            pos.get(&k).copied().ok_or_else(|| Error::UnknownId(format!("image {k} in {}", path.display())))
        };

        let labels_path = root.join("image_class_labels.txt");
        let mut labels = vec![usize::MAX; n];
        for (i, line) in read(&labels_path)?.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f = fields(&labels_path, i + 1, line, 2)?;
            let c = int(&labels_path, i + 1, f[1])?;
            if c == 0 {
                return Err(Error::MalformedRecord {
                    path: labels_path.clone(),
                    line: i + 1,
                    reason: "class ids start at 1".into(),
                });
            }
            labels[lookup(&labels_path, i + 1, f[0])?] = c - 1;
        }
        if labels.contains(&usize::MAX) {
            return Err(Error::Config("some images have no class label".into()));
        }

        let split_path = root.join("train_test_split.txt");
        let mut is_train = vec![false; n];
        for (i, line) in read(&split_path)?.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f = fields(&split_path, i + 1, line, 2)?;
            is_train[lookup(&split_path, i + 1, f[0])?] = f[1] == "1";
        }

        let names_path = [root.join("attributes.txt"), root.join("attributes").join("attributes.txt")]
            .into_iter()
            .find(|p| p.exists())
            .unwrap_or_else(|| root.join("attributes.txt"));
        let mut attribute_names = Vec::new();
        for (i, line) in read(&names_path)?.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f = fields(&names_path, i + 1, line, 2)?;
            if int(&names_path, i + 1, f[0])? != attribute_names.len() + 1 {
                return Err(Error::MalformedRecord {
                    path: names_path.clone(),
                    line: i + 1,
                    reason: "attribute ids must be consecutive from 1".into(),
                });
            }
            attribute_names.push(f[1].to_string());
        }
        let m = attribute_names.len();

        let votes_path = root.join("attributes").join("image_attribute_labels.txt");
        // (present votes, total votes)
        let mut votes = vec![(0u32, 0u32); n * m];
        for (i, line) in read(&votes_path)?.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f = fields(&votes_path, i + 1, line, 3)?;
            let img = lookup(&votes_path, i + 1, f[0])?;
            let a = int(&votes_path, i + 1, f[1])?;
            if a == 0 || a > m {
                return Err(Error::UnknownId(format!("attribute {a} in {}", votes_path.display())));
            }
            let v = &mut votes[img * m + a - 1];
            v.1 += 1;
            if f[2] == "1" {
                v.0 += 1;
            }
        }
        let attributes = votes.iter().map(|&(p, t)| u8::from(2 * p > t)).collect();
        Ok(CubDataset {
            image_ids: ids.into_values().collect(),
            labels,
            is_train,
            attribute_names,
            attributes,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Binary attributes of one source (`CubShape`, `CubPattern` or `CubColor`).
    pub fn attribute_set(&self, source: AttributeSource) -> Result<AttributeSet> {
        if !matches!(
            source,
            AttributeSource::CubShape | AttributeSource::CubPattern | AttributeSource::CubColor
        ) {
            return Err(Error::Config(format!("{} is not a bird attribute source", source.as_str())));
        }
        let m = self.attribute_names.len();
        let cols: Vec<usize> = (0..m)
            .filter(|&a| AttributeSource::of_cub_attribute(&self.attribute_names[a]) == source)
            .collect();
        let data = (0..self.image_ids.len())
            .flat_map(|r| cols.iter().map(move |&a| self.attributes[r * m + a] as f64))
            .collect();
        AttributeSet::new(
            source,
            self.image_ids.clone(),
            cols.iter().map(|&a| self.attribute_names[a].clone()).collect(),
            data,
        )
    }
}

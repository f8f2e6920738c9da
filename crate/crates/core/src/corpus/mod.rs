//! Texture description corpus: phrase normalization, loading, splits,
//! frequency-filtered vocabularies and label matrices.

mod labels;
mod load;
mod text;
mod vocab;

pub use labels::{build_label_matrix, CoverageReport, LabelMatrix};
pub use load::{hash_split, load_corpus, AnnotationRecord, LoadReport};
pub use text::{normalize_segment, split_description, Phrase};
pub use vocab::{build_vocabulary, Vocabulary};

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn parse(s: &str) -> Option<Split> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" | "training" => Some(Split::Train),
            "val" | "valid" | "validation" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where an image's pixels come from. Files are decoded on demand.
#[derive(Clone, Debug)]
pub enum PixelSource {
    File(PathBuf),
    Memory(Arc<RgbImage>),
}

#[derive(Clone, Debug)]
pub struct TextureImage {
    pub id: String,
    pub category: String,
    pub split: Split,
    pub pixels: PixelSource,
}

impl TextureImage {
    pub fn in_memory(id: impl Into<String>, category: impl Into<String>, split: Split, img: RgbImage) -> Self {
        TextureImage {
            id: id.into(),
            category: category.into(),
            split,
            pixels: PixelSource::Memory(Arc::new(img)),
        }
    }

    pub fn load_rgb(&self) -> Result<Arc<RgbImage>> {
        match &self.pixels {
            PixelSource::Memory(img) => Ok(img.clone()),
            PixelSource::File(path) => {
                let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
                Ok(Arc::new(img.to_rgb8()))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Description {
    pub image_id: String,
    pub raw_text: String,
    pub phrases: Vec<Phrase>,
}

impl Description {
    /// Returns `None` when no phrase survives normalization.
    pub fn parse(image_id: impl Into<String>, raw: &str) -> Option<Self> {
        let phrases = split_description(raw);
        if phrases.is_empty() {
            return None;
        }
        Some(Description {
            image_id: image_id.into(),
            raw_text: raw.to_string(),
            phrases,
        })
    }

    /// Phrases joined by `", "`.
    pub fn canonical(&self) -> String {
        self.phrases.iter().map(|p| p.canonical.as_str()).collect::<Vec<_>>().join(", ")
    }
}

/// Immutable collection of images and their descriptions.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    images: Vec<TextureImage>,
    descriptions: Vec<Description>,
    by_id: BTreeMap<String, usize>,
    desc_of: Vec<Vec<usize>>,
}

impl Corpus {
    /// Validates id uniqueness and that every description names a known image.
    pub fn new(images: Vec<TextureImage>, descriptions: Vec<Description>) -> Result<Self> {
        let mut by_id = BTreeMap::new();
        for (i, img) in images.iter().enumerate() {
            if img.category.is_empty() {
                return Err(Error::Config(format!("image {} has an empty category", img.id)));
            }
            if by_id.insert(img.id.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate image id {}", img.id)));
            }
        }
        let mut desc_of = vec![Vec::new(); images.len()];
        for (d, desc) in descriptions.iter().enumerate() {
            let i = *by_id
                .get(&desc.image_id)
                .ok_or_else(|| Error::UnknownId(desc.image_id.clone()))?;
            desc_of[i].push(d);
        }
        Ok(Corpus {
            images,
            descriptions,
            by_id,
            desc_of,
        })
    }

    pub fn images(&self) -> &[TextureImage] {
        &self.images
    }

    pub fn descriptions(&self) -> &[Description] {
        &self.descriptions
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn image(&self, id: &str) -> Option<&TextureImage> {
        self.index_of(id).map(|i| &self.images[i])
    }

    /// Descriptions of the image at position `i`.
    pub fn descriptions_at(&self, i: usize) -> impl Iterator<Item = &Description> {
        self.desc_of[i].iter().map(move |&d| &self.descriptions[d])
    }

    pub fn descriptions_of(&self, id: &str) -> Vec<&Description> {
        match self.index_of(id) {
            Some(i) => self.descriptions_at(i).collect(),
            None => Vec::new(),
        }
    }

    /// Image positions in `split`, in corpus order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.images.len()).filter(|&i| self.images[i].split == split).collect()
    }

    /// Descriptions whose image belongs to `split`.
    pub fn split_descriptions(&self, split: Split) -> Vec<&Description> {
        self.descriptions
            .iter()
            .filter(|d| self.image(&d.image_id).map(|i| i.split) == Some(split))
            .collect()
    }

    /// Sub-corpus restricted to the given image positions (order preserved).
    pub fn subset(&self, indices: &[usize]) -> Corpus {
        let images: Vec<TextureImage> = indices.iter().map(|&i| self.images[i].clone()).collect();
        let descriptions = indices
            .iter()
            .flat_map(|&i| self.descriptions_at(i).cloned().collect::<Vec<_>>())
            .collect();
        Corpus::new(images, descriptions).expect("subset of a valid corpus")
    }

    /// Same images with every split tag replaced.
    pub fn with_split(&self, split: Split) -> Corpus {
        let images = self
            .images
            .iter()
            .map(|i| TextureImage { split, ..i.clone() })
            .collect();
        Corpus::new(images, self.descriptions.clone()).expect("valid corpus")
    }

    pub fn split_counts(&self) -> BTreeMap<Split, usize> {
        let mut m = BTreeMap::new();
        for img in &self.images {
            *m.entry(img.split).or_insert(0) += 1;
        }
        m
    }
}

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Corpus, Description, PixelSource, Split, TextureImage};
use crate::{Error, Result};

/// One line of the annotation file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    /// Path relative to the image root, e.g. `banded/banded_0002.jpg`.
    pub image: String,
    pub category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    pub descriptions: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    pub records: usize,
    /// Records whose image file was missing.
    pub missing_images: Vec<String>,
    /// Descriptions with no phrase left after normalization.
    pub invalid_descriptions: usize,
    /// Images whose split was derived from the id hash.
    pub hashed_splits: usize,
    pub split_counts: BTreeMap<Split, usize>,
}

impl LoadReport {
    pub fn split_fractions(&self) -> BTreeMap<Split, f64> {
        let total: usize = self.split_counts.values().sum();
        self.split_counts
            .iter()
            .map(|(s, n)| (*s, *n as f64 / total.max(1) as f64))
            .collect()
    }
}

/// Deterministic 60/15/25 split from a seeded hash of the image id.
pub fn hash_split(id: &str, seed: u64) -> Split {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    let d = h.finalize();
    let v = u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) % 10_000;
    match v {
        0..6000 => Split::Train,
        6000..7500 => Split::Val,
        _ => Split::Test,
    }
}

/// Image id: the relative path with its extension removed.
fn image_id(rel: &str) -> String {
    let p = Path::new(rel);
    p.with_extension("").to_string_lossy().replace('\\', "/")
}

/// Reads a JSON-lines annotation file. Images whose file is missing under
/// `images_root` are excluded with a warning.
pub fn load_corpus(annotations: &Path, images_root: &Path, split_seed: u64) -> Result<(Corpus, LoadReport)> {
    let text = std::fs::read_to_string(annotations).map_err(|e| Error::io(annotations, e))?;
    let mut report = LoadReport::default();
    let mut images = Vec::new();
    let mut descriptions = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| Error::MalformedRecord {
            path: annotations.to_path_buf(),
            line: n + 1,
            reason,
        };
        let rec: AnnotationRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        report.records += 1;
        if rec.category.trim().is_empty() {
            return Err(bad("empty category".into()));
        }
        let id = image_id(&rec.image);
        let path = images_root.join(&rec.image);
        if !path.is_file() {
            log::warn!("missing image {}, record excluded", path.display());
            report.missing_images.push(id);
            continue;
        }
        let split = match &rec.split {
            Some(s) => Split::parse(s).ok_or_else(|| bad(format!("unknown split {s:?}")))?,
            None => {
                report.hashed_splits += 1;
                hash_split(&id, split_seed)
            }
        };
        for raw in &rec.descriptions {
            match Description::parse(id.clone(), raw) {
                Some(d) => descriptions.push(d),
                None => report.invalid_descriptions += 1,
            }
        }
        images.push(TextureImage {
            id,
            category: rec.category,
            split,
            pixels: PixelSource::File(path),
        });
    }
    if report.records == 0 {
        return Err(Error::Empty(format!("{}: no annotation records", annotations.display())));
    }
    let corpus = Corpus::new(images, descriptions)?;
    report.split_counts = corpus.split_counts();
    if report.hashed_splits > 0 {
        log::info!("derived split for {} images from id hash", report.hashed_splits);
    }
    Ok((corpus, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_fixture(dir: &Path, records: &[AnnotationRecord], present: &[&str]) -> std::path::PathBuf {
        for p in present {
            let path = dir.join(p);
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            image::RgbImage::from_pixel(4, 4, image::Rgb([10, 20, 30])).save(&path).unwrap();
        }
        let ann = dir.join("annotations.jsonl");
        let body: Vec<String> = records.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
        std::fs::write(&ann, body.join("\n")).unwrap();
        ann
    }

    fn rec(image: &str, split: Option<&str>) -> AnnotationRecord {
        AnnotationRecord {
            image: image.into(),
            category: image.split('/').next().unwrap().into(),
            split: split.map(str::to_string),
            descriptions: vec!["red dots, white background".into(), " , ".into()],
        }
    }

    #[test]
    fn missing_image_is_excluded_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let records = [
            rec("dotted/a.png", Some("train")),
            rec("dotted/b.png", Some("val")),
            rec("banded/c.png", Some("test")),
            rec("banded/d.png", None),
        ];
        let ann = write_fixture(dir.path(), &records, &["dotted/a.png", "dotted/b.png", "banded/d.png"]);
        let (corpus, report) = load_corpus(&ann, dir.path(), 0).unwrap();
        assert_eq!(corpus.len(), 3);
        assert_eq!(report.missing_images, vec!["banded/c".to_string()]);
        assert_eq!(report.invalid_descriptions, 3);
        assert_eq!(report.hashed_splits, 1);
        assert_eq!(corpus.descriptions().len(), 3);
        assert_eq!(corpus.image("dotted/b").unwrap().split, Split::Val);
        assert_eq!(corpus.image("dotted/a").unwrap().load_rgb().unwrap().width(), 4);
    }

    #[test]
    fn empty_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let ann = dir.path().join("a.jsonl");
        std::fs::write(&ann, "").unwrap();
        assert!(matches!(load_corpus(&ann, dir.path(), 0), Err(Error::Empty(_))));
    }

    #[test]
    fn malformed_record_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let ann = dir.path().join("a.jsonl");
        let good = serde_json::to_string(&rec("dotted/a.png", None)).unwrap();
        std::fs::write(&ann, format!("{good}\n{{\"image\": 3}}\n")).unwrap();
        match load_corpus(&ann, dir.path(), 0) {
            Err(Error::MalformedRecord { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn hash_split_proportions() {
        let mut counts = BTreeMap::new();
        for i in 0..20_000 {
            *counts.entry(hash_split(&format!("img{i}"), 3)).or_insert(0usize) += 1;
        }
        let f = |s| counts[&s] as f64 / 20_000.0;
        assert!((f(Split::Train) - 0.60).abs() < 0.015);
        assert!((f(Split::Val) - 0.15).abs() < 0.015);
        assert!((f(Split::Test) - 0.25).abs() < 0.015);
        assert_eq!(hash_split("x", 1), hash_split("x", 1));
    }
}

use image::{Rgb, RgbImage};

use super::{BaseTexture, Palette, TextureType};
use crate::corpus::{Corpus, Description, Split, TextureImage};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct SyntheticImage {
    /// `{pattern}_{color1}_{color2}`
    pub id: String,
    pub base_id: String,
    pub pattern: String,
    pub kind: TextureType,
    pub color1: String,
    pub color2: String,
    pub pixels: RgbImage,
    pub description: String,
}

impl SyntheticImage {
    pub fn has_color(&self, c: &str) -> bool {
        self.color1 == c || self.color2 == c
    }
}

/// Region 1 → `c1`, region 2 → `c2`; each pixel is the target color scaled by
/// its luminance relative to the region's mean luminance, clipped to 0..=255.
pub fn recolor(base: &BaseTexture, c1: [u8; 3], c2: [u8; 3]) -> RgbImage {
    let mean = |want: bool| {
        let (s, n) = base
            .shading
            .iter()
            .zip(&base.mask)
            .filter(|(_, &m)| m == want)
            .fold((0.0, 0usize), |(s, n), (&v, _)| (s + v, n + 1));
        if n == 0 {
            1.0
        } else {
            s / n as f64
        }
    };
    let (m1, m2) = (mean(true), mean(false));
    let mut img = RgbImage::new(base.width, base.height);
    for (i, p) in img.pixels_mut().enumerate() {
        let (target, m) = if base.mask[i] { (c1, m1) } else { (c2, m2) };
        let f = if m > 0.0 { base.shading[i] / m } else { 1.0 };
        *p = Rgb(target.map(|c| (c as f64 * f).round().clamp(0.0, 255.0) as u8));
    }
    img
}

pub(super) fn template(kind: TextureType, pattern: &str, c1: &str, c2: &str) -> String {
    match kind {
        TextureType::A => format!("{c1} {pattern}, {c2} background"),
        TextureType::B => format!("{c1} and {c2} {pattern}"),
    }
}

/// Recovers `(pattern, color1, color2)` from a templated description.
pub fn parse_description(desc: &str) -> Option<(String, String, String)> {
    if let Some((fg, bg)) = desc.split_once(", ") {
        let c2 = bg.strip_suffix(" background")?;
        let (c1, pattern) = fg.split_once(' ')?;
        return Some((pattern.to_string(), c1.to_string(), c2.to_string()));
    }
    let (c1, rest) = desc.split_once(" and ")?;
    let (c2, pattern) = rest.split_once(' ')?;
    Some((pattern.to_string(), c1.to_string(), c2.to_string()))
}

/// Every base recolored with every ordered pair of distinct palette colors.
pub fn generate_corpus(bases: &[BaseTexture], palette: &Palette) -> Result<Vec<SyntheticImage>> {
    palette.validate()?;
    let count = |k| bases.iter().filter(|b| b.kind == k).count();
    if count(TextureType::A) != 5 || count(TextureType::B) != 5 {
        return Err(Error::Config("need exactly 5 Type A and 5 Type B bases".into()));
    }
    let mut out = Vec::with_capacity(bases.len() * palette.len() * (palette.len() - 1));
    for base in bases {
        let n = (base.width * base.height) as usize;
        if base.mask.len() != n || base.shading.len() != n {
            return Err(Error::Shape(format!("base {}: mask does not match pixels", base.id)));
        }
        for a in &palette.colors {
            for b in &palette.colors {
                if a.name == b.name {
                    continue;
                }
                out.push(SyntheticImage {
                    id: format!("{}_{}_{}", base.pattern, a.name, b.name),
                    base_id: base.id.clone(),
                    pattern: base.pattern.clone(),
                    kind: base.kind,
                    color1: a.name.clone(),
                    color2: b.name.clone(),
                    pixels: recolor(base, a.rgb, b.rgb),
                    description: template(base.kind, &base.pattern, &a.name, &b.name),
                });
            }
        }
    }
    Ok(out)
}

/// The synthetic images as a corpus (category = pattern) with one
/// description each, all tagged `split`.
pub fn to_corpus(images: &[SyntheticImage], split: Split) -> Result<Corpus> {
    let imgs = images
        .iter()
        .map(|s| TextureImage::in_memory(&s.id, &s.pattern, split, s.pixels.clone()))
        .collect();
    let descs = images
        .iter()
        .filter_map(|s| Description::parse(&s.id, &s.description))
        .collect();
    Corpus::new(imgs, descs)
}

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PATTERNS: [&str; 10] = [
    "dots",
    "polka-dots",
    "swirls",
    "web",
    "lines",
    "squares",
    "hexagon",
    "stripes",
    "zigzagged",
    "banded",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TextureType {
    /// Foreground shapes on a background.
    A,
    /// Two interleaved foreground colors.
    B,
}

impl TextureType {
    pub fn of(pattern: &str) -> Option<Self> {
        match pattern {
            "dots" | "polka-dots" | "swirls" | "web" | "lines" => Some(TextureType::A),
            "squares" | "hexagon" | "stripes" | "zigzagged" | "banded" => Some(TextureType::B),
            _ => None,
        }
    }
}

/// Grayscale shading plus a total two-region mask (`true` = region 1, the
/// foreground for Type A).
#[derive(Clone, Debug, PartialEq)]
pub struct BaseTexture {
    pub id: String,
    pub pattern: String,
    pub kind: TextureType,
    pub width: u32,
    pub height: u32,
    /// Luminance in (0, 1], row-major.
    pub shading: Vec<f64>,
    pub mask: Vec<bool>,
}

impl BaseTexture {
    pub fn new(pattern: &str, width: u32, height: u32, shading: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        let kind = TextureType::of(pattern).ok_or_else(|| Error::Config(format!("unknown pattern {pattern:?}")))?;
        let n = (width * height) as usize;
        if shading.len() != n || mask.len() != n {
            return Err(Error::Shape(format!(
                "base {pattern}: {}x{} needs {n} shading and mask values",
                width, height
            )));
        }
        Ok(BaseTexture {
            id: pattern.to_string(),
            pattern: pattern.to_string(),
            kind,
            width,
            height,
            shading,
            mask,
        })
    }

    /// Procedural base. `variant` shifts phases and scales so that distinct
    /// variants look different.
    pub fn procedural(pattern: &str, size: u32, variant: u64) -> Result<Self> {
        let n = size as f64;
        let v = variant as f64;
        let phase = (v * 0.618_033_988_75).fract();
        let scale = 1.0 + 0.25 * ((v * 0.414_213_562).fract() - 0.5);
        let mut mask = Vec::with_capacity((size * size) as usize);
        let mut shading = Vec::with_capacity((size * size) as usize);
        for yi in 0..size {
            for xi in 0..size {
                // unit coordinates
                let x = (xi as f64 + 0.5) / n;
                let y = (yi as f64 + 0.5) / n;
                let inside = region(pattern, x, y, phase, scale)?;
                mask.push(inside);
                // soft wrinkles
                let s = 0.8
                    + 0.08 * (2.0 * PI * (1.7 * x + 0.9 * y + phase)).sin()
                    + 0.06 * (2.0 * PI * (3.1 * y - 0.6 * x + 2.0 * phase)).sin()
                    + 0.04 * (2.0 * PI * (7.3 * x * y + phase)).cos();
                shading.push(s.clamp(0.05, 1.0));
            }
        }
        Self::new(pattern, size, size, shading, mask)
    }
}

fn region(pattern: &str, x: f64, y: f64, phase: f64, scale: f64) -> Result<bool> {
    let tri = |t: f64| 2.0 * (t - (t + 0.5).floor()).abs();
    Ok(match pattern {
        "dots" => {
            let k = 6.0 * scale;
            let (fx, fy) = ((x * k + phase).fract() - 0.5, (y * k + phase).fract() - 0.5);
            fx * fx + fy * fy < 0.18 * 0.18
        }
        "polka-dots" => {
            let k = 3.0 * scale;
            let row = (y * k + phase).floor();
            let shift = if row as i64 % 2 == 0 { 0.0 } else { 0.5 };
            let (fx, fy) = ((x * k + shift + phase).fract() - 0.5, (y * k + phase).fract() - 0.5);
            fx * fx + fy * fy < 0.3 * 0.3
        }
        "swirls" => {
            let (dx, dy) = (x - 0.5, y - 0.5);
            let r = (dx * dx + dy * dy).sqrt();
            let th = dy.atan2(dx);
            (r * 28.0 * scale + 2.0 * th + 2.0 * PI * phase).sin() > 0.55
        }
        "web" => {
            let (dx, dy) = (x - 0.45 - 0.1 * phase, y - 0.5);
            let r = (dx * dx + dy * dy).sqrt();
            let th = dy.atan2(dx);
            let spoke = (th * 8.0 / (2.0 * PI) * 2.0).fract();
            let ring = (r * 10.0 * scale).fract();
            spoke < 0.12 || ring < 0.1
        }
        "lines" => (y * 10.0 * scale + phase).fract() < 0.12,
        "squares" => {
            let k = 4.0 * scale;
            (((x * k + phase).floor() + (y * k + phase).floor()) as i64).rem_euclid(2) == 0
        }
        "hexagon" => {
            let k = 5.0 * scale;
            let (px, py) = (x * k + phase, y * k);
            // axial hex cell by nearest center of two offset lattices
            let s3 = 3f64.sqrt();
            let (ax, ay) = (px, py / s3);
            let c1 = ((ax.round() - ax).powi(2) + ((ay.round() - ay) * s3).powi(2)).sqrt();
            let (bx, by) = (px - 0.5, py / s3 - 0.5);
            let c2 = ((bx.round() - bx).powi(2) + ((by.round() - by) * s3).powi(2)).sqrt();
            c1.min(c2) < 0.42
        }
        "stripes" => {
            let t = x * 6.0 * scale + 0.35 * (2.0 * PI * (y * 1.5 + phase)).sin();
            t.fract() < 0.5
        }
        "zigzagged" => {
            let t = y * 6.0 * scale + 0.25 * tri(x * 5.0 + phase);
            t.fract() < 0.5
        }
        "banded" => (x * 4.0 * scale + phase).fract() < 0.5,
        other => return Err(Error::Config(format!("unknown pattern {other:?}"))),
    })
}

/// The ten procedural bases, in pattern order.
pub fn procedural_bases(size: u32) -> Vec<BaseTexture> {
    PATTERNS
        .iter()
        .map(|p| BaseTexture::procedural(p, size, 0).expect("known pattern"))
        .collect()
}

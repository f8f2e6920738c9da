use image::imageops::FilterType;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::nn::Tensor;
use crate::Scalar;

/// Resize and per-channel normalization applied at model input time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageInput {
    pub size: u32,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for ImageInput {
    fn default() -> Self {
        ImageInput {
            size: 224,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl ImageInput {
    pub fn with_size(size: u32) -> Self {
        ImageInput { size, ..Default::default() }
    }

    /// `[3, size, size]` tensor.
    pub fn tensor<T: Scalar>(&self, img: &RgbImage) -> Tensor<T> {
        let s = self.size;
        let resized;
        let img = if img.width() == s && img.height() == s {
            img
        } else {
            resized = image::imageops::resize(img, s, s, FilterType::Triangle);
            &resized
        };
        let n = (s * s) as usize;
        let mut data = vec![T::zero(); 3 * n];
        for (i, p) in img.pixels().enumerate() {
            for c in 0..3 {
                let v = (p.0[c] as f64 / 255.0 - self.mean[c]) / self.std[c];
                data[c * n + i] = T::c(v);
            }
        }
        Tensor::new(vec![3, s as usize, s as usize], data)
    }
}

/// Horizontal flip of a `[C,H,W]` tensor.
pub fn hflip_chw<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = t.clone();
    for ch in 0..c {
        for y in 0..h {
            let row = &t.data()[(ch * h + y) * w..(ch * h + y + 1) * w];
            let dst = &mut out.data_mut()[(ch * h + y) * w..(ch * h + y + 1) * w];
            for (d, s) in dst.iter_mut().zip(row.iter().rev()) {
                *d = *s;
            }
        }
    }
    out
}

/// Stacks `[C,H,W]` tensors into `[N,C,H,W]`.
pub fn stack<T: Scalar>(items: &[Tensor<T>]) -> Tensor<T> {
    let shape = items[0].shape().to_vec();
    let mut data = Vec::with_capacity(items.len() * items[0].len());
    for t in items {
        assert_eq!(t.shape(), &shape[..], "stack: shape mismatch");
        data.extend_from_slice(t.data());
    }
    let mut s = vec![items.len()];
    s.extend(shape);
    Tensor::new(s, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_and_resizes() {
        let img = RgbImage::from_pixel(8, 8, image::Rgb([255, 0, 128]));
        let input = ImageInput::with_size(4);
        let t: Tensor<f64> = input.tensor(&img);
        assert_eq!(t.shape(), &[3, 4, 4]);
        assert!((t.data()[0] - (1.0 - 0.485) / 0.229).abs() < 1e-9);
        assert!((t.data()[16] - (0.0 - 0.456) / 0.224).abs() < 1e-9);
    }

    #[test]
    fn flip_is_an_involution() {
        let t = Tensor::new(vec![1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let f = hflip_chw(&t);
        assert_eq!(f.data(), &[3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
        assert_eq!(hflip_chw(&f), t);
    }
}

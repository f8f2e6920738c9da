use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Conv2d, Padding, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub channels: usize,
    pub stride: usize,
    /// Residual blocks after the strided convolution.
    #[serde(default)]
    pub blocks: usize,
}

/// Residual convolutional network. Each stage is a strided 3×3 convolution
/// followed by `blocks` residual blocks; every stage output is rectified.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub kernel: usize,
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub padding: Padding,
}

impl BackboneConfig {
    /// Four stages of widths 32, 64, 128, 256, each downsampling by 2.
    pub fn standard() -> Self {
        BackboneConfig {
            in_channels: 3,
            kernel: 3,
            stages: [32, 64, 128, 256]
                .iter()
                .map(|&c| StageConfig { channels: c, stride: 2, blocks: 1 })
                .collect(),
            padding: Padding::Zero,
        }
    }

    /// Two narrow stages for desk-scale experiments.
    pub fn tiny() -> Self {
        BackboneConfig {
            in_channels: 3,
            kernel: 3,
            stages: vec![
                StageConfig { channels: 8, stride: 2, blocks: 0 },
                StageConfig { channels: 16, stride: 2, blocks: 1 },
            ],
            padding: Padding::Zero,
        }
    }

    pub fn total_stride(&self) -> usize {
        self.stages.iter().map(|s| s.stride).product()
    }
}

#[derive(Clone, Debug)]
struct Block {
    a: Conv2d,
    b: Conv2d,
}

#[derive(Clone, Debug)]
struct Stage {
    down: Conv2d,
    blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    stages: Vec<Stage>,
}

impl Backbone {
    /// Parameters are named `{prefix}.stage{k}.down` and
    /// `{prefix}.stage{k}.block{j}.{a,b}` with `k` starting at 1.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        group: &str,
        config: BackboneConfig,
        rng: &mut R,
    ) -> Self {
        let mut stages = Vec::new();
        let mut in_c = config.in_channels;
        for (k, sc) in config.stages.iter().enumerate() {
            let name = format!("{prefix}.stage{}", k + 1);
            let down = Conv2d::new(
                store,
                &format!("{name}.down"),
                group,
                in_c,
                sc.channels,
                config.kernel,
                sc.stride,
                config.padding,
                rng,
            );
            let blocks = (0..sc.blocks)
                .map(|j| {
                    let bn = format!("{name}.block{j}");
                    let a = Conv2d::new(store, &format!("{bn}.a"), group, sc.channels, sc.channels, config.kernel, 1, config.padding, rng);
                    let b = Conv2d::new(store, &format!("{bn}.b"), group, sc.channels, sc.channels, config.kernel, 1, config.padding, rng);
                    // start each residual branch near identity
                    let w = &mut store.get_mut(b.weight).value;
                    *w = w.map(|v| v * T::c(0.1));
                    Block { a, b }
                })
                .collect();
            stages.push(Stage { down, blocks });
            in_c = sc.channels;
        }
        Backbone { config, stages }
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.config.stages[stage - 1].channels
    }

    /// Activations of the first `upto` stages for `x [N,C,H,W]`.
    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: Var, upto: usize) -> Vec<Var> {
        let mut outs = Vec::with_capacity(upto);
        let mut h = x;
        for stage in self.stages.iter().take(upto) {
            h = tape.relu(stage.down.forward(tape, store, h));
            for block in &stage.blocks {
                let r = tape.relu(block.a.forward(tape, store, h));
                let r = block.b.forward(tape, store, r);
                h = tape.relu(tape.add(h, r));
            }
            outs.push(h);
        }
        outs
    }
}

/// Pooled image feature with the stages it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeature<T> {
    pub vector: Vec<T>,
    pub layer_spec: Vec<usize>,
}

/// Backbone plus the stage selection whose spatially pooled activations form
/// the image feature.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub backbone: Backbone,
    pub layer_spec: Vec<usize>,
}

impl ImageEncoder {
    pub fn new(backbone: Backbone, mut layer_spec: Vec<usize>) -> Result<Self> {
        if layer_spec.is_empty() {
            return Err(Error::Config("layer_spec must name at least one stage".into()));
        }
        layer_spec.sort_unstable();
        layer_spec.dedup();
        if let Some(&bad) = layer_spec.iter().find(|&&s| s == 0 || s > backbone.num_stages()) {
            return Err(Error::Config(format!(
                "layer_spec stage {bad} outside 1..={}",
                backbone.num_stages()
            )));
        }
        Ok(ImageEncoder { backbone, layer_spec })
    }

    pub fn feature_dim(&self) -> usize {
        self.layer_spec.iter().map(|&s| self.backbone.stage_channels(s)).sum()
    }

    /// `[N, feature_dim]`: pooled selected stages, concatenated in stage order.
    pub fn features<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let upto = *self.layer_spec.last().expect("nonempty");
        let outs = self.backbone.forward(tape, store, x, upto);
        let pooled: Vec<Var> = self.layer_spec.iter().map(|&s| tape.spatial_mean(outs[s - 1])).collect();
        if pooled.len() == 1 {
            pooled[0]
        } else {
            tape.concat_cols(&pooled)
        }
    }

    /// Last-stage feature grid `[N*L, C]` and the cell count `L`.
    pub fn spatial<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: Var) -> (Var, usize) {
        let n = self.backbone.num_stages();
        let outs = self.backbone.forward(tape, store, x, n);
        let last = outs[n - 1];
        let s = tape.shape(last);
        (tape.to_grid(last), s[2] * s[3])
    }

    /// Inference on `[N,C,H,W]` without recording gradients.
    pub fn encode_batch<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let f = self.features(&tape, store, xv);
        (*tape.value(f)).clone()
    }

    /// Feature of one `[C,H,W]` image.
    pub fn encode_image<T: Scalar>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> ImageFeature<T> {
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        let f = self.encode_batch(store, &image.clone().reshaped(shape));
        ImageFeature {
            vector: f.into_data(),
            layer_spec: self.layer_spec.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder(spec: Vec<usize>, config: BackboneConfig) -> (ParamStore<f64>, ImageEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, "backbone", "encoder", config, &mut rng);
        (store, ImageEncoder::new(bb, spec).unwrap())
    }

    #[test]
    fn feature_dim_is_sum_of_selected_stages() {
        let (store, enc) = encoder(vec![4, 2], BackboneConfig::standard());
        assert_eq!(enc.layer_spec, vec![2, 4]);
        assert_eq!(enc.feature_dim(), 64 + 256);
        let x = Tensor::zeros(&[3, 16, 16]);
        assert_eq!(enc.encode_image(&store, &x).vector.len(), 320);
    }

    #[test]
    fn rejects_bad_layer_spec() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bb = Backbone::new(&mut store, "b", "encoder", BackboneConfig::tiny(), &mut rng);
        assert!(ImageEncoder::new(bb.clone(), vec![]).is_err());
        assert!(ImageEncoder::new(bb, vec![3]).is_err());
    }

    #[test]
    fn constant_input_pools_to_single_activation() {
        let mut config = BackboneConfig::tiny();
        config.padding = Padding::Circular;
        let (store, enc) = encoder(vec![1, 2], config);
        let x = Tensor::full(&[1, 3, 8, 8], 0.7);
        let tape = Tape::new();
        let xv = tape.constant(x);
        let outs = enc.backbone.forward(&tape, &store, xv, 2);
        let pooled = tape.value(enc.features(&tape, &store, xv));
        let s1 = tape.value(outs[0]);
        // every spatial position of a constant input is identical
        for c in 0..8 {
            let first = s1.data()[c * 16];
            assert!((pooled.data()[c] - first).abs() < 1e-12);
        }
    }

    #[test]
    fn circular_padding_pool_is_shift_invariant() {
        let mut config = BackboneConfig::tiny();
        config.padding = Padding::Circular;
        let (store, enc) = encoder(vec![1, 2], config);
        let n = 16;
        let img = |shift: usize| {
            let mut d = vec![0.0; 3 * n * n];
            for c in 0..3 {
                for y in 0..n {
                    for x in 0..n {
                        let (yy, xx) = ((y + shift) % n, (x + 2 * shift) % n);
                        d[(c * n + y) * n + x] = (yy as f64 * 1.3 + (xx * xx) as f64 * 0.1 + c as f64).sin();
                    }
                }
            }
            Tensor::new(vec![3, n, n], d)
        };
        let a = enc.encode_image(&store, &img(0)).vector;
        let b = enc.encode_image(&store, &img(4)).vector;
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-5 * x.abs().max(1e-8), "{x} vs {y}");
        }
    }
}

//! Experiment configuration files.
//!
//! ```toml
//! [experiment]
//! name = "metric-mean-pool"
//! model = "metric"          # classifier | metric | captioner
//! seed = 0
//! precision = "f32"         # f32 | f64
//! backbone = "tiny"         # standard | tiny; overrides the model table
//! image_size = 64           # overrides the model table
//!
//! [data]
//! annotations = "data/annotations.tsv"
//! images = "data/images"
//! split_seed = 0
//! phrase_min_count = 10
//! word_min_count = 5
//! # demo_images = 200      # use a generated corpus instead of files
//! # demo_size = 64
//!
//! [output]
//! dir = "runs/metric-mean-pool"
//!
//! [metric]                  # or [classifier] / [captioner]
//! epochs = 60
//! batch_size = 32
//! ```
//!
//! Model tables accept every field of the corresponding model
//! configuration; unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::captioner::CaptionerConfig;
use crate::encoders::{BackboneConfig, ImageInput};
use crate::joint_embedding::MetricConfig;
use crate::nn::AdamConfig;
use crate::phrase_classifier::ClassifierConfig;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Classifier,
    Metric,
    Captioner,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Classifier => "classifier",
            ModelKind::Metric => "metric",
            ModelKind::Captioner => "captioner",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "classifier" => Some(ModelKind::Classifier),
            "metric" => Some(ModelKind::Metric),
            "captioner" => Some(ModelKind::Captioner),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Standard,
    Tiny,
}

impl BackboneKind {
    pub fn config(self) -> BackboneConfig {
        match self {
            BackboneKind::Standard => BackboneConfig::standard(),
            BackboneKind::Tiny => BackboneConfig::tiny(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub model: ModelKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub backbone: Option<BackboneKind>,
    #[serde(default)]
    pub image_size: Option<u32>,
}

fn default_phrase_min() -> usize {
    10
}

fn default_word_min() -> usize {
    5
}

fn default_demo_size() -> u32 {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default)]
    pub annotations: Option<PathBuf>,
    #[serde(default)]
    pub images: Option<PathBuf>,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default = "default_phrase_min")]
    pub phrase_min_count: usize,
    #[serde(default = "default_word_min")]
    pub word_min_count: usize,
    #[serde(default)]
    pub demo_images: Option<usize>,
    #[serde(default = "default_demo_size")]
    pub demo_size: u32,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            annotations: None,
            images: None,
            split_seed: 0,
            phrase_min_count: default_phrase_min(),
            word_min_count: default_word_min(),
            demo_images: None,
            demo_size: default_demo_size(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub data: DataSection,
    pub output: OutputSection,
    #[serde(default)]
    pub classifier: Option<ClassifierConfig>,
    #[serde(default)]
    pub metric: Option<MetricConfig>,
    #[serde(default)]
    pub captioner: Option<CaptionerConfig>,
}

impl ExperimentConfig {
    /// Parses and validates.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.experiment.name.trim().is_empty() {
            return bad("experiment.name is empty".into());
        }
        if self.experiment.image_size == Some(0) {
            return bad("experiment.image_size must be positive".into());
        }
        let d = &self.data;
        match d.demo_images {
            Some(0) => return bad("data.demo_images must be positive".into()),
            Some(_) if d.demo_size < 8 => return bad("data.demo_size must be at least 8".into()),
            Some(_) => {}
            None if d.annotations.is_none() || d.images.is_none() => {
                return bad("data needs annotations and images, or demo_images".into())
            }
            None => {}
        }
        if d.phrase_min_count == 0 || d.word_min_count == 0 {
            return bad("data minimum counts must be at least 1".into());
        }
        match self.experiment.model {
            ModelKind::Classifier => {
                let c = self.classifier_config();
                check_common(c.epochs, c.batch_size, c.patience, &c.backbone, &c.layer_spec, &c.input)?;
                check_optimizer(&c.optimizer)?;
                if c.hidden == 0 {
                    return bad("classifier.hidden must be positive".into());
                }
            }
            ModelKind::Metric => {
                let c = self.metric_config();
                check_common(c.epochs, c.batch_size, c.patience, &c.backbone, &c.layer_spec, &c.input)?;
                check_optimizer(&c.optimizer)?;
                if c.joint_dim == 0 || c.word_dim == 0 || c.lstm_hidden == 0 {
                    return bad("metric dimensions must be positive".into());
                }
            }
            ModelKind::Captioner => {
                let c = self.captioner_config();
                let last = c.backbone.stages.len();
                check_common(c.epochs, c.batch_size, c.patience, &c.backbone, &[last], &c.input)?;
                for (k, lr) in [("encoder_lr", c.encoder_lr), ("decoder_lr", c.decoder_lr)] {
                    if !(lr.is_finite() && lr >= 0.0) {
                        return bad(format!("captioner.{k} must be a nonnegative number"));
                    }
                }
                if c.beam == 0 || c.max_len == 0 || c.max_train_len == 0 {
                    return bad("captioner beam and lengths must be positive".into());
                }
                if c.embed_dim == 0 || c.hidden == 0 || c.attention_dim == 0 {
                    return bad("captioner dimensions must be positive".into());
                }
            }
        }
        Ok(())
    }

    fn overrides(&self, backbone: &mut BackboneConfig, input: &mut ImageInput, seed: &mut u64) {
        if let Some(b) = self.experiment.backbone {
            *backbone = b.config();
        }
        if let Some(s) = self.experiment.image_size {
            input.size = s;
        }
        *seed = self.experiment.seed;
    }

    /// Model configuration with the experiment-level overrides and the
    /// output checkpoint directory applied.
    pub fn classifier_config(&self) -> ClassifierConfig {
        let mut c = self.classifier.clone().unwrap_or_default();
        self.overrides(&mut c.backbone, &mut c.input, &mut c.seed);
        c
    }

    pub fn metric_config(&self) -> MetricConfig {
        let mut c = self.metric.clone().unwrap_or_default();
        self.overrides(&mut c.backbone, &mut c.input, &mut c.seed);
        c
    }

    pub fn captioner_config(&self) -> CaptionerConfig {
        let mut c = self.captioner.clone().unwrap_or_default();
        self.overrides(&mut c.backbone, &mut c.input, &mut c.seed);
        c
    }

    /// Writes the serialized configuration as `config.toml` under the output
    /// directory.
    pub fn write_copy(&self) -> Result<PathBuf> {
        let dir = &self.output.dir;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn check_common(
    epochs: usize,
    batch: usize,
    patience: Option<usize>,
    backbone: &BackboneConfig,
    layer_spec: &[usize],
    input: &ImageInput,
) -> Result<()> {
    let bad = |m: String| Err(Error::Config(m));
    if epochs == 0 || batch == 0 {
        return bad("epochs and batch_size must be positive".into());
    }
    if patience == Some(0) {
        return bad("patience must be at least 1".into());
    }
    if backbone.stages.is_empty() {
        return bad("backbone has no stages".into());
    }
    if layer_spec.is_empty() || layer_spec.iter().any(|&l| l == 0 || l > backbone.stages.len()) {
        return bad(format!(
            "layer_spec {layer_spec:?} must name stages 1..={}",
            backbone.stages.len()
        ));
    }
    if (input.size as usize) < backbone.total_stride() {
        return bad(format!("image size {} is below the backbone stride {}", input.size, backbone.total_stride()));
    }
    if input.std.iter().any(|&s| s <= 0.0) {
        return bad("input std must be positive".into());
    }
    Ok(())
}

fn check_optimizer(o: &AdamConfig) -> Result<()> {
    let ok = |v: f64| v.is_finite() && v >= 0.0;
    if !ok(o.lr) || !o.group_lr.values().all(|&v| ok(v)) || !ok(o.weight_decay) {
        return Err(Error::Config("optimizer rates must be nonnegative numbers".into()));
    }
    if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 {
        return Err(Error::Config("optimizer betas must lie in [0, 1) and eps be positive".into()));
    }
    Ok(())
}

//! Experiment configuration: one TOML file with a section per module.
//!
//! Unknown keys are rejected everywhere, every field has a default so a
//! minimal file works, and the canonical rendering round-trips
//! losslessly (parse -> render -> parse is the identity, and the
//! rendering is a fixed point).

use anyhow::{bail, Context, Result};
use rdd_core::data::{load_cifar10_dir, load_image_dir, toy_shapes, CifarSplit, Dataset};
use rdd_core::denoiser::{DenoiserConfig, DenoiserKind};
use rdd_core::features::ClassifierConfig;
use rdd_core::losses::{LossWeights, OmegaRule};
use rdd_core::trainer::{
    suggested_stage_temperature, BaseTrainConfig, ClassifierTrainConfig, DistillConfig, Method,
};
use rdd_core::util::{sha256_hex, stream_rng};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every purpose derives its own stream from it.
    #[serde(default)]
    pub seed: u64,
    /// All artifacts land under this directory.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub classifier: ClassifierSection,
    #[serde(default)]
    pub base: BaseSection,
    #[serde(default)]
    pub distill: DistillSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetSource {
    /// Built-in procedural dataset of filled shapes, one class each.
    ToyShapes,
    /// CIFAR-10 binary batches under `path`.
    Cifar10,
    /// Directory of class subdirectories holding images.
    ImageDir,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub source: DatasetSource,
    /// Data location for the file-backed sources; unused for toy-shapes.
    pub path: PathBuf,
    /// Which CIFAR-10 split to load.
    pub split: String,
    /// Expected square image size; toy-shapes generates at this size.
    pub resolution: usize,
    /// Images per class for toy-shapes.
    pub per_class: usize,
    /// Collapse image-dir images to one channel.
    pub grayscale: bool,
    /// Train class-conditional denoisers.
    pub conditional: bool,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            source: DatasetSource::ToyShapes,
            path: PathBuf::new(),
            split: "train".into(),
            resolution: 16,
            per_class: 64,
            grayscale: true,
            conditional: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Image channels the denoiser consumes and produces.
    pub channels: usize,
    /// Width of the first convolution stage.
    pub base_width: usize,
    /// Dimension of the sinusoidal time embedding.
    pub time_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            channels: 1,
            base_width: 8,
            time_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSection {
    pub base_width: usize,
    /// Spatial size of the tapped feature map.
    pub final_hw: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub iterations: usize,
    pub clip_norm: f64,
    pub holdout_fraction: f64,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        Self {
            base_width: 8,
            final_hw: 4,
            batch_size: 32,
            lr: 1e-3,
            warmup: 50,
            iterations: 600,
            clip_norm: 5.0,
            holdout_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseSection {
    /// Step-grid resolution the base model trains against.
    pub steps: u32,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub iterations: usize,
    pub ema_decay: f64,
    pub clip_norm: f64,
}

impl Default for BaseSection {
    fn default() -> Self {
        Self {
            steps: 64,
            batch_size: 16,
            lr: 1e-3,
            warmup: 50,
            iterations: 1200,
            ema_decay: 0.995,
            clip_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    /// Objective: "relational", "pooled-feature", or "step-match".
    pub method: Method,
    /// Step count of the starting teacher.
    pub start_steps: u32,
    /// Step count to stop halving at.
    pub end_steps: u32,
    /// Weight of the cross-instance relation term.
    pub alpha: f64,
    /// Weight of the memory relation term.
    pub beta: f64,
    pub tau_pooled: f64,
    pub tau_instance: f64,
    pub tau_memory: f64,
    /// Apply the tuned pooled-feature temperatures on the final halving
    /// stages instead of `tau_pooled`.
    pub stage_temperatures: bool,
    pub disable_instance_set: bool,
    pub disable_memory: bool,
    /// Add the pixel-space step-match term on top of the feature terms.
    pub add_step_match: bool,
    pub queue_capacity: usize,
    pub queue_per_image: usize,
    pub queue_sample: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub iterations: usize,
    pub ema_decay: f64,
    pub clip_norm: f64,
}

impl Default for DistillSection {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            method: Method::Relational,
            start_steps: 64,
            end_steps: 1,
            alpha: w.alpha,
            beta: w.beta,
            tau_pooled: w.tau_pooled,
            tau_instance: w.tau_instance,
            tau_memory: w.tau_memory,
            stage_temperatures: true,
            disable_instance_set: false,
            disable_memory: false,
            add_step_match: false,
            queue_capacity: 1024,
            queue_per_image: 8,
            queue_sample: 128,
            batch_size: 8,
            lr: 5e-4,
            warmup: 20,
            iterations: 350,
            ema_decay: 0.995,
            clip_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n_samples: usize,
    pub batch: usize,
    /// Step counts to report when evaluating a distilled chain.
    pub steps: Vec<u32>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n_samples: 192,
            batch: 32,
            steps: vec![4, 2, 1],
        }
    }
}

impl ExperimentConfig {
    /// Parses a TOML file, pointing at the offending line/field on
    /// error.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| anyhow::anyhow!("{e}"))
            .with_context(|| format!("invalid config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical rendering; parsing it yields an identical config.
    pub fn canonical_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("config serializes to TOML")
    }

    /// Content hash of the canonical rendering, recorded for
    /// provenance.
    pub fn content_hash(&self) -> Result<String> {
        Ok(sha256_hex(self.canonical_toml()?.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        match d.source {
            DatasetSource::ToyShapes => {
                if d.per_class == 0 || d.resolution < 8 {
                    bail!("dataset: toy-shapes needs per_class >= 1 and resolution >= 8");
                }
            }
            DatasetSource::Cifar10 | DatasetSource::ImageDir => {
                if d.path.as_os_str().is_empty() {
                    bail!("dataset: source {:?} needs a path", d.source);
                }
            }
        }
        if d.split != "train" && d.split != "test" {
            bail!("dataset: split must be \"train\" or \"test\", got {:?}", d.split);
        }
        if self.distill.start_steps < self.distill.end_steps {
            bail!(
                "distill: start_steps {} below end_steps {}",
                self.distill.start_steps,
                self.distill.end_steps
            );
        }
        // Assembling the per-module configs runs their own validators.
        self.classifier_train_config().validate().map_err(anyhow::Error::from)?;
        self.classifier_model_config()
            .validate()
            .map_err(anyhow::Error::from)?;
        self.base_train_config().validate().map_err(anyhow::Error::from)?;
        self.denoiser_config(None).validate().map_err(anyhow::Error::from)?;
        self.distill_config_for(self.distill.method, self.distill.start_steps, self.distill.end_steps)
            .validate()
            .map_err(anyhow::Error::from)?;
        if self.eval.n_samples < 2 || self.eval.batch == 0 {
            bail!("eval: n_samples must be >= 2 and batch >= 1");
        }
        if self.eval.steps.is_empty() {
            bail!("eval: steps list is empty");
        }
        Ok(())
    }

    /// Loads the dataset the config describes and checks its geometry.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let d = &self.dataset;
        let ds = match d.source {
            DatasetSource::ToyShapes => {
                let mut rng = stream_rng(self.seed, "dataset");
                toy_shapes(d.per_class, d.resolution, &mut rng)?
            }
            DatasetSource::Cifar10 => {
                let split = if d.split == "train" {
                    CifarSplit::Train
                } else {
                    CifarSplit::Test
                };
                load_cifar10_dir(&d.path, split)?
            }
            DatasetSource::ImageDir => load_image_dir(&d.path, d.grayscale)?,
        };
        let (c, h, w) = ds.resolution();
        if h != d.resolution || w != d.resolution {
            bail!(
                "dataset: config expects {0}x{0} images, loaded {h}x{w}",
                d.resolution
            );
        }
        if c != self.model.channels {
            bail!(
                "dataset: model is configured for {} channels, data has {c}",
                self.model.channels
            );
        }
        Ok(ds)
    }

    pub fn classifier_model_config(&self) -> ClassifierConfig {
        ClassifierConfig {
            in_channels: self.model.channels,
            image_hw: self.dataset.resolution,
            // Four toy classes; file-backed datasets override at load
            // time through `classifier_model_config_for`.
            num_classes: 4,
            base_width: self.classifier.base_width,
            final_hw: self.classifier.final_hw,
        }
    }

    pub fn classifier_model_config_for(&self, dataset: &Dataset) -> ClassifierConfig {
        ClassifierConfig {
            num_classes: dataset.num_classes,
            ..self.classifier_model_config()
        }
    }

    pub fn classifier_train_config(&self) -> ClassifierTrainConfig {
        let c = &self.classifier;
        ClassifierTrainConfig {
            batch_size: c.batch_size,
            lr: c.lr,
            warmup: c.warmup,
            iterations: c.iterations,
            clip_norm: c.clip_norm,
            holdout_fraction: c.holdout_fraction,
            seed: self.seed,
        }
    }

    pub fn denoiser_config(&self, num_classes: Option<usize>) -> DenoiserConfig {
        DenoiserConfig {
            kind: DenoiserKind::Unet,
            in_channels: self.model.channels,
            image_hw: self.dataset.resolution,
            base_width: self.model.base_width,
            time_dim: self.model.time_dim,
            num_classes,
        }
    }

    pub fn base_train_config(&self) -> BaseTrainConfig {
        let b = &self.base;
        BaseTrainConfig {
            steps: b.steps,
            batch_size: b.batch_size,
            lr: b.lr,
            warmup: b.warmup,
            iterations: b.iterations,
            ema_decay: b.ema_decay,
            clip_norm: b.clip_norm,
            omega: OmegaRule::TruncatedSnr,
            seed: self.seed,
        }
    }

    /// Stage configuration for one halving step of the chain. The stage
    /// seed folds in the destination step count so every stage draws
    /// distinct streams from the same master seed.
    pub fn distill_config_for(&self, method: Method, from_steps: u32, to_steps: u32) -> DistillConfig {
        let d = &self.distill;
        let mut weights = LossWeights {
            alpha: d.alpha,
            beta: d.beta,
            tau_pooled: d.tau_pooled,
            tau_instance: d.tau_instance,
            tau_memory: d.tau_memory,
            omega_clip: OmegaRule::TruncatedSnr,
        };
        if d.stage_temperatures {
            if let Some(tau) = suggested_stage_temperature(from_steps, to_steps) {
                weights.tau_pooled = tau;
            }
        }
        DistillConfig {
            method,
            weights,
            disable_instance_set: d.disable_instance_set,
            disable_memory: d.disable_memory,
            add_step_match: d.add_step_match,
            queue_capacity: d.queue_capacity,
            queue_per_image: d.queue_per_image,
            queue_sample: d.queue_sample,
            batch_size: d.batch_size,
            lr: d.lr,
            warmup: d.warmup,
            iterations: d.iterations,
            ema_decay: d.ema_decay,
            clip_norm: d.clip_norm,
            seed: self.seed * 1000 + to_steps as u64,
        }
    }
}

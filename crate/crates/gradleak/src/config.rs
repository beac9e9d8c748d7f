//! Declarative experiment configuration: TOML files with `[dataset]`,
//! `[model]`, `[train]`, `[attack]`, and `[defense]` sections. All fields have
//! defaults except the experiment name; the shipped configs under `configs/`
//! document the schema.

use crate::attacks::{self, AttackConfig, Distance};
use crate::datasets::{load_cifar10, synthetic_dataset, Dataset};
use crate::defenses::DefenseConfig;
use crate::error::{Error, Result};
use crate::fedsim::TrainConfig;
use crate::metrics::AlignCost;
use crate::models::{LeNetArch, MlpArch, ModelArch, ModelConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RepeatMode {
    /// Each repetition trains from scratch with its own seed.
    #[default]
    Full,
    /// One training trajectory; repetitions differ only in attack seeds.
    AttackSeeds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    Synthetic,
    Cifar10,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub classes: usize,
    pub train_size: usize,
    pub heldout_size: usize,
    /// (channels, height, width); fixed to 3x32x32 for CIFAR-10.
    pub image: [usize; 3],
    pub seed: u64,
    /// Directory with the standard binary batches (CIFAR-10 only).
    pub path: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            classes: 4,
            train_size: 256,
            heldout_size: 64,
            image: [3, 16, 16],
            seed: 0,
            path: None,
        }
    }
}

impl DatasetConfig {
    pub fn image_tuple(&self) -> (usize, usize, usize) {
        match self.kind {
            DatasetKind::Cifar10 => (3, 32, 32),
            DatasetKind::Synthetic => (self.image[0], self.image[1], self.image[2]),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self.kind {
            DatasetKind::Cifar10 => 10,
            DatasetKind::Synthetic => self.classes,
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        match self.kind {
            DatasetKind::Synthetic => Ok(synthetic_dataset(
                self.classes,
                self.train_size,
                self.heldout_size,
                self.image_tuple(),
                self.seed,
            )),
            DatasetKind::Cifar10 => {
                let path = self.path.as_ref().ok_or_else(|| {
                    Error::Config("dataset.path is required for cifar10".into())
                })?;
                load_cifar10(path)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self.kind {
            DatasetKind::Synthetic => {
                if self.classes < 2 {
                    return Err(Error::Config("synthetic dataset needs >= 2 classes".into()));
                }
                if self.train_size == 0 {
                    return Err(Error::Config("dataset.train_size must be > 0".into()));
                }
                let (_, h, w) = self.image_tuple();
                if h < 8 || w < 8 {
                    return Err(Error::Config(format!(
                        "synthetic images must be at least 8x8, got {h}x{w}"
                    )));
                }
            }
            DatasetKind::Cifar10 => {
                if self.path.is_none() {
                    return Err(Error::Config("dataset.path is required for cifar10".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Lenet,
    Mlp,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub batchnorm: bool,
    pub hidden: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub kernel: usize,
    pub bn_momentum: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::Lenet,
            batchnorm: true,
            hidden: 768,
            conv1: 12,
            conv2: 24,
            kernel: 5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelSection {
    pub fn build(&self, image: (usize, usize, usize), classes: usize) -> ModelConfig {
        let arch = match self.kind {
            ModelKind::Lenet => ModelArch::LeNet(LeNetArch {
                input: image,
                num_classes: classes,
                conv1: self.conv1,
                conv2: self.conv2,
                kernel: self.kernel,
                hidden: self.hidden,
                batchnorm: self.batchnorm,
            }),
            ModelKind::Mlp => ModelArch::Mlp(MlpArch {
                input: image,
                hidden: self.hidden,
                num_classes: classes,
            }),
        };
        let mut cfg = ModelConfig::new(arch);
        cfg.bn_momentum = self.bn_momentum;
        cfg
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub preset: String,
    pub iterations: Option<usize>,
    pub seeds: Option<usize>,
    pub max_pairs: Option<usize>,
    pub lr: Option<f64>,
    pub distance: Option<Distance>,
    pub cosine_per_layer: Option<bool>,
    pub multi_observation: Option<bool>,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            preset: "dlg".into(),
            iterations: None,
            seeds: None,
            max_pairs: None,
            lr: None,
            distance: None,
            cosine_per_layer: None,
            multi_observation: None,
        }
    }
}

impl AttackSection {
    pub fn build(&self) -> Result<AttackConfig> {
        let mut cfg = attacks::preset(&self.preset)?;
        if let Some(v) = self.iterations {
            cfg.attack_iterations = v;
        }
        if let Some(v) = self.seeds {
            cfg.seeds = v;
        }
        if let Some(v) = self.max_pairs {
            cfg.max_pairs = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.distance {
            cfg.distance = v;
        }
        if let Some(v) = self.cosine_per_layer {
            cfg.cosine_per_layer = v;
        }
        if let Some(v) = self.multi_observation {
            cfg.multi_observation = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn default_repetitions() -> usize {
    5
}

fn default_alignment() -> AlignCost {
    AlignCost::Perceptual
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_alignment")]
    pub alignment_cost: AlignCost,
    /// Attack worker pool size; defaults to available parallelism.
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub repeat_mode: RepeatMode,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub defense: DefenseConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Config("name must not be empty".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be >= 1".into()));
        }
        self.dataset.validate()?;
        self.train.validate()?;
        self.defense.validate()?;
        let attack = self.attack.build()?;
        if attack.multi_observation && !self.train.repeated_batch {
            return Err(Error::Config(
                "multi-observation attacks require train.repeated_batch = true".into(),
            ));
        }
        if self.train.batch_size > 64 {
            return Err(Error::Config(
                "batch_size above 64 exceeds the alignment cap".into(),
            ));
        }
        if self.train.batch_size > self.dataset.train_size
            && self.dataset.kind == DatasetKind::Synthetic
        {
            return Err(Error::Config(format!(
                "batch_size {} exceeds dataset.train_size {}",
                self.train.batch_size, self.dataset.train_size
            )));
        }
        let image = self.dataset.image_tuple();
        if self.model.kind == ModelKind::Lenet && (image.1 % 4 != 0 || image.2 % 4 != 0) {
            return Err(Error::Config(format!(
                "lenet needs image dims divisible by 4, got {}x{}",
                image.1, image.2
            )));
        }
        if attack.alpha_bn > 0.0
            && !(self.model.kind == ModelKind::Lenet && self.model.batchnorm)
        {
            return Err(Error::Config(
                "attack uses BN regularization but the model has no BatchNorm layers".into(),
            ));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model
            .build(self.dataset.image_tuple(), self.dataset.num_classes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DESK: &str = r#"
name = "desk"
repetitions = 2
base_seed = 7

[dataset]
kind = "synthetic"
classes = 4
train_size = 64
heldout_size = 16
image = [3, 16, 16]

[train]
lr = 0.01
total_iterations = 400
attack_rate = 200
batch_size = 4

[attack]
preset = "dlg"
iterations = 50

[defense]
kind = "gaussian"
sigma = 0.1
"#;

    #[test]
    fn parses_a_full_config() {
        let cfg: ExperimentConfig = toml::from_str(DESK).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.name, "desk");
        assert_eq!(cfg.repetitions, 2);
        assert_eq!(cfg.train.total_iterations, 400);
        let attack = cfg.attack.build().unwrap();
        assert_eq!(attack.attack_iterations, 50);
        assert_eq!(cfg.defense.sigma, 0.1);
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg: ExperimentConfig = toml::from_str("name = \"mini\"").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.repetitions, 5);
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.train.attack_rate, 500);
        assert_eq!(cfg.attack.preset, "dlg");
    }

    #[test]
    fn rejects_unknown_fields_and_bad_values() {
        assert!(toml::from_str::<ExperimentConfig>("name = \"x\"\nbogus = 1").is_err());
        let mut cfg: ExperimentConfig = toml::from_str("name = \"x\"").unwrap();
        cfg.train.attack_rate = 300; // does not divide 10_000
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.train.attack_rate = 500;
        cfg.attack.preset = "unknown".into();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn multi_observation_requires_repeated_batches() {
        let mut cfg: ExperimentConfig = toml::from_str("name = \"x\"").unwrap();
        cfg.attack.preset = "multiple_updates".into();
        cfg.train.repeated_batch = false;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.train.repeated_batch = true;
        cfg.validate().unwrap();
    }

    #[test]
    fn bn_regularization_needs_a_bn_model() {
        let mut cfg: ExperimentConfig = toml::from_str("name = \"x\"").unwrap();
        cfg.attack.preset = "gradinversion".into();
        cfg.model.batchnorm = false;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}

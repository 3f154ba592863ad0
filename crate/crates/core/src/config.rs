//! JSON run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::AgentConfig;
use crate::data::{generate_synthetic, holdout_split, load_cifar10_batch, load_idx, LabeledImageSet, Split};
use crate::error::{Error, Result};
use crate::model::ToyCnnConfig;
use crate::pipeline::{PruneRunConfig, TimingConfig};
use crate::reinforce::TrainerConfig;
use crate::rng;
use crate::tensor::Tensor;
use crate::train::{FitConfig, OptimizerKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Synthetic,
    Idx,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Synthetic only.
    pub num_classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub image_shape: [usize; 3],
    /// IDX only.
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// CIFAR-10 only.
    pub cifar_train: Vec<PathBuf>,
    pub cifar_test: Option<PathBuf>,
    /// Share of the training set held out for validation.
    pub val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::Synthetic,
            num_classes: 10,
            per_class: 100,
            test_per_class: 50,
            image_shape: [1, 16, 16],
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            cifar_train: Vec::new(),
            cifar_test: None,
            val_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub name: String,
    pub widths: Vec<usize>,
    pub residual: bool,
    pub coupled: bool,
    /// Train at `widths`, then double every prunable conv with exact
    /// duplicates of its filters.
    pub plant_duplicates: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = ToyCnnConfig::default();
        Self { name: t.name, widths: t.widths, residual: false, coupled: false, plant_duplicates: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneSection {
    pub bound: f64,
    pub layers: Option<Vec<usize>>,
    pub trainer: TrainerConfig,
    pub agent: AgentConfig,
    pub rollout_finetune: FitConfig,
    pub post_finetune: FitConfig,
    pub fixed_pstar: bool,
    pub timing: Option<TimingConfig>,
    /// Overrides the pruning seed otherwise derived from the root seed.
    pub seed: Option<u64>,
}

impl Default for PruneSection {
    fn default() -> Self {
        let p = PruneRunConfig::default();
        Self {
            bound: p.bound,
            layers: p.layers,
            trainer: p.trainer,
            agent: p.agent,
            rollout_finetune: p.rollout_finetune,
            post_finetune: p.post_finetune,
            fixed_pstar: p.fixed_pstar,
            timing: p.timing,
            seed: None,
        }
    }
}

/// Everything a command needs. Every random choice derives from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelSection,
    pub baseline: FitConfig,
    pub prune: PruneSection,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            model: ModelSection::default(),
            baseline: FitConfig {
                epochs: 10,
                batch_size: 32,
                optimizer: OptimizerKind::Adam,
                lr: 2e-3,
                ..FitConfig::default()
            },
            prune: PruneSection::default(),
        }
    }
}

/// Seed stream tags.
const DATA: u64 = 1;
const SPLIT: u64 = 2;
const INIT: u64 = 3;
const BASELINE: u64 = 4;
const PRUNE: u64 = 5;
const TEST_DATA: u64 = 6;

pub struct Datasets {
    pub train: LabeledImageSet,
    pub val: LabeledImageSet,
    pub test: Option<LabeledImageSet>,
}

impl RunConfigFile {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.prune_config().validate()?;
        if !(self.data.val_fraction > 0.0 && self.data.val_fraction < 1.0) {
            return Err(Error::Config(format!("data.val_fraction {} must lie in (0, 1)", self.data.val_fraction)));
        }
        if self.baseline.batch_size == 0 || self.prune.post_finetune.batch_size == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        Ok(())
    }

    /// Network builder settings for the given data shape.
    pub fn toy_config(&self, num_classes: usize, input_shape: [usize; 3]) -> ToyCnnConfig {
        ToyCnnConfig {
            name: self.model.name.clone(),
            widths: self.model.widths.clone(),
            num_classes,
            input_shape,
            residual: self.model.residual,
            coupled: self.model.coupled,
            seed: rng::derive_seed(self.seed, &[INIT]),
        }
    }

    pub fn baseline_seed(&self) -> u64 {
        rng::derive_seed(self.seed, &[BASELINE])
    }

    pub fn prune_config(&self) -> PruneRunConfig {
        let p = &self.prune;
        PruneRunConfig {
            bound: p.bound,
            layers: p.layers.clone(),
            trainer: p.trainer.clone(),
            agent: p.agent.clone(),
            rollout_finetune: p.rollout_finetune.clone(),
            post_finetune: p.post_finetune.clone(),
            fixed_pstar: p.fixed_pstar,
            seed: p.seed.unwrap_or_else(|| rng::derive_seed(self.seed, &[PRUNE])),
            timing: p.timing.clone(),
        }
    }

    /// Loads or generates the data and holds out the validation split.
    pub fn datasets(&self) -> Result<Datasets> {
        let d = &self.data;
        let (full, test) = match d.kind {
            DataKind::Synthetic => {
                let train =
                    generate_synthetic(d.num_classes, d.per_class, d.image_shape, rng::derive_seed(self.seed, &[DATA]))
                        .map_err(|e| Error::Config(e.to_string()))?;
                let test = if d.test_per_class > 0 {
                    let t = generate_synthetic(
                        d.num_classes,
                        d.test_per_class,
                        d.image_shape,
                        rng::derive_seed(self.seed, &[TEST_DATA]),
                    )
                    .map_err(|e| Error::Config(e.to_string()))?;
                    Some(t.with_split(Split::Test))
                } else {
                    None
                };
                (train, test)
            }
            DataKind::Idx => {
                let need = |p: &Option<PathBuf>, key: &str| {
                    p.clone().ok_or_else(|| Error::Config(format!("data.{key} is required for idx data")))
                };
                let train = load_idx(&need(&d.train_images, "train_images")?, &need(&d.train_labels, "train_labels")?)?;
                let test = match (&d.test_images, &d.test_labels) {
                    (Some(i), Some(l)) => Some(load_idx(i, l)?.with_split(Split::Test)),
                    (None, None) => None,
                    _ => return Err(Error::Config("data.test_images and data.test_labels go together".into())),
                };
                (train, test)
            }
            DataKind::Cifar10 => {
                if d.cifar_train.is_empty() {
                    return Err(Error::Config("data.cifar_train lists no batch files".into()));
                }
                let parts = d.cifar_train.iter().map(|p| load_cifar10_batch(p)).collect::<Result<Vec<_>>>()?;
                let train = concat(&parts)?;
                let test =
                    d.cifar_test.as_deref().map(load_cifar10_batch).transpose()?.map(|t| t.with_split(Split::Test));
                (train, test)
            }
        };
        let (train, val) = holdout_split(&full, d.val_fraction, rng::derive_seed(self.seed, &[SPLIT]))?;
        Ok(Datasets { train, val, test })
    }
}

fn concat(parts: &[LabeledImageSet]) -> Result<LabeledImageSet> {
    let shape = parts[0].image_shape();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut classes = 0;
    for p in parts {
        if p.image_shape() != shape {
            return Err(Error::DataFormat("data batches disagree on image shape".into()));
        }
        data.extend_from_slice(p.images().data());
        labels.extend_from_slice(p.labels());
        classes = classes.max(p.num_classes());
    }
    let n = labels.len();
    LabeledImageSet::new(Tensor::new(vec![n, shape[0], shape[1], shape[2]], data)?, labels, classes, Split::Train)
}

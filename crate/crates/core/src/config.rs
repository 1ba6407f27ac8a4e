//! Flat JSON experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, CifarKind, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::mask::UnmixMode;
use crate::model::{InitMode, MimoConfig};
use crate::rng::Rng;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnmixKind {
    None,
    Full,
    Partial,
    Fadeout,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
    Cifar100,
}

/// Every setting of a run. Missing keys take the desk-scale defaults;
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,

    pub m: usize,
    pub depth: usize,
    pub width: usize,
    pub num_classes: usize,
    pub unmix: UnmixKind,
    pub partial_fraction: f64,
    pub fadeout_end_epoch: usize,
    pub init: InitMode,

    pub batch_size: usize,
    pub batch_repetition: usize,
    pub input_repetition_rate: f64,
    pub epochs: usize,
    pub base_lr_numerator: f64,
    pub decay_steps: Vec<usize>,
    pub decay_factor: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub warmup_epochs: usize,
    pub rebalance_loss: bool,
    pub mix_alpha: f64,
    pub augment: bool,
    pub eval_batch_size: usize,

    pub dataset: DatasetKind,
    /// File or directory in CIFAR binary layout; unused for synthetic data.
    pub data_path: Option<PathBuf>,
    pub val_fraction: f64,
    pub synthetic_n_per_class: usize,
    pub synthetic_noise_std: f64,

    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            seed: 0,
            m: 2,
            depth: 10,
            width: 1,
            num_classes: 4,
            unmix: UnmixKind::None,
            partial_fraction: 0.25,
            fadeout_end_epoch: 10,
            init: InitMode::Independent,
            batch_size: t.batch_size,
            batch_repetition: t.batch_repetition,
            input_repetition_rate: t.input_repetition_rate,
            epochs: t.epochs,
            base_lr_numerator: t.base_lr_numerator,
            decay_steps: t.decay_steps,
            decay_factor: t.decay_factor,
            weight_decay: t.weight_decay,
            momentum: t.momentum,
            warmup_epochs: t.warmup_epochs,
            rebalance_loss: t.rebalance_loss,
            mix_alpha: t.mix_alpha,
            augment: t.augment,
            eval_batch_size: t.eval_batch_size,
            dataset: DatasetKind::Synthetic,
            data_path: None,
            val_fraction: 0.5,
            synthetic_n_per_class: 100,
            synthetic_noise_std: 1.0,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    /// Parses JSON text. Syntax errors and unknown keys are reported as
    /// configuration errors.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(v) => Error::Config(v.into_iter().map(|m| format!("{}: {m}", path.display())).collect()),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn unmix_mode(&self) -> UnmixMode {
        match self.unmix {
            UnmixKind::None => UnmixMode::None,
            UnmixKind::Full => UnmixMode::Full,
            UnmixKind::Partial => UnmixMode::Partial {
                fraction: self.partial_fraction,
            },
            UnmixKind::Fadeout => UnmixMode::Fadeout {
                end_epoch: self.fadeout_end_epoch,
            },
        }
    }

    pub fn mimo(&self) -> MimoConfig {
        MimoConfig {
            m: self.m,
            depth: self.depth,
            width: self.width,
            num_classes: self.num_classes,
            unmix_mode: self.unmix_mode(),
            init_mode: self.init,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            batch_repetition: self.batch_repetition,
            input_repetition_rate: self.input_repetition_rate,
            epochs: self.epochs,
            base_lr_numerator: self.base_lr_numerator,
            decay_steps: self.decay_steps.clone(),
            decay_factor: self.decay_factor,
            weight_decay: self.weight_decay,
            momentum: self.momentum,
            warmup_epochs: self.warmup_epochs,
            rebalance_loss: self.rebalance_loss,
            mix_alpha: self.mix_alpha,
            seed: self.seed,
            augment: self.augment,
            eval_batch_size: self.eval_batch_size,
        }
    }

    fn cifar_kind(&self) -> Option<CifarKind> {
        match self.dataset {
            DatasetKind::Synthetic => None,
            DatasetKind::Cifar10 => Some(CifarKind::Cifar10),
            DatasetKind::Cifar100 => Some(CifarKind::Cifar100),
        }
    }

    /// Every violated invariant, across model, training and data settings.
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.mimo().violations();
        v.extend(self.train().violations());
        if self.m != 2 && self.epochs > 0 {
            v.push(format!("training needs m = 2 (got {})", self.m));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            v.push(format!("val_fraction {} not in (0, 1)", self.val_fraction));
        }
        match self.cifar_kind() {
            None => {
                if self.synthetic_n_per_class == 0 {
                    v.push("synthetic_n_per_class must be positive".into());
                }
                if !(self.synthetic_noise_std >= 0.0 && self.synthetic_noise_std.is_finite()) {
                    v.push(format!("synthetic_noise_std {} must be non-negative", self.synthetic_noise_std));
                }
                if self.num_classes < 2 || self.num_classes > 256 {
                    v.push(format!("synthetic data supports 2..=256 classes, got {}", self.num_classes));
                }
            }
            Some(kind) => {
                match &self.data_path {
                    None => v.push(format!("dataset {:?} needs data_path", self.dataset)),
                    Some(p) if !p.exists() => v.push(format!("data_path {} does not exist", p.display())),
                    Some(_) => {}
                }
                if self.num_classes > kind.class_count() {
                    v.push(format!(
                        "num_classes {} exceeds the {} classes of the record layout",
                        self.num_classes,
                        kind.class_count()
                    ));
                }
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() { Ok(()) } else { Err(Error::Config(v)) }
    }

    /// The full dataset before splitting. `rng` is only used for synthetic
    /// generation.
    pub fn load_dataset(&self, rng: &mut Rng) -> Result<Dataset> {
        match self.cifar_kind() {
            None => data::gen_synthetic(
                SyntheticSpec {
                    class_count: self.num_classes,
                    n_per_class: self.synthetic_n_per_class,
                    noise_std: self.synthetic_noise_std,
                },
                rng,
            ),
            Some(kind) => {
                let path = self
                    .data_path
                    .as_deref()
                    .ok_or_else(|| Error::Config(vec!["data_path is required".into()]))?;
                data::load_cifar_classes(path, kind, self.num_classes)
            }
        }
    }

    /// `(train, val)` exactly as the `train` command builds them.
    pub fn load_split(&self, rng: &mut Rng) -> Result<(Dataset, Dataset)> {
        let full = self.load_dataset(rng)?;
        if full.is_empty() {
            return Err(Error::InvalidArgument("dataset holds no examples; refusing to train".into()));
        }
        full.split(self.val_fraction, rng)
    }
}

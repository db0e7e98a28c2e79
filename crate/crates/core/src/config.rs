//! Experiment configuration.
//!
//! A config is a single TOML document. Only `dataset_name` is required; every
//! other key falls back to the defaults filled in by [`ExperimentConfig::from_toml_str`],
//! which is the one place defaults live. A saved config always spells out every
//! field, so reloading it reproduces the record exactly.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentSpec;
use crate::error::{Error, Result};

/// Environment variable that replaces `data_path` at load time.
pub const DATA_PATH_ENV: &str = "CATSTYLE_DATA_PATH";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Mnist,
    FashionMnist,
    Cifar10,
    ImageFolder,
    SyntheticBlocks,
}

impl DatasetName {
    pub const ALL: [DatasetName; 5] = [
        DatasetName::Mnist,
        DatasetName::FashionMnist,
        DatasetName::Cifar10,
        DatasetName::ImageFolder,
        DatasetName::SyntheticBlocks,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::FashionMnist => "fashion_mnist",
            DatasetName::Cifar10 => "cifar10",
            DatasetName::ImageFolder => "image_folder",
            DatasetName::SyntheticBlocks => "synthetic_blocks",
        }
    }

    pub fn is_color(&self) -> bool {
        matches!(self, DatasetName::Cifar10 | DatasetName::ImageFolder)
    }

    fn default_image_size(&self) -> (usize, usize) {
        match self {
            DatasetName::Cifar10 => (32, 32),
            DatasetName::ImageFolder => (96, 96),
            _ => (28, 28),
        }
    }

    fn default_clusters(&self) -> usize {
        match self {
            DatasetName::SyntheticBlocks => 2,
            _ => 10,
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DatasetName::ALL
            .iter()
            .copied()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::UnknownDataset {
                name: s.to_string(),
                known: known_datasets(),
            })
    }
}

fn known_datasets() -> String {
    DatasetName::ALL
        .iter()
        .map(|d| d.as_str())
        .collect::<Vec<_>>()
        .join(", ")
}

/// Augmentation-invariance weight for a dataset: 2 for the two MNIST-style
/// datasets, 4 for everything else.
pub fn default_beta_aug(dataset_name: &str) -> Result<f64> {
    Ok(match dataset_name.parse::<DatasetName>()? {
        DatasetName::Mnist | DatasetName::FashionMnist => 2.0,
        _ => 4.0,
    })
}

/// Encoder architecture family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Pick from `image_size`.
    Auto,
    /// Two strided convolutions and a dense layer (28x28 inputs).
    Conv28,
    /// Three down-sampling residual blocks plus one plain block (32x32).
    Resnet32,
    /// Four down-sampling residual blocks plus one plain block (96x96).
    Resnet96,
}

/// Parameters of the generated two-class fixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_per_class: usize,
    pub noise_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset_name: DatasetName,
    pub data_path: PathBuf,
    /// Concatenate the train and test splits.
    pub merge_train_test: bool,
    /// Keep only this many images (seeded uniform subset) when set to a
    /// positive number; 0 keeps everything.
    pub subset_size: usize,
    pub num_clusters: usize,
    pub style_dim: usize,
    pub sigma: f64,
    pub lambda: f64,
    pub beta_mi: f64,
    pub beta_aug: f64,
    pub beta_adv: f64,
    pub n_critic: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub total_encoder_steps: usize,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub grayscale: bool,
    pub image_size: (usize, usize),
    pub arch: Arch,
    /// Divides every channel and hidden-unit count of the networks.
    pub width_divisor: usize,
    /// Replace (leaky) ReLUs by smooth softplus-based variants.
    pub smooth_activations: bool,
    pub augmentation: AugmentSpec,
    pub synthetic: SyntheticSpec,
}

/// Mirror of [`ExperimentConfig`] with every field optional, as read from disk.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    dataset_name: Option<String>,
    data_path: Option<PathBuf>,
    merge_train_test: Option<bool>,
    subset_size: Option<usize>,
    num_clusters: Option<usize>,
    style_dim: Option<usize>,
    sigma: Option<f64>,
    lambda: Option<f64>,
    beta_mi: Option<f64>,
    beta_aug: Option<f64>,
    beta_adv: Option<f64>,
    n_critic: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    adam_beta1: Option<f64>,
    adam_beta2: Option<f64>,
    total_encoder_steps: Option<usize>,
    eval_every: Option<usize>,
    checkpoint_every: Option<usize>,
    seed: Option<u64>,
    grayscale: Option<bool>,
    image_size: Option<(usize, usize)>,
    arch: Option<Arch>,
    width_divisor: Option<usize>,
    smooth_activations: Option<bool>,
    augmentation: Option<RawAugment>,
    synthetic: Option<RawSynthetic>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAugment {
    enabled: Option<bool>,
    crop_area_range: Option<(f64, f64)>,
    crop_aspect_range: Option<(f64, f64)>,
    hflip_prob: Option<f64>,
    brightness_range: Option<(f64, f64)>,
    contrast_range: Option<(f64, f64)>,
    saturation_range: Option<(f64, f64)>,
    hue_range: Option<(f64, f64)>,
    channel_shuffle: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSynthetic {
    n_per_class: Option<usize>,
    noise_std: Option<f64>,
}

/// Reads, fills defaults, applies the data-path environment override and validates.
pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = ExperimentConfig::from_toml_str(&text).map_err(|e| match e {
        Error::ConfigParse { message, .. } => Error::ConfigParse {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })?;
    if let Ok(p) = std::env::var(DATA_PATH_ENV) {
        if !p.is_empty() {
            cfg.data_path = PathBuf::from(p);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_config(cfg: &ExperimentConfig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, cfg.to_toml_string()).map_err(|e| Error::io(path, e))
}

impl ExperimentConfig {
    /// Parses a TOML document and fills in every unspecified field.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::ConfigParse {
            path: PathBuf::new(),
            message: e.to_string(),
        })?;
        let name = raw.dataset_name.ok_or(Error::InvalidConfig {
            field: "dataset_name",
            message: "missing".into(),
        })?;
        let dataset: DatasetName = name.parse()?;
        let aug = raw.augmentation.unwrap_or_default();
        let augmentation = AugmentSpec {
            enabled: aug.enabled.unwrap_or(true),
            crop_area_range: aug.crop_area_range.unwrap_or((0.40, 1.00)),
            crop_aspect_range: aug.crop_aspect_range.unwrap_or((3.0 / 4.0, 4.0 / 3.0)),
            hflip_prob: aug.hflip_prob.unwrap_or(match dataset {
                DatasetName::Mnist => 0.0,
                _ => 0.5,
            }),
            brightness_range: aug.brightness_range.unwrap_or((0.6, 1.4)),
            contrast_range: aug.contrast_range.unwrap_or((0.6, 1.4)),
            saturation_range: aug.saturation_range.unwrap_or((0.6, 1.4)),
            hue_range: aug.hue_range.unwrap_or((0.875, 1.125)),
            channel_shuffle: aug.channel_shuffle.unwrap_or(dataset.is_color()),
        };
        let syn = raw.synthetic.unwrap_or_default();
        let cfg = ExperimentConfig {
            dataset_name: dataset,
            data_path: raw
                .data_path
                .unwrap_or_else(|| PathBuf::from("data").join(dataset.as_str())),
            merge_train_test: raw.merge_train_test.unwrap_or(true),
            subset_size: raw.subset_size.unwrap_or(0),
            num_clusters: raw.num_clusters.unwrap_or(dataset.default_clusters()),
            style_dim: raw.style_dim.unwrap_or(50),
            sigma: raw.sigma.unwrap_or(0.1),
            lambda: raw.lambda.unwrap_or(10.0),
            beta_mi: raw.beta_mi.unwrap_or(0.5),
            beta_aug: match raw.beta_aug {
                Some(b) => b,
                None => default_beta_aug(dataset.as_str())?,
            },
            beta_adv: raw.beta_adv.unwrap_or(1.0),
            n_critic: raw.n_critic.unwrap_or(4),
            batch_size: raw.batch_size.unwrap_or(64),
            learning_rate: raw.learning_rate.unwrap_or(1e-4),
            adam_beta1: raw.adam_beta1.unwrap_or(0.5),
            adam_beta2: raw.adam_beta2.unwrap_or(0.9),
            total_encoder_steps: raw.total_encoder_steps.unwrap_or(20_000),
            eval_every: raw.eval_every.unwrap_or(500),
            checkpoint_every: raw.checkpoint_every.unwrap_or(5_000),
            seed: raw.seed.unwrap_or(0),
            grayscale: raw.grayscale.unwrap_or(true),
            image_size: raw.image_size.unwrap_or(dataset.default_image_size()),
            arch: raw.arch.unwrap_or(Arch::Auto),
            width_divisor: raw.width_divisor.unwrap_or(1),
            smooth_activations: raw.smooth_activations.unwrap_or(false),
            augmentation,
            synthetic: SyntheticSpec {
                n_per_class: syn.n_per_class.unwrap_or(1000),
                noise_std: syn.noise_std.unwrap_or(0.1),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        fn bad(field: &'static str, message: impl Into<String>) -> Result<()> {
            Err(Error::InvalidConfig {
                field,
                message: message.into(),
            })
        }
        if self.num_clusters < 2 {
            return bad("num_clusters", format!("must be >= 2, got {}", self.num_clusters));
        }
        if self.batch_size < 2 {
            return bad("batch_size", format!("must be >= 2, got {}", self.batch_size));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("sigma", format!("must be positive, got {}", self.sigma));
        }
        for (field, v) in [
            ("lambda", self.lambda),
            ("beta_mi", self.beta_mi),
            ("beta_aug", self.beta_aug),
            ("beta_adv", self.beta_adv),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(field, format!("must be non-negative, got {v}"));
            }
        }
        if self.n_critic == 0 {
            return bad("n_critic", "must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) {
            return bad(
                "adam_beta1",
                format!("must lie in [0, 1), got {}", self.adam_beta1),
            );
        }
        if !(0.0..1.0).contains(&self.adam_beta2) {
            return bad(
                "adam_beta2",
                format!("must lie in [0, 1), got {}", self.adam_beta2),
            );
        }
        if self.adam_beta1 >= self.adam_beta2 {
            return bad("adam_beta1", "must be smaller than adam_beta2");
        }
        if self.total_encoder_steps == 0 {
            return bad("total_encoder_steps", "must be positive");
        }
        if self.eval_every == 0 {
            return bad("eval_every", "must be positive");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every", "must be positive");
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return bad("image_size", "dimensions must be positive");
        }
        if self.seed > i64::MAX as u64 {
            return bad(
                "seed",
                format!("must fit a TOML integer (<= {}), got {}", i64::MAX, self.seed),
            );
        }
        if self.width_divisor == 0 {
            return bad("width_divisor", "must be positive");
        }
        if self.synthetic.n_per_class == 0 {
            return bad("synthetic", "n_per_class must be >= 1");
        }
        if !(self.synthetic.noise_std >= 0.0) {
            return bad("synthetic", "noise_std must be non-negative");
        }
        self.augmentation
            .validate()
            .map_err(|message| Error::InvalidConfig {
                field: "augmentation",
                message,
            })
    }

    /// Short stable digest of the full config, printed with every command.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn latent_dim(&self) -> usize {
        self.num_clusters + self.style_dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_gets_published_defaults() {
        let cfg = ExperimentConfig::from_toml_str("dataset_name = \"mnist\"").unwrap();
        assert_eq!(cfg.sigma, 0.1);
        assert_eq!(cfg.lambda, 10.0);
        assert_eq!(cfg.n_critic, 4);
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.style_dim, 50);
        assert_eq!(cfg.beta_mi, 0.5);
        assert_eq!(cfg.beta_adv, 1.0);
        assert_eq!(cfg.beta_aug, 2.0);
        assert_eq!(cfg.learning_rate, 1e-4);
        assert_eq!((cfg.adam_beta1, cfg.adam_beta2), (0.5, 0.9));
        assert_eq!(cfg.augmentation.hflip_prob, 0.0);
        assert!(!cfg.augmentation.channel_shuffle);
        assert_eq!(cfg.image_size, (28, 28));
    }

    #[test]
    fn single_cluster_is_rejected_by_name() {
        let err = ExperimentConfig::from_toml_str("dataset_name = \"mnist\"\nnum_clusters = 1").unwrap_err();
        assert!(
            matches!(
                err,
                Error::InvalidConfig {
                    field: "num_clusters",
                    ..
                }
            ),
            "{err}"
        );
        assert!(err.to_string().contains("num_clusters"));
    }

    #[test]
    fn other_invariants_name_their_field() {
        for (text, field) in [
            ("batch_size = 1", "batch_size"),
            ("adam_beta1 = 0.95", "adam_beta1"),
            ("adam_beta2 = 1.0", "adam_beta2"),
            ("sigma = 0.0", "sigma"),
            ("beta_aug = -1.0", "beta_aug"),
            ("n_critic = 0", "n_critic"),
        ] {
            let err =
                ExperimentConfig::from_toml_str(&format!("dataset_name = \"mnist\"\n{text}")).unwrap_err();
            match err {
                Error::InvalidConfig { field: f, .. } => assert_eq!(f, field, "{text}"),
                other => panic!("{text}: {other}"),
            }
        }
    }

    #[test]
    fn unknown_keys_and_datasets_fail_to_parse() {
        assert!(matches!(
            ExperimentConfig::from_toml_str("dataset_name = \"mnist\"\nsigmaa = 1.0"),
            Err(Error::ConfigParse { .. })
        ));
        let err = ExperimentConfig::from_toml_str("dataset_name = \"svhn\"").unwrap_err();
        assert!(err.to_string().contains("fashion_mnist"), "{err}");
    }

    #[test]
    fn beta_aug_defaults_by_dataset() {
        assert_eq!(default_beta_aug("mnist").unwrap(), 2.0);
        assert_eq!(default_beta_aug("fashion_mnist").unwrap(), 2.0);
        assert_eq!(default_beta_aug("cifar10").unwrap(), 4.0);
        assert_eq!(default_beta_aug("image_folder").unwrap(), 4.0);
        assert_eq!(default_beta_aug("synthetic_blocks").unwrap(), 4.0);
        let err = default_beta_aug("stl10").unwrap_err();
        assert!(err.to_string().contains("mnist, fashion_mnist"), "{err}");
    }

    #[test]
    fn save_then_load_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.toml");
        std::fs::write(&p, "dataset_name = \"cifar10\"\nseed = 7\nsigma = 0.3\n").unwrap();
        let first = load_config(&p).unwrap();
        let q = dir.path().join("b.toml");
        save_config(&first, &q).unwrap();
        let second = load_config(&q).unwrap();
        assert_eq!(first, second);
        assert_eq!(first.hash(), second.hash());
    }
}

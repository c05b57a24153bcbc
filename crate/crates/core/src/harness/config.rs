//! Run configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedback::{LayerAssignment, RuleKind};
use crate::network::{LayerSpec, NetworkSpec};
use crate::optim::OptimizerConfig;

/// Environment variable that, when set, is the root for relative dataset
/// paths. Otherwise they resolve against the config file's directory.
pub const DATA_ROOT_ENV: &str = "SIGNPROP_DATA";

fn default_batch_size() -> usize {
    64
}

fn default_eval_batch_size() -> usize {
    1000
}

fn default_probe_size() -> usize {
    256
}

fn default_test_fraction() -> f64 {
    0.25
}

fn default_center_scale() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackConfig {
    pub rule: RuleKind,
    /// Override for the final weight layer.
    #[serde(default)]
    pub last_layer: Option<RuleKind>,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        FeedbackConfig {
            rule: RuleKind::Symmetric,
            last_layer: None,
        }
    }
}

impl FeedbackConfig {
    pub fn assignment(&self) -> LayerAssignment {
        match self.last_layer {
            Some(last) => LayerAssignment::with_last_layer(self.rule, last),
            None => LayerAssignment::uniform(self.rule),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Four IDX files (MNIST layout).
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Keep only the first `n` training examples.
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
        /// Class count; defaults to one more than the largest label.
        #[serde(default)]
        classes: Option<usize>,
    },
    /// Isotropic Gaussian clusters around seeded random centers.
    Blobs {
        classes: usize,
        dim: usize,
        per_class: usize,
        spread: f64,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
        /// Standard deviation of the center coordinates.
        #[serde(default = "default_center_scale")]
        center_scale: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub seed: u64,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_eval_batch_size")]
    pub eval_batch_size: usize,
    /// Examples in the fixed batch used for per-epoch diagnostics.
    #[serde(default = "default_probe_size")]
    pub probe_size: usize,
    /// Output directory for run artifacts.
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub feedback: FeedbackConfig,
    pub optimizer: OptimizerConfig,
    pub dataset: DatasetSpec,
    pub layers: Vec<LayerSpec>,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and resolves relative paths in it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut cfg = TrainConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let config_dir = path.parent().unwrap_or(Path::new("."));
        let data_root = std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from);
        cfg.resolve_paths(data_root.as_deref().unwrap_or(config_dir), config_dir);
        Ok(cfg)
    }

    /// Makes relative dataset paths absolute against `data_root` and a
    /// relative output path absolute against `out_root`.
    pub fn resolve_paths(&mut self, data_root: &Path, out_root: &Path) {
        if let DatasetSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            ..
        } = &mut self.dataset
        {
            for p in [train_images, train_labels, test_images, test_labels] {
                if p.is_relative() {
                    *p = data_root.join(&*p);
                }
            }
        }
        if let Some(out) = &mut self.out {
            if out.is_relative() {
                *out = out_root.join(&*out);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.probe_size < 2 {
            return Err(Error::Config("probe_size must be at least 2".into()));
        }
        if self.batch_size < 2 && self.has_batchnorm() {
            return Err(Error::Config("batch_size must be at least 2 with batchnorm layers".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("no layers given".into()));
        }
        match self.dataset {
            DatasetSpec::Blobs {
                classes,
                dim,
                per_class,
                spread,
                test_fraction,
                center_scale,
            } => {
                if classes < 2 || dim == 0 || per_class == 0 {
                    return Err(Error::Config("blobs need classes >= 2, dim >= 1, per_class >= 1".into()));
                }
                if !(spread.is_finite() && spread > 0.0) {
                    return Err(Error::Config(format!("blob spread must be positive, got {spread}")));
                }
                if !(0.0..1.0).contains(&test_fraction) || test_fraction == 0.0 {
                    return Err(Error::Config(format!("test_fraction must be in (0, 1), got {test_fraction}")));
                }
                if !(center_scale.is_finite() && center_scale > 0.0) {
                    return Err(Error::Config(format!("center_scale must be positive, got {center_scale}")));
                }
            }
            DatasetSpec::Idx { classes, .. } => {
                if classes.is_some_and(|c| c < 2) {
                    return Err(Error::Config("classes must be at least 2".into()));
                }
            }
        }
        Ok(())
    }

    pub fn has_batchnorm(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, LayerSpec::BatchNorm { .. }))
    }

    pub fn assignment(&self) -> LayerAssignment {
        self.feedback.assignment()
    }

    pub fn network_spec(&self, input_shape: &[usize], classes: usize) -> NetworkSpec {
        NetworkSpec {
            input_shape: input_shape.to_vec(),
            classes,
            layers: self.layers.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::OptimizerKind;

    const BLOBS: &str = r#"
        seed = 7
        epochs = 3

        [feedback]
        rule = "fa"
        last_layer = "bp"

        [optimizer]
        kind = "bm"
        lr = 0.01

        [dataset]
        kind = "blobs"
        classes = 3
        dim = 8
        per_class = 50
        spread = 0.1

        [[layers]]
        kind = "dense"
        units = 16
        relu = true

        [[layers]]
        kind = "dense"
        units = 3
    "#;

    #[test]
    fn parses_with_defaults() {
        let cfg = TrainConfig::from_toml(BLOBS).unwrap();
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.optimizer.kind, OptimizerKind::BatchManhattan);
        assert_eq!(cfg.optimizer.decay_every, 10);
        assert_eq!(cfg.assignment().label(), "fa+last-bp");
        assert_eq!(cfg.layers[0], LayerSpec::dense_relu(16));
    }

    #[test]
    fn unknown_rule_is_a_config_error() {
        let text = BLOBS.replace("\"fa\"", "\"sf\"");
        assert!(matches!(TrainConfig::from_toml(&text), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_key_is_rejected() {
        let text = BLOBS.replace("epochs = 3", "epochs = 3\nepoch = 4");
        assert!(TrainConfig::from_toml(&text).is_err());
    }

    #[test]
    fn non_positive_spread() {
        let text = BLOBS.replace("spread = 0.1", "spread = 0.0");
        assert!(matches!(TrainConfig::from_toml(&text), Err(Error::Config(_))));
    }

    #[test]
    fn batchnorm_needs_batches_of_two() {
        let text = BLOBS.replace("epochs = 3", "epochs = 3\nbatch_size = 1")
            + "\n[[layers]]\nkind = \"batchnorm\"\n";
        assert!(matches!(TrainConfig::from_toml(&text), Err(Error::Config(_))));
    }

    #[test]
    fn relative_paths_resolve() {
        let text = r#"
            epochs = 1
            out = "runs/a"
            [optimizer]
            lr = 0.1
            [dataset]
            kind = "idx"
            train_images = "mnist/train-images-idx3-ubyte"
            train_labels = "/abs/train-labels"
            test_images = "mnist/t10k-images-idx3-ubyte"
            test_labels = "mnist/t10k-labels-idx1-ubyte"
            [[layers]]
            kind = "dense"
            units = 10
        "#;
        let mut cfg = TrainConfig::from_toml(text).unwrap();
        cfg.resolve_paths(Path::new("/data"), Path::new("/cfg"));
        let DatasetSpec::Idx {
            train_images,
            train_labels,
            ..
        } = &cfg.dataset
        else {
            panic!("idx dataset expected");
        };
        assert_eq!(train_images, Path::new("/data/mnist/train-images-idx3-ubyte"));
        assert_eq!(train_labels, Path::new("/abs/train-labels"));
        assert_eq!(cfg.out.as_deref(), Some(Path::new("/cfg/runs/a")));
    }
}

#![allow(dead_code)]

use std::path::PathBuf;

use signprop_core::harness::{DatasetSpec, FeedbackConfig, TrainConfig};
use signprop_core::{LayerSpec, OptimizerConfig, RuleKind};

/// Root holding `mnist/` with the four IDX files.
pub fn data_root() -> PathBuf {
    match std::env::var_os(signprop_core::harness::DATA_ROOT_ENV) {
        Some(p) => PathBuf::from(p),
        None => PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"),
    }
}

pub fn mnist_available() -> bool {
    data_root().join("mnist/train-images-idx3-ubyte").is_file()
}

pub fn mnist_dataset(train_limit: usize, test_limit: Option<usize>) -> DatasetSpec {
    let root = data_root().join("mnist");
    DatasetSpec::Idx {
        train_images: root.join("train-images-idx3-ubyte"),
        train_labels: root.join("train-labels-idx1-ubyte"),
        test_images: root.join("t10k-images-idx3-ubyte"),
        test_labels: root.join("t10k-labels-idx1-ubyte"),
        train_limit: Some(train_limit),
        test_limit,
        classes: Some(10),
    }
}

pub fn blobs(classes: usize, dim: usize, per_class: usize, spread: f64) -> DatasetSpec {
    DatasetSpec::Blobs {
        classes,
        dim,
        per_class,
        spread,
        test_fraction: 0.25,
        center_scale: 1.0,
    }
}

/// SGD with momentum 0.9 and weight decay 1e-4; lr 0.1 for exact
/// backpropagation and 0.05 for the asymmetric rules.
pub fn optimizer_for(rule: RuleKind) -> OptimizerConfig {
    let lr = if rule == RuleKind::Symmetric { 0.1 } else { 0.05 };
    OptimizerConfig::sgd(lr, 0.9, 1e-4)
}

pub fn config(
    dataset: DatasetSpec,
    layers: Vec<LayerSpec>,
    rule: RuleKind,
    last_layer: Option<RuleKind>,
    epochs: usize,
    seed: u64,
) -> TrainConfig {
    TrainConfig {
        seed,
        epochs,
        batch_size: 64,
        eval_batch_size: 1000,
        probe_size: 256,
        out: None,
        feedback: FeedbackConfig { rule, last_layer },
        optimizer: optimizer_for(rule),
        dataset,
        layers,
    }
}

pub fn mlp(hidden: &[usize], classes: usize) -> Vec<LayerSpec> {
    let mut layers: Vec<LayerSpec> = hidden.iter().map(|&h| LayerSpec::dense_relu(h)).collect();
    layers.push(LayerSpec::dense(classes));
    layers
}

/// The five training settings: (rule, last-layer override).
pub const SETTINGS: [(RuleKind, Option<RuleKind>); 5] = [
    (RuleKind::Symmetric, None),
    (RuleKind::SignSymmetric, None),
    (RuleKind::SignSymmetric, Some(RuleKind::Symmetric)),
    (RuleKind::FixedRandom, None),
    (RuleKind::FixedRandom, Some(RuleKind::Symmetric)),
];

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

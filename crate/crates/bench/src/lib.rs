//! Fixtures shared by the benchmarks.

use signprop_core::{LayerAssignment, Network, NetworkSpec, RuleKind, Tensor};

/// Deterministic values in `[0, 1)` with no special structure.
pub fn filled(shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |i| ((i as f64) * 0.618_033_988_75).fract()).unwrap()
}

/// The 784-256-256-10 MLP and one 64-image batch.
pub fn mnist_mlp(rule: RuleKind) -> (Network, Tensor, Vec<usize>) {
    let spec = NetworkSpec::mlp(784, &[256, 256], 10);
    let net = Network::build(&spec, &LayerAssignment::uniform(rule), 1).unwrap();
    let labels = (0..64).map(|i| i % 10).collect();
    (net, filled(&[64, 784]), labels)
}

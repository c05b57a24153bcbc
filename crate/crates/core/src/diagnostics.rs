//! Weight-alignment analysis: forward/feedback angles, weight kurtosis,
//! magnitude statistics and how well a rule's backward signal points along
//! the exact one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedback::RuleKind;
use crate::network::{Network, WeightLayer};
use crate::tensor::Tensor;

/// Cosine of the angle between two same-shape tensors viewed as flat vectors.
pub fn cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    let dot = a.dot(b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine of a zero vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Angle in degrees between the flattened forward and feedback matrices.
pub fn alignment_angle(weight: &Tensor, feedback: &Tensor) -> Result<f64> {
    Ok(cosine(weight, feedback)?.acos().to_degrees())
}

/// Standardized fourth central moment minus 3, over all entries.
pub fn excess_kurtosis(weight: &Tensor) -> Result<f64> {
    let n = weight.len();
    if n < 4 {
        return Err(Error::Degenerate(format!("kurtosis needs at least 4 values, got {n}")));
    }
    let mean = weight.mean();
    let (mut m2, mut m4) = (0.0, 0.0);
    for &x in weight.data() {
        let d2 = (x - mean) * (x - mean);
        m2 += d2;
        m4 += d2 * d2;
    }
    m2 /= n as f64;
    m4 /= n as f64;
    if m2 == 0.0 {
        return Err(Error::Degenerate("kurtosis of constant values".into()));
    }
    Ok(m4 / (m2 * m2) - 3.0)
}

/// Mean and population standard deviation of `|W|`.
pub fn weight_magnitude_stats(weight: &Tensor) -> (f64, f64) {
    let n = weight.len() as f64;
    let mean = weight.data().iter().map(|x| x.abs()).sum::<f64>() / n;
    let var = weight.data().iter().map(|x| (x.abs() - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Cosine between the error a layer's rule delivers to its input and the
/// error exact backpropagation would deliver, for the same output error
/// `delta`.
pub fn signal_cos(layer: &WeightLayer, delta: &Tensor) -> Result<f64> {
    if delta.norm() == 0.0 {
        return Err(Error::Degenerate("zero output error".into()));
    }
    let exact = layer.propagate(layer.weight(), delta)?;
    let rule = layer.propagate(&layer.feedback_matrix()?, delta)?;
    if exact.norm() == 0.0 {
        return Err(Error::Degenerate("exact backward signal is zero".into()));
    }
    cosine(&rule, &exact)
}

/// Matrix a layer's forward weights are compared against. Exact
/// backpropagation has `B = W`, so its angle is taken against `sign(W)`
/// instead.
pub fn alignment_reference(layer: &WeightLayer) -> Result<Tensor> {
    match layer.rule() {
        RuleKind::Symmetric => Ok(layer.weight().signum()),
        _ => layer.feedback_matrix(),
    }
}

/// One weight layer's statistics at one epoch. Fields are `None` when the
/// statistic is undefined for the current weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub epoch: usize,
    pub layer: usize,
    pub rule: RuleKind,
    pub alignment_deg: Option<f64>,
    pub excess_kurtosis: Option<f64>,
    pub mean_abs_weight: f64,
    pub std_abs_weight: f64,
    pub signal_cos: Option<f64>,
}

/// Records for every weight layer. `signal_cos` uses each layer's error
/// from the most recent backward call and is `None` if there was none.
pub fn layer_diagnostics(net: &Network, epoch: usize) -> Vec<DiagnosticsRecord> {
    net.weight_layers()
        .into_iter()
        .map(|layer| {
            let w = layer.weight();
            let (mean_abs, std_abs) = weight_magnitude_stats(w);
            DiagnosticsRecord {
                epoch,
                layer: layer.index(),
                rule: layer.rule(),
                alignment_deg: alignment_reference(layer)
                    .and_then(|b| alignment_angle(w, &b))
                    .ok(),
                excess_kurtosis: excess_kurtosis(w).ok(),
                mean_abs_weight: mean_abs,
                std_abs_weight: std_abs,
                signal_cos: layer.last_delta().and_then(|d| signal_cos(layer, d).ok()),
            }
        })
        .collect()
}

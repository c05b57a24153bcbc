//! Feedback-weight rules.
//!
//! A rule decides which matrix `B` carries the error from a layer's output
//! back to its input. `B` is stored in the same shape as the forward weight
//! `W`; the backward pass contracts it the same way it would contract `W`.
//!
//! | name          | `B`                                   |
//! |---------------|---------------------------------------|
//! | `bp`          | `W`                                   |
//! | `ss`          | `λ · sign(W)`                         |
//! | `fa`          | `R`, drawn once from `N(0, λ²)`       |
//! | `ss_rand_mag` | `sign(W) ⊙ |R|`, `R` drawn once       |

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{sign, Tensor};
use rand::SeedableRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum RuleKind {
    /// Exact backpropagation, `B = W`.
    Symmetric,
    /// `B = λ · sign(W)`, re-read from the current weights on every call.
    SignSymmetric,
    /// Feedback alignment: a fixed random `B`.
    FixedRandom,
    /// `B = sign(W) ⊙ |R|` with `|R|` fixed and the sign tracking `W`.
    SignTimesRandom,
}

impl RuleKind {
    pub const ALL: [RuleKind; 4] = [
        RuleKind::Symmetric,
        RuleKind::SignSymmetric,
        RuleKind::FixedRandom,
        RuleKind::SignTimesRandom,
    ];

    /// Name used in config files and reports.
    pub fn name(self) -> &'static str {
        match self {
            RuleKind::Symmetric => "bp",
            RuleKind::SignSymmetric => "ss",
            RuleKind::FixedRandom => "fa",
            RuleKind::SignTimesRandom => "ss_rand_mag",
        }
    }

    fn needs_random(self) -> bool {
        matches!(self, RuleKind::FixedRandom | RuleKind::SignTimesRandom)
    }
}

impl fmt::Display for RuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RuleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RuleKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown feedback rule {s:?} (expected one of bp, ss, fa, ss_rand_mag)"
                ))
            })
    }
}

impl TryFrom<String> for RuleKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<RuleKind> for String {
    fn from(k: RuleKind) -> String {
        k.name().to_string()
    }
}

/// Magnitude used by the rule: either the layer's initialization scale or
/// an explicit value.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum Scale {
    #[default]
    LayerDefault,
    Fixed(f64),
}

/// One layer's feedback policy before materialization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeedbackRule {
    pub kind: RuleKind,
    /// Seed for the one-time random draw of `fa` and `ss_rand_mag`.
    pub seed: u64,
    pub scale: Scale,
}

impl FeedbackRule {
    pub fn new(kind: RuleKind, seed: u64) -> Self {
        FeedbackRule {
            kind,
            seed,
            scale: Scale::LayerDefault,
        }
    }
}

/// Layer family for [`layer_scale`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScaleKind {
    Conv,
    Dense,
}

/// Initialization scale `λ` of a layer, shared by its sign-symmetric
/// feedback magnitude:
///
/// * conv: `sqrt(2 / (kh · kw · out_channels))`
/// * dense: `1 / sqrt(out_units)`; the kernel extents are ignored.
pub fn layer_scale(kind: ScaleKind, kernel_height: usize, kernel_width: usize, outputs: usize) -> Result<f64> {
    match kind {
        ScaleKind::Conv => {
            if kernel_height == 0 || kernel_width == 0 || outputs == 0 {
                return Err(Error::Config(format!(
                    "conv scale needs positive extents, got {kernel_height}x{kernel_width}x{outputs}"
                )));
            }
            Ok((2.0 / (kernel_height * kernel_width * outputs) as f64).sqrt())
        }
        ScaleKind::Dense => {
            if outputs == 0 {
                return Err(Error::Config("dense scale needs a positive output width".into()));
            }
            Ok(1.0 / (outputs as f64).sqrt())
        }
    }
}

/// Draws a tensor with i.i.d. `N(0, std²)` entries.
pub fn gaussian(shape: &[usize], std: f64, rng: &mut Rng) -> Result<Tensor> {
    let normal = Normal::new(0.0, std)
        .map_err(|e| Error::Config(format!("invalid gaussian scale {std}: {e}")))?;
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

/// A layer's materialized feedback path. The random factor, if any, is
/// drawn once here and reused for the lifetime of the layer.
#[derive(Clone, Debug)]
pub struct Feedback {
    kind: RuleKind,
    scale: f64,
    random: Option<Tensor>,
}

impl Feedback {
    /// `default_scale` is the layer's `λ`, used unless the rule fixes its own.
    pub fn new(rule: &FeedbackRule, shape: &[usize], default_scale: f64) -> Result<Self> {
        let scale = match rule.scale {
            Scale::LayerDefault => default_scale,
            Scale::Fixed(s) => s,
        };
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Config(format!("feedback scale must be positive, got {scale}")));
        }
        let random = if rule.kind.needs_random() {
            let mut rng = Rng::seed_from_u64(rule.seed);
            let r = gaussian(shape, scale, &mut rng)?;
            Some(match rule.kind {
                RuleKind::SignTimesRandom => r.map(f64::abs)?,
                _ => r,
            })
        } else {
            None
        };
        Ok(Feedback {
            kind: rule.kind,
            scale,
            random,
        })
    }

    /// Builds a random-family rule around an explicit random tensor. For
    /// [`RuleKind::SignTimesRandom`] only the magnitudes are kept.
    pub fn with_random(kind: RuleKind, scale: f64, random: Tensor) -> Result<Self> {
        if !kind.needs_random() {
            return Err(Error::Config(format!("rule {kind} has no random factor")));
        }
        let random = match kind {
            RuleKind::SignTimesRandom => random.map(f64::abs)?,
            _ => random,
        };
        Ok(Feedback {
            kind,
            scale,
            random: Some(random),
        })
    }

    pub fn kind(&self) -> RuleKind {
        self.kind
    }

    /// The `λ` this feedback was built with.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// The cached random factor (`R` for `fa`, `|R|` for `ss_rand_mag`).
    pub fn random_factor(&self) -> Option<&Tensor> {
        self.random.as_ref()
    }

    /// The feedback matrix for the current forward weights.
    pub fn materialize(&self, weight: &Tensor) -> Result<Tensor> {
        let check_shape = |r: &Tensor| {
            if r.shape() != weight.shape() {
                return Err(Error::dim("feedback", weight.shape(), r.shape()));
            }
            Ok(())
        };
        match self.kind {
            RuleKind::Symmetric => Ok(weight.clone()),
            RuleKind::SignSymmetric => weight.map(|w| self.scale * sign(w)),
            RuleKind::FixedRandom => {
                let r = self.random.as_ref().expect("random factor drawn at construction");
                check_shape(r)?;
                Ok(r.clone())
            }
            RuleKind::SignTimesRandom => {
                let r = self.random.as_ref().expect("random factor drawn at construction");
                check_shape(r)?;
                let data = weight
                    .data()
                    .iter()
                    .zip(r.data())
                    .map(|(&w, &m)| sign(w) * m)
                    .collect();
                Tensor::new(weight.shape().to_vec(), data)
            }
        }
    }
}

/// Which rule each weight layer uses: a default, an optional override for
/// the final weight layer and optional per-layer overrides.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerAssignment {
    pub default: RuleKind,
    pub last_layer: Option<RuleKind>,
    pub per_layer: BTreeMap<usize, RuleKind>,
}

impl LayerAssignment {
    pub fn uniform(kind: RuleKind) -> Self {
        LayerAssignment {
            default: kind,
            last_layer: None,
            per_layer: BTreeMap::new(),
        }
    }

    /// `kind` everywhere except exact backpropagation on the last layer.
    pub fn with_last_layer(kind: RuleKind, last: RuleKind) -> Self {
        LayerAssignment {
            last_layer: Some(last),
            ..LayerAssignment::uniform(kind)
        }
    }

    /// One rule per weight layer. Explicit per-layer entries win over the
    /// last-layer override, which wins over the default.
    pub fn resolve(&self, weight_layers: usize) -> Result<Vec<RuleKind>> {
        if let Some((&i, _)) = self.per_layer.range(weight_layers..).next() {
            return Err(Error::Config(format!(
                "rule override for weight layer {i}, but the network has {weight_layers}"
            )));
        }
        Ok((0..weight_layers)
            .map(|i| {
                if let Some(&k) = self.per_layer.get(&i) {
                    k
                } else if i + 1 == weight_layers {
                    self.last_layer.unwrap_or(self.default)
                } else {
                    self.default
                }
            })
            .collect())
    }

    /// Short label such as `ss` or `fa+last-bp`.
    pub fn label(&self) -> String {
        let mut s = self.default.name().to_string();
        if let Some(last) = self.last_layer.filter(|&l| l != self.default) {
            s.push_str(&format!("+last-{last}"));
        }
        for (i, k) in &self.per_layer {
            s.push_str(&format!("+l{i}-{k}"));
        }
        s
    }
}

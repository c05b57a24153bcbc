//! Layer stack with a forward pass and a backward pass whose inter-layer
//! error propagation is set per weight layer by a feedback rule.
//!
//! Forward, for a weight layer: `σ_j = Σ_i W_ij x_i + b_j`, followed by
//! whatever activation layer comes next. Backward, for the same layer, with
//! `δ_j` the error at its output:
//!
//! ```text
//! ∂E/∂W_ij = Σ_n x_i δ_j          (true local gradient)
//! ∂E/∂b_j  = Σ_n δ_j
//! e_i      = Σ_j B_ij δ_j         (error handed to the layer below)
//! ```
//!
//! Activations, batch norm, the residual skip and the loss always use their
//! exact derivatives.

mod batchnorm;
mod loss;
mod weight;

use serde::{Deserialize, Serialize};

pub use batchnorm::BatchNorm;
pub use loss::{count_correct, softmax_cross_entropy};
pub use weight::{WeightLayer, WeightOp};

use crate::error::{Error, Result};
use crate::feedback::{gaussian, layer_scale, Feedback, FeedbackRule, LayerAssignment, RuleKind};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::tensor::{ConvGeometry, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

fn default_true() -> bool {
    true
}

fn default_stride() -> usize {
    1
}

/// One entry of an architecture description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        units: usize,
        #[serde(default = "default_true")]
        bias: bool,
        /// Follow with a ReLU.
        #[serde(default)]
        relu: bool,
        /// Rule override for this layer.
        #[serde(default)]
        rule: Option<RuleKind>,
    },
    Conv {
        channels: usize,
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default = "default_true")]
        bias: bool,
        #[serde(default)]
        relu: bool,
        #[serde(default)]
        rule: Option<RuleKind>,
    },
    Relu,
    #[serde(rename = "batchnorm")]
    BatchNorm {
        #[serde(default)]
        relu: bool,
    },
    /// `y = relu(x + dense₂(relu(dense₁(x))))` with a `hidden`-wide inner layer.
    Residual {
        hidden: usize,
        /// Rule override for both inner dense layers.
        #[serde(default)]
        rule: Option<RuleKind>,
    },
}

impl LayerSpec {
    pub fn dense(units: usize) -> Self {
        LayerSpec::Dense {
            units,
            bias: true,
            relu: false,
            rule: None,
        }
    }

    pub fn dense_relu(units: usize) -> Self {
        LayerSpec::Dense {
            units,
            bias: true,
            relu: true,
            rule: None,
        }
    }

    pub fn conv(channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv {
            channels,
            kernel,
            stride,
            padding,
            bias: true,
            relu: false,
            rule: None,
        }
    }
}

/// Architecture: per-sample input shape, class count and layer list. The
/// softmax cross-entropy loss is implicit after the last layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Plain ReLU MLP with the given hidden widths.
    pub fn mlp(inputs: usize, hidden: &[usize], classes: usize) -> Self {
        let mut layers: Vec<LayerSpec> = hidden.iter().map(|&h| LayerSpec::dense_relu(h)).collect();
        layers.push(LayerSpec::dense(classes));
        NetworkSpec {
            input_shape: vec![inputs],
            classes,
            layers,
        }
    }

    /// The same stack with every per-layer rule override removed.
    pub fn without_rule_overrides(&self) -> Self {
        let mut spec = self.clone();
        for layer in &mut spec.layers {
            match layer {
                LayerSpec::Dense { rule, .. } | LayerSpec::Conv { rule, .. } | LayerSpec::Residual { rule, .. } => *rule = None,
                LayerSpec::BatchNorm { .. } | LayerSpec::Relu => {}
            }
        }
        spec
    }
}

/// `relu(x + dense₂(relu(dense₁(x))))`.
#[derive(Clone, Debug)]
pub struct Residual {
    first: WeightLayer,
    second: WeightLayer,
    hidden_pre: Option<Tensor>,
    sum_pre: Option<Tensor>,
}

impl Residual {
    pub fn first(&self) -> &WeightLayer {
        &self.first
    }

    pub fn second(&self) -> &WeightLayer {
        &self.second
    }

    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let h_pre = self.first.forward(x)?;
        let h = h_pre.relu();
        let z = self.second.forward(&h)?;
        let flat = x.clone().reshape(z.shape())?;
        let s_pre = flat.add(&z)?;
        let y = s_pre.relu();
        self.hidden_pre = Some(h_pre);
        self.sum_pre = Some(s_pre);
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
        let (h_pre, s_pre) = match (self.hidden_pre.take(), self.sum_pre.take()) {
            (Some(h), Some(s)) => (h, s),
            _ => return Err(Error::State("residual backward without forward".into())),
        };
        let g = Tensor::relu_backward(&s_pre, grad)?;
        let g_hidden = self.second.backward(&g, true)?.expect("requested");
        let g_hidden_pre = Tensor::relu_backward(&h_pre, &g_hidden)?;
        let g_branch = self.first.backward(&g_hidden_pre, true)?.expect("requested");
        g_branch.add(&g.reshape(g_branch.shape())?)?.reshape(input_shape)
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    Weight(WeightLayer),
    Relu { pre: Option<Tensor> },
    BatchNorm(BatchNorm),
    Residual(Residual),
}

impl Layer {
    fn name(&self) -> &'static str {
        match self {
            Layer::Weight(w) => match w.op() {
                WeightOp::Dense { .. } => "dense",
                WeightOp::Conv { .. } => "conv",
            },
            Layer::Relu { .. } => "relu",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Residual(_) => "residual",
        }
    }
}

/// Names a trainable tensor for optimizer state and error messages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLabel {
    /// Position in the layer stack.
    pub layer: usize,
    pub name: &'static str,
}

impl std::fmt::Display for ParamLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "layer {} {}", self.layer, self.name)
    }
}

/// A trainable tensor paired with its current gradient.
pub struct Param<'a> {
    pub label: ParamLabel,
    pub value: &'a mut Tensor,
    pub grad: &'a Tensor,
}

#[derive(Clone, Debug)]
pub struct Network {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    classes: usize,
    mode: Mode,
    /// Input shape of each layer from the last forward call.
    shapes: Vec<Vec<usize>>,
}

impl Network {
    /// Builds and initializes a network. Weights are drawn from
    /// `N(0, λ²)` with `λ` the layer scale; biases start at zero. Each
    /// weight layer `k` uses its own init and feedback streams derived from
    /// `seed`, so the rule assignment never changes the initial weights.
    pub fn build(spec: &NetworkSpec, assignment: &LayerAssignment, seed: u64) -> Result<Self> {
        if spec.classes < 2 {
            return Err(Error::Config("a classifier needs at least 2 classes".into()));
        }
        if spec.input_shape.is_empty() || spec.input_shape.contains(&0) {
            return Err(Error::Config(format!("bad input shape {:?}", spec.input_shape)));
        }

        // Resolve rules first so the final weight layer is known.
        let mut assignment = assignment.clone();
        let mut count = 0;
        for l in &spec.layers {
            match l {
                LayerSpec::Dense { rule, .. } | LayerSpec::Conv { rule, .. } => {
                    if let Some(r) = rule {
                        assignment.per_layer.insert(count, *r);
                    }
                    count += 1;
                }
                LayerSpec::Residual { rule, .. } => {
                    if let Some(r) = rule {
                        assignment.per_layer.insert(count, *r);
                        assignment.per_layer.insert(count + 1, *r);
                    }
                    count += 2;
                }
                _ => {}
            }
        }
        if count == 0 {
            return Err(Error::Config("network has no weight layers".into()));
        }
        let rules = assignment.resolve(count)?;

        let mut layers = Vec::new();
        let mut shape = spec.input_shape.clone();
        let mut next_weight = 0;
        let mut make_weight = |op: WeightOp, bias: bool| -> Result<WeightLayer> {
            let k = next_weight;
            next_weight += 1;
            let (kh, kw) = match op {
                WeightOp::Conv {
                    kernel_height,
                    kernel_width,
                    ..
                } => (kernel_height, kernel_width),
                WeightOp::Dense { .. } => (1, 1),
            };
            let lambda = layer_scale(op.scale_kind(), kh, kw, op.outputs())?;
            let mut rng = stream_rng(seed, Stream::Init, k as u64);
            let weight = gaussian(&op.weight_shape(), lambda, &mut rng)?;
            let rule = FeedbackRule::new(rules[k], derive_seed(seed, Stream::Feedback, k as u64));
            let feedback = Feedback::new(&rule, &op.weight_shape(), lambda)?;
            WeightLayer::new(k, op, weight, bias, feedback, lambda)
        };

        for (pos, l) in spec.layers.iter().enumerate() {
            let at = Error::in_layer(pos);
            match *l {
                LayerSpec::Dense { units, bias, relu, .. } => {
                    if units == 0 {
                        return Err(at(Error::Config("dense layer with zero units".into())));
                    }
                    let inputs = shape.iter().product();
                    layers.push(Layer::Weight(make_weight(WeightOp::Dense { inputs, outputs: units }, bias).map_err(at)?));
                    shape = vec![units];
                    if relu {
                        layers.push(Layer::Relu { pre: None });
                    }
                }
                LayerSpec::Conv {
                    channels,
                    kernel,
                    stride,
                    padding,
                    bias,
                    relu,
                    ..
                } => {
                    let [c, h, w] = shape[..] else {
                        return Err(at(Error::Config(format!(
                            "conv layer needs a [C, H, W] input, got {shape:?}"
                        ))));
                    };
                    if channels == 0 {
                        return Err(at(Error::Config("conv layer with zero channels".into())));
                    }
                    let geometry = ConvGeometry::new(stride, padding).map_err(Error::in_layer(pos))?;
                    let oh = geometry.output_extent(h, kernel).map_err(Error::in_layer(pos))?;
                    let ow = geometry.output_extent(w, kernel).map_err(Error::in_layer(pos))?;
                    let op = WeightOp::Conv {
                        in_channels: c,
                        out_channels: channels,
                        kernel_height: kernel,
                        kernel_width: kernel,
                        geometry,
                    };
                    layers.push(Layer::Weight(make_weight(op, bias).map_err(Error::in_layer(pos))?));
                    shape = vec![channels, oh, ow];
                    if relu {
                        layers.push(Layer::Relu { pre: None });
                    }
                }
                LayerSpec::Relu => layers.push(Layer::Relu { pre: None }),
                LayerSpec::BatchNorm { relu } => {
                    if shape.len() != 1 && shape.len() != 3 {
                        return Err(at(Error::Config(format!(
                            "batchnorm needs a [C] or [C, H, W] input, got {shape:?}"
                        ))));
                    }
                    layers.push(Layer::BatchNorm(BatchNorm::new(shape[0])));
                    if relu {
                        layers.push(Layer::Relu { pre: None });
                    }
                }
                LayerSpec::Residual { hidden, .. } => {
                    if hidden == 0 {
                        return Err(at(Error::Config("residual block with zero inner width".into())));
                    }
                    let width: usize = shape.iter().product();
                    let first = make_weight(WeightOp::Dense { inputs: width, outputs: hidden }, true)
                        .map_err(Error::in_layer(pos))?;
                    let second = make_weight(WeightOp::Dense { inputs: hidden, outputs: width }, true)
                        .map_err(Error::in_layer(pos))?;
                    layers.push(Layer::Residual(Residual {
                        first,
                        second,
                        hidden_pre: None,
                        sum_pre: None,
                    }));
                    shape = vec![width];
                }
            }
        }
        if shape != [spec.classes] {
            return Err(Error::Config(format!(
                "network output per sample is {shape:?}, expected [{}] logits",
                spec.classes
            )));
        }
        Ok(Network {
            layers,
            input_shape: spec.input_shape.clone(),
            classes: spec.classes,
            mode: Mode::Train,
            shapes: Vec::new(),
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Short description such as `dense(784->256) relu dense(256->10)`.
    pub fn describe(&self) -> String {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Weight(w) => format!("{}[{}]{:?}", l.name(), w.rule(), w.weight().shape()),
                _ => l.name().to_string(),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Weight layers in index order, including those inside residual blocks.
    pub fn weight_layers(&self) -> Vec<&WeightLayer> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Weight(w) => out.push(w),
                Layer::Residual(r) => {
                    out.push(&r.first);
                    out.push(&r.second);
                }
                _ => {}
            }
        }
        out
    }

    pub(crate) fn weight_layers_mut(&mut self) -> Vec<&mut WeightLayer> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Weight(w) => out.push(w),
                Layer::Residual(r) => {
                    out.push(&mut r.first);
                    out.push(&mut r.second);
                }
                _ => {}
            }
        }
        out
    }

    /// Replaces the forward weight of weight layer `k`.
    pub fn set_weight(&mut self, k: usize, weight: Tensor) -> Result<()> {
        let mut layers = self.weight_layers_mut();
        let n = layers.len();
        layers
            .get_mut(k)
            .ok_or_else(|| Error::Config(format!("weight layer {k} out of range ({n} layers)")))?
            .set_weight(weight)
    }

    /// Replaces the feedback path of weight layer `k`.
    pub fn set_feedback(&mut self, k: usize, feedback: Feedback) -> Result<()> {
        let mut layers = self.weight_layers_mut();
        let n = layers.len();
        layers
            .get_mut(k)
            .ok_or_else(|| Error::Config(format!("weight layer {k} out of range ({n} layers)")))?
            .set_feedback(feedback)
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        for l in &self.layers {
            if let Layer::BatchNorm(bn) = l {
                n += 2 * bn.channels();
            }
        }
        n + self
            .weight_layers()
            .iter()
            .map(|w| w.weight().len() + w.bias().map_or(0, Tensor::len))
            .sum::<usize>()
    }

    /// Every trainable tensor with its gradient, in a stable order.
    pub fn params_mut(&mut self) -> Vec<Param<'_>> {
        let mut out = Vec::new();
        for (pos, l) in self.layers.iter_mut().enumerate() {
            match l {
                Layer::Weight(w) => out.extend(weight_params(w, pos, "weight", "bias")),
                Layer::Residual(r) => {
                    out.extend(weight_params(&mut r.first, pos, "inner.weight", "inner.bias"));
                    out.extend(weight_params(&mut r.second, pos, "outer.weight", "outer.bias"));
                }
                Layer::BatchNorm(bn) => {
                    for (name, value, grad) in bn.params_mut() {
                        out.push(Param {
                            label: ParamLabel { layer: pos, name },
                            value,
                            grad,
                        });
                    }
                }
                Layer::Relu { .. } => {}
            }
        }
        out
    }

    /// Runs the batch `[N, input_shape...]` through the stack and returns
    /// the logits `[N, classes]`. Caches for backward are refreshed.
    pub fn forward(&mut self, batch: &Tensor) -> Result<Tensor> {
        if batch.shape().len() != self.input_shape.len() + 1 || batch.shape()[1..] != self.input_shape[..] {
            return Err(Error::in_layer(0)(Error::dim(
                "network input",
                batch.shape(),
                &self.input_shape,
            )));
        }
        let mode = self.mode;
        self.shapes.clear();
        let mut x = batch.clone();
        for (pos, layer) in self.layers.iter_mut().enumerate() {
            self.shapes.push(x.shape().to_vec());
            let at = Error::in_layer(pos);
            x = match layer {
                Layer::Weight(w) => w.forward(&x).map_err(at)?,
                Layer::Relu { pre } => {
                    let y = x.relu();
                    *pre = Some(x);
                    y
                }
                Layer::BatchNorm(bn) => bn.forward(&x, mode).map_err(at)?,
                Layer::Residual(r) => r.forward(&x).map_err(at)?,
            };
        }
        Ok(x)
    }

    /// Backward pass from the loss gradient at the logits. Fills every
    /// parameter gradient; the input gradient is skipped.
    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<()> {
        self.backward_impl(grad_logits, false).map(|_| ())
    }

    /// Like [`Network::backward`] but also returns the error delivered to
    /// the network input.
    pub fn backward_to_input(&mut self, grad_logits: &Tensor) -> Result<Tensor> {
        Ok(self.backward_impl(grad_logits, true)?.expect("requested"))
    }

    fn backward_impl(&mut self, grad_logits: &Tensor, want_input: bool) -> Result<Option<Tensor>> {
        if self.shapes.len() != self.layers.len() {
            return Err(Error::State("backward called without a preceding forward".into()));
        }
        let mut grad = grad_logits.clone();
        for pos in (0..self.layers.len()).rev() {
            let need_input = pos > 0 || want_input;
            let at = Error::in_layer(pos);
            let input_shape = &self.shapes[pos];
            let next = match &mut self.layers[pos] {
                Layer::Weight(w) => w.backward(&grad, need_input).map_err(at)?,
                Layer::Relu { pre } => {
                    let pre = pre
                        .take()
                        .ok_or_else(|| at(Error::State("relu backward without forward".into())))?;
                    Some(Tensor::relu_backward(&pre, &grad).map_err(Error::in_layer(pos))?)
                }
                Layer::BatchNorm(bn) => Some(bn.backward(&grad).map_err(at)?),
                Layer::Residual(r) => Some(r.backward(&grad, input_shape).map_err(at)?),
            };
            match next {
                Some(g) => grad = g,
                None => {
                    self.shapes.clear();
                    return Ok(None);
                }
            }
        }
        self.shapes.clear();
        Ok(Some(grad))
    }
}

fn weight_params<'a>(w: &'a mut WeightLayer, pos: usize, wname: &'static str, bname: &'static str) -> Vec<Param<'a>> {
    let (value, grad, bias) = w.params_mut();
    let mut v = vec![Param {
        label: ParamLabel { layer: pos, name: wname },
        value,
        grad,
    }];
    if let Some((value, grad)) = bias {
        v.push(Param {
            label: ParamLabel { layer: pos, name: bname },
            value,
            grad,
        });
    }
    v
}

#[cfg(test)]
mod tests;

//! Dense and convolutional layers. These are the only layers whose error
//! propagation goes through a feedback rule.

use crate::error::{Error, Result};
use crate::feedback::{Feedback, RuleKind, ScaleKind};
use crate::tensor::{
    conv2d, conv2d_input_grad, conv2d_kernel_grad, matmul, matmul_nt, matmul_tn, ConvGeometry, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightOp {
    /// `y = x · W + b` with `W: [inputs, outputs]`; inputs are flattened
    /// past the batch dimension.
    Dense { inputs: usize, outputs: usize },
    /// Cross-correlation with `W: [out_channels, in_channels, kh, kw]`.
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel_height: usize,
        kernel_width: usize,
        geometry: ConvGeometry,
    },
}

impl WeightOp {
    pub fn weight_shape(&self) -> Vec<usize> {
        match *self {
            WeightOp::Dense { inputs, outputs } => vec![inputs, outputs],
            WeightOp::Conv {
                in_channels,
                out_channels,
                kernel_height,
                kernel_width,
                ..
            } => vec![out_channels, in_channels, kernel_height, kernel_width],
        }
    }

    pub fn outputs(&self) -> usize {
        match *self {
            WeightOp::Dense { outputs, .. } => outputs,
            WeightOp::Conv { out_channels, .. } => out_channels,
        }
    }

    pub fn scale_kind(&self) -> ScaleKind {
        match self {
            WeightOp::Dense { .. } => ScaleKind::Dense,
            WeightOp::Conv { .. } => ScaleKind::Conv,
        }
    }
}

/// A trainable dense or conv layer with its feedback path.
#[derive(Clone, Debug)]
pub struct WeightLayer {
    index: usize,
    op: WeightOp,
    weight: Tensor,
    bias: Option<Tensor>,
    grad_weight: Tensor,
    grad_bias: Option<Tensor>,
    feedback: Feedback,
    lambda: f64,
    cached_input: Option<Tensor>,
    input_shape: Option<Vec<usize>>,
    last_delta: Option<Tensor>,
}

impl WeightLayer {
    pub fn new(index: usize, op: WeightOp, weight: Tensor, bias: bool, feedback: Feedback, lambda: f64) -> Result<Self> {
        if weight.shape() != op.weight_shape() {
            return Err(Error::dim("WeightLayer::new", &op.weight_shape(), weight.shape()));
        }
        let bias = bias.then(|| Tensor::zeros(&[op.outputs()]));
        Ok(WeightLayer {
            index,
            op,
            grad_weight: Tensor::zeros(weight.shape()),
            grad_bias: bias.clone(),
            weight,
            bias,
            feedback,
            lambda,
            cached_input: None,
            input_shape: None,
            last_delta: None,
        })
    }

    /// Position among the network's weight layers.
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn op(&self) -> &WeightOp {
        &self.op
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn grad_weight(&self) -> &Tensor {
        &self.grad_weight
    }

    pub fn grad_bias(&self) -> Option<&Tensor> {
        self.grad_bias.as_ref()
    }

    pub fn feedback(&self) -> &Feedback {
        &self.feedback
    }

    pub fn rule(&self) -> RuleKind {
        self.feedback.kind()
    }

    /// Initialization scale of this layer.
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Current feedback matrix `B`.
    pub fn feedback_matrix(&self) -> Result<Tensor> {
        self.feedback.materialize(&self.weight)
    }

    /// Error at this layer's output from the most recent backward call.
    pub fn last_delta(&self) -> Option<&Tensor> {
        self.last_delta.as_ref()
    }

    /// Shape of the input seen by the most recent forward call.
    pub fn input_shape(&self) -> Option<&[usize]> {
        self.input_shape.as_deref()
    }

    pub(crate) fn set_weight(&mut self, weight: Tensor) -> Result<()> {
        if weight.shape() != self.weight.shape() {
            return Err(Error::dim("set_weight", self.weight.shape(), weight.shape()));
        }
        self.weight = weight;
        Ok(())
    }

    pub(crate) fn set_feedback(&mut self, feedback: Feedback) -> Result<()> {
        if let Some(r) = feedback.random_factor() {
            if r.shape() != self.weight.shape() {
                return Err(Error::dim("set_feedback", self.weight.shape(), r.shape()));
            }
        }
        self.feedback = feedback;
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> (&mut Tensor, &Tensor, Option<(&mut Tensor, &Tensor)>) {
        let bias = match (&mut self.bias, &self.grad_bias) {
            (Some(b), Some(g)) => Some((b, g)),
            _ => None,
        };
        (&mut self.weight, &self.grad_weight, bias)
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let out = match self.op {
            WeightOp::Dense { inputs, .. } => {
                let n = input.rows();
                if input.row_len() != inputs {
                    return Err(Error::dim("dense forward", input.shape(), self.weight.shape()));
                }
                let flat = input.clone().reshape(&[n, inputs])?;
                let mut out = matmul(&flat, &self.weight)?;
                if let Some(b) = &self.bias {
                    add_channel_bias(&mut out, b, 1);
                }
                self.cached_input = Some(flat);
                out
            }
            WeightOp::Conv { geometry, .. } => {
                let mut out = conv2d(input, &self.weight, geometry)?;
                if let Some(b) = &self.bias {
                    let area = out.shape()[2] * out.shape()[3];
                    add_channel_bias(&mut out, b, area);
                }
                self.cached_input = Some(input.clone());
                out
            }
        };
        self.input_shape = Some(input.shape().to_vec());
        out.check_finite("forward")?;
        Ok(out)
    }

    /// Consumes the forward cache. Parameter gradients use the true local
    /// contraction; the error handed to the layer below (when requested)
    /// goes through the feedback matrix.
    pub fn backward(&mut self, delta: &Tensor, need_input_grad: bool) -> Result<Option<Tensor>> {
        let input = self
            .cached_input
            .take()
            .ok_or_else(|| Error::State("backward called without a preceding forward".into()))?;
        let input_shape = self.input_shape.clone().expect("set with cached input");
        let grad_input = match self.op {
            WeightOp::Dense { outputs, .. } => {
                if delta.shape() != [input.rows(), outputs] {
                    return Err(Error::dim("dense backward", delta.shape(), &[input.rows(), outputs]));
                }
                self.grad_weight = matmul_tn(&input, delta)?;
                if let Some(gb) = &mut self.grad_bias {
                    *gb = channel_sums(delta, outputs, 1)?;
                }
                if need_input_grad {
                    let b = self.feedback.materialize(&self.weight)?;
                    Some(matmul_nt(delta, &b)?.reshape(&input_shape)?)
                } else {
                    None
                }
            }
            WeightOp::Conv {
                out_channels,
                geometry,
                ..
            } => {
                self.grad_weight = conv2d_kernel_grad(&input, self.weight.shape(), delta, geometry)?;
                if let Some(gb) = &mut self.grad_bias {
                    let area = delta.shape()[2] * delta.shape()[3];
                    *gb = channel_sums(delta, out_channels, area)?;
                }
                if need_input_grad {
                    let b = self.feedback.materialize(&self.weight)?;
                    Some(conv2d_input_grad(&input_shape, &b, delta, geometry)?)
                } else {
                    None
                }
            }
        };
        self.last_delta = Some(delta.clone());
        Ok(grad_input)
    }

    /// Propagates `delta` to this layer's input through an arbitrary matrix
    /// of the weight's shape (the forward weight for the exact signal, the
    /// feedback matrix for the rule's signal).
    pub fn propagate(&self, matrix: &Tensor, delta: &Tensor) -> Result<Tensor> {
        let input_shape = self
            .input_shape
            .as_deref()
            .ok_or_else(|| Error::State("propagate needs a prior forward call".into()))?;
        if matrix.shape() != self.weight.shape() {
            return Err(Error::dim("propagate", self.weight.shape(), matrix.shape()));
        }
        match self.op {
            WeightOp::Dense { .. } => matmul_nt(delta, matrix)?.reshape(input_shape),
            WeightOp::Conv { geometry, .. } => conv2d_input_grad(input_shape, matrix, delta, geometry),
        }
    }
}

/// Adds `bias[c]` to every element of channel `c`, for data laid out as
/// `[N, C, area]`.
pub(crate) fn add_channel_bias(out: &mut Tensor, bias: &Tensor, area: usize) {
    let channels = bias.len();
    let b = bias.data();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += b[(i / area) % channels];
    }
}

/// Per-channel sums over the batch and spatial positions of `[N, C, area]`
/// data, in ascending element order.
pub(crate) fn channel_sums(t: &Tensor, channels: usize, area: usize) -> Result<Tensor> {
    let mut sums = vec![0.0; channels];
    for (i, v) in t.data().iter().enumerate() {
        sums[(i / area) % channels] += v;
    }
    Tensor::new(vec![channels], sums)
}

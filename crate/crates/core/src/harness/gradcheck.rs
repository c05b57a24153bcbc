//! Gradient verification: the engine's backward pass against central finite
//! differences (exact feedback only) and against a loop-by-loop reference
//! evaluation of the feedback step that uses the same feedback matrices.

use std::fmt;

use crate::error::{Error, Result};
use crate::feedback::{gaussian, LayerAssignment, RuleKind};
use crate::network::{softmax_cross_entropy, BatchNorm, Layer, Mode, Network, NetworkSpec, ParamLabel, WeightLayer, WeightOp};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const FD_RTOL: f64 = 1e-4;
pub const FD_ATOL: f64 = 1e-8;
pub const ORACLE_ATOL: f64 = 1e-10;
pub const MAX_PARAMS: usize = 2000;
const BATCH: usize = 4;

/// Loss gradients with respect to every parameter and the network input.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub params: Vec<(ParamLabel, Tensor)>,
    pub input: Tensor,
}

/// Anything that can produce [`Gradients`] for a network on a batch. The
/// network is borrowed immutably; implementations work on a copy.
pub trait GradientSource {
    fn gradients(&mut self, net: &Network, x: &Tensor, labels: &[usize]) -> Result<Gradients>;
}

/// The network's own backward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct Engine;

impl GradientSource for Engine {
    fn gradients(&mut self, net: &Network, x: &Tensor, labels: &[usize]) -> Result<Gradients> {
        let mut net = net.clone();
        let logits = net.forward(x)?;
        let (_, grad) = softmax_cross_entropy(&logits, labels)?;
        let input = net.backward_to_input(&grad)?;
        let params = net
            .params_mut()
            .into_iter()
            .map(|p| (p.label, p.grad.clone()))
            .collect();
        Ok(Gradients { params, input })
    }
}

/// Wraps another source and negates one parameter's gradient. A negative
/// control for the checker.
#[derive(Clone, Debug)]
pub struct FlipSign<S> {
    pub inner: S,
    /// Stack position of the layer whose first parameter is corrupted.
    pub layer: usize,
}

impl<S: GradientSource> GradientSource for FlipSign<S> {
    fn gradients(&mut self, net: &Network, x: &Tensor, labels: &[usize]) -> Result<Gradients> {
        let mut g = self.inner.gradients(net, x, labels)?;
        if let Some((_, t)) = g.params.iter_mut().find(|(l, _)| l.layer == self.layer) {
            *t = t.scale(-1.0)?;
        }
        Ok(g)
    }
}

fn loss(net: &mut Network, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let logits = net.forward(x)?;
    Ok(softmax_cross_entropy(&logits, labels)?.0)
}

/// Central differences `(L(θ+h) − L(θ−h)) / 2h` for every parameter and
/// input entry.
pub fn finite_differences(net: &Network, x: &Tensor, labels: &[usize], h: f64) -> Result<Gradients> {
    let mut net = net.clone();
    let n_params = net.params_mut().len();
    let mut params = Vec::with_capacity(n_params);
    for k in 0..n_params {
        let (label, len, shape) = {
            let p = &net.params_mut()[k];
            (p.label.clone(), p.value.len(), p.value.shape().to_vec())
        };
        let mut grad = vec![0.0; len];
        for (i, g) in grad.iter_mut().enumerate() {
            let orig = net.params_mut()[k].value.data()[i];
            net.params_mut()[k].value.data_mut()[i] = orig + h;
            let up = loss(&mut net, x, labels)?;
            net.params_mut()[k].value.data_mut()[i] = orig - h;
            let down = loss(&mut net, x, labels)?;
            net.params_mut()[k].value.data_mut()[i] = orig;
            *g = (up - down) / (2.0 * h);
        }
        params.push((label, Tensor::new(shape, grad)?));
    }
    let mut xi = x.clone();
    let mut input = vec![0.0; x.len()];
    for (i, g) in input.iter_mut().enumerate() {
        let orig = x.data()[i];
        xi.data_mut()[i] = orig + h;
        let up = loss(&mut net, &xi, labels)?;
        xi.data_mut()[i] = orig - h;
        let down = loss(&mut net, &xi, labels)?;
        xi.data_mut()[i] = orig;
        *g = (up - down) / (2.0 * h);
    }
    Ok(Gradients {
        params,
        input: Tensor::new(x.shape().to_vec(), input)?,
    })
}

/// Reference gradients by explicit index loops, one scalar at a time:
/// `σ_j = Σ_i W_ij x_i + b_j` forward and `e_i = Σ_j B_ij δ_j` backward,
/// with `B` taken from each layer's rule.
pub fn naive_gradients(net: &Network, x: &Tensor, labels: &[usize]) -> Result<Gradients> {
    let mode = net.mode();
    let mut acts = Vec::with_capacity(net.layers().len() + 1);
    acts.push(x.clone());
    for layer in net.layers() {
        let a = acts.last().expect("non-empty");
        let next = match layer {
            Layer::Weight(w) => naive_weight_forward(w, a)?,
            Layer::Relu { .. } => a.relu(),
            Layer::BatchNorm(bn) => naive_bn_forward(bn, a, mode)?,
            Layer::Residual(r) => {
                let h = naive_weight_forward(r.first(), a)?.relu();
                let z = naive_weight_forward(r.second(), &h)?;
                a.clone().reshape(z.shape())?.add(&z)?.relu()
            }
        };
        acts.push(next);
    }
    let (_, mut delta) = softmax_cross_entropy(acts.last().expect("non-empty"), labels)?;

    let mut params: Vec<(ParamLabel, Tensor)> = Vec::new();
    for (pos, layer) in net.layers().iter().enumerate().rev() {
        let input = &acts[pos];
        let mut local = Vec::new();
        delta = match layer {
            Layer::Weight(w) => {
                let (e, gw, gb) = naive_weight_backward(w, input, &delta)?;
                local.push(("weight", gw));
                if let Some(gb) = gb {
                    local.push(("bias", gb));
                }
                e
            }
            Layer::Relu { .. } => naive_relu_backward(input, &delta)?,
            Layer::BatchNorm(bn) => {
                let (e, gg, gbeta) = naive_bn_backward(bn, input, &delta, mode)?;
                local.push(("gamma", gg));
                local.push(("beta", gbeta));
                e
            }
            Layer::Residual(r) => {
                let h_pre = naive_weight_forward(r.first(), input)?;
                let h = h_pre.relu();
                let z = naive_weight_forward(r.second(), &h)?;
                let s_pre = input.clone().reshape(z.shape())?.add(&z)?;
                let g = naive_relu_backward(&s_pre, &delta)?;
                let (eh, gw2, gb2) = naive_weight_backward(r.second(), &h, &g)?;
                let gh = naive_relu_backward(&h_pre, &eh)?;
                let (ex, gw1, gb1) = naive_weight_backward(r.first(), input, &gh)?;
                local.push(("inner.weight", gw1));
                if let Some(gb) = gb1 {
                    local.push(("inner.bias", gb));
                }
                local.push(("outer.weight", gw2));
                if let Some(gb) = gb2 {
                    local.push(("outer.bias", gb));
                }
                ex.add(&g.reshape(input.shape())?)?
            }
        };
        for (name, t) in local.into_iter().rev() {
            params.push((ParamLabel { layer: pos, name }, t));
        }
    }
    params.reverse();
    Ok(Gradients { params, input: delta })
}

fn naive_weight_forward(w: &WeightLayer, x: &Tensor) -> Result<Tensor> {
    let wt = w.weight().data();
    let bias = |j: usize| w.bias().map_or(0.0, |b| b.data()[j]);
    match *w.op() {
        WeightOp::Dense { inputs, outputs } => {
            let n = x.rows();
            let xd = x.data();
            let mut out = vec![0.0; n * outputs];
            for s in 0..n {
                for j in 0..outputs {
                    let mut sigma = bias(j);
                    for i in 0..inputs {
                        sigma += wt[i * outputs + j] * xd[s * inputs + i];
                    }
                    out[s * outputs + j] = sigma;
                }
            }
            Tensor::new(vec![n, outputs], out)
        }
        WeightOp::Conv {
            in_channels,
            out_channels,
            kernel_height: kh,
            kernel_width: kw,
            geometry,
        } => {
            let [n, _, h, wd] = x.shape()[..] else {
                return Err(Error::dim("naive conv", x.shape(), &[0, in_channels, 0, 0]));
            };
            let oh = geometry.output_extent(h, kh)?;
            let ow = geometry.output_extent(wd, kw)?;
            let xd = x.data();
            let mut out = vec![0.0; n * out_channels * oh * ow];
            for s in 0..n {
                for o in 0..out_channels {
                    for y in 0..oh {
                        for xo in 0..ow {
                            let mut sigma = bias(o);
                            for c in 0..in_channels {
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let Some((iy, ix)) = tap(geometry.stride, geometry.padding, y, xo, ky, kx, h, wd) else {
                                            continue;
                                        };
                                        sigma += wt[((o * in_channels + c) * kh + ky) * kw + kx]
                                            * xd[((s * in_channels + c) * h + iy) * wd + ix];
                                    }
                                }
                            }
                            out[((s * out_channels + o) * oh + y) * ow + xo] = sigma;
                        }
                    }
                }
            }
            Tensor::new(vec![n, out_channels, oh, ow], out)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn tap(stride: usize, pad: usize, y: usize, x: usize, ky: usize, kx: usize, h: usize, w: usize) -> Option<(usize, usize)> {
    let iy = (y * stride + ky).checked_sub(pad)?;
    let ix = (x * stride + kx).checked_sub(pad)?;
    (iy < h && ix < w).then_some((iy, ix))
}

/// Returns `(error to input, grad W, grad b)`.
fn naive_weight_backward(w: &WeightLayer, x: &Tensor, delta: &Tensor) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let b = w.feedback_matrix()?;
    let bd = b.data();
    let dd = delta.data();
    let xd = x.data();
    let mut gw = vec![0.0; w.weight().len()];
    let mut e = vec![0.0; x.len()];
    let gb = match *w.op() {
        WeightOp::Dense { inputs, outputs } => {
            let n = x.rows();
            let mut gb = vec![0.0; outputs];
            for s in 0..n {
                for i in 0..inputs {
                    let mut acc = 0.0;
                    for j in 0..outputs {
                        acc += bd[i * outputs + j] * dd[s * outputs + j];
                    }
                    e[s * inputs + i] = acc;
                }
                for j in 0..outputs {
                    gb[j] += dd[s * outputs + j];
                    for i in 0..inputs {
                        gw[i * outputs + j] += xd[s * inputs + i] * dd[s * outputs + j];
                    }
                }
            }
            gb
        }
        WeightOp::Conv {
            in_channels,
            out_channels,
            kernel_height: kh,
            kernel_width: kw,
            geometry,
        } => {
            let [n, _, h, wd] = x.shape()[..] else {
                return Err(Error::dim("naive conv backward", x.shape(), &[0, in_channels, 0, 0]));
            };
            let (oh, ow) = (delta.shape()[2], delta.shape()[3]);
            let mut gb = vec![0.0; out_channels];
            for s in 0..n {
                for o in 0..out_channels {
                    for y in 0..oh {
                        for xo in 0..ow {
                            let d = dd[((s * out_channels + o) * oh + y) * ow + xo];
                            gb[o] += d;
                            for c in 0..in_channels {
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let Some((iy, ix)) = tap(geometry.stride, geometry.padding, y, xo, ky, kx, h, wd) else {
                                            continue;
                                        };
                                        let wi = ((o * in_channels + c) * kh + ky) * kw + kx;
                                        let xi = ((s * in_channels + c) * h + iy) * wd + ix;
                                        e[xi] += bd[wi] * d;
                                        gw[wi] += xd[xi] * d;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            gb
        }
    };
    let gb = match w.bias() {
        Some(bias) => Some(Tensor::new(bias.shape().to_vec(), gb)?),
        None => None,
    };
    Ok((
        Tensor::new(x.shape().to_vec(), e)?,
        Tensor::new(w.weight().shape().to_vec(), gw)?,
        gb,
    ))
}

fn naive_relu_backward(pre: &Tensor, grad: &Tensor) -> Result<Tensor> {
    let pre = pre.clone().reshape(grad.shape())?;
    let data = pre
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&p, &g)| if p > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(grad.shape().to_vec(), data)
}

/// Groups flat indices by channel for `[N, C]` or `[N, C, H, W]` data.
fn channel_members(shape: &[usize]) -> Vec<Vec<usize>> {
    let (n, c) = (shape[0], shape[1]);
    let area: usize = shape[2..].iter().product();
    let mut groups = vec![Vec::new(); c];
    for s in 0..n {
        for (ch, g) in groups.iter_mut().enumerate() {
            for a in 0..area {
                g.push((s * c + ch) * area + a);
            }
        }
    }
    groups
}

fn bn_stats(bn: &BatchNorm, x: &Tensor, members: &[usize], ch: usize, mode: Mode) -> (f64, f64) {
    match mode {
        Mode::Train => {
            let m = members.len() as f64;
            let mean = members.iter().map(|&i| x.data()[i]).sum::<f64>() / m;
            let var = members.iter().map(|&i| (x.data()[i] - mean).powi(2)).sum::<f64>() / m;
            (mean, var)
        }
        Mode::Eval => (bn.running_mean().data()[ch], bn.running_var().data()[ch]),
    }
}

fn naive_bn_forward(bn: &BatchNorm, x: &Tensor, mode: Mode) -> Result<Tensor> {
    let mut out = vec![0.0; x.len()];
    for (ch, members) in channel_members(x.shape()).iter().enumerate() {
        let (mean, var) = bn_stats(bn, x, members, ch, mode);
        for &i in members {
            out[i] = bn.gamma().data()[ch] * (x.data()[i] - mean) / (var + bn.eps()).sqrt() + bn.beta().data()[ch];
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Full per-channel Jacobian of the normalization, contracted with the
/// incoming error.
fn naive_bn_backward(bn: &BatchNorm, x: &Tensor, delta: &Tensor, mode: Mode) -> Result<(Tensor, Tensor, Tensor)> {
    let c = bn.channels();
    let mut e = vec![0.0; x.len()];
    let mut gg = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    let (xd, dd) = (x.data(), delta.data());
    for (ch, members) in channel_members(x.shape()).iter().enumerate() {
        let (mean, var) = bn_stats(bn, x, members, ch, mode);
        let inv = 1.0 / (var + bn.eps()).sqrt();
        let m = members.len() as f64;
        let gamma = bn.gamma().data()[ch];
        for &j in members {
            let xh = (xd[j] - mean) * inv;
            gg[ch] += dd[j] * xh;
            gbeta[ch] += dd[j];
        }
        for &i in members {
            let xhi = (xd[i] - mean) * inv;
            let mut acc = 0.0;
            for &j in members {
                let xhj = (xd[j] - mean) * inv;
                let jac = match mode {
                    Mode::Train => inv * ((i == j) as u8 as f64 - 1.0 / m - xhi * xhj / m),
                    Mode::Eval => inv * (i == j) as u8 as f64,
                };
                acc += dd[j] * gamma * jac;
            }
            e[i] = acc;
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), e)?,
        Tensor::new(vec![c], gg)?,
        Tensor::new(vec![c], gbeta)?,
    ))
}

/// Worst agreement between two gradients for one layer (or the input).
#[derive(Clone, Debug, PartialEq)]
pub struct Deviation {
    /// Stack position, `None` for the network input.
    pub layer: Option<usize>,
    pub max_abs: f64,
    /// Largest `|a − b| / (atol + rtol·|b|)`; at most 1 when within tolerance.
    pub worst_ratio: f64,
}

impl Deviation {
    pub fn passed(&self) -> bool {
        self.worst_ratio <= 1.0
    }
}

/// One comparison: a candidate against a reference, per layer.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub rtol: f64,
    pub atol: f64,
    pub deviations: Vec<Deviation>,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.deviations.iter().all(Deviation::passed)
    }

    pub fn failing_layers(&self) -> Vec<Option<usize>> {
        self.deviations.iter().filter(|d| !d.passed()).map(|d| d.layer).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.deviations.iter().map(|d| d.max_abs).fold(0.0, f64::max)
    }
}

/// Compares `candidate` to `reference` element by element with
/// `|a − b| <= atol + rtol·|b|`.
pub fn compare(name: &str, candidate: &Gradients, reference: &Gradients, rtol: f64, atol: f64) -> Result<Check> {
    if candidate.params.len() != reference.params.len() {
        return Err(Error::State(format!(
            "{name}: {} parameter gradients vs {} in the reference",
            candidate.params.len(),
            reference.params.len()
        )));
    }
    let mut deviations: Vec<Deviation> = Vec::new();
    let mut record = |layer: Option<usize>, a: &Tensor, b: &Tensor| -> Result<()> {
        if a.shape() != b.shape() {
            return Err(Error::dim("gradcheck compare", a.shape(), b.shape()));
        }
        let (mut max_abs, mut worst) = (0.0f64, 0.0f64);
        for (&x, &y) in a.data().iter().zip(b.data()) {
            let d = (x - y).abs();
            max_abs = max_abs.max(d);
            worst = worst.max(d / (atol + rtol * y.abs()));
        }
        match deviations.iter_mut().find(|d| d.layer == layer) {
            Some(dev) => {
                dev.max_abs = dev.max_abs.max(max_abs);
                dev.worst_ratio = dev.worst_ratio.max(worst);
            }
            None => deviations.push(Deviation {
                layer,
                max_abs,
                worst_ratio: worst,
            }),
        }
        Ok(())
    };
    for ((la, a), (lb, b)) in candidate.params.iter().zip(&reference.params) {
        if la != lb {
            return Err(Error::State(format!("{name}: parameter {la} paired with {lb}")));
        }
        record(Some(la.layer), a, b)?;
    }
    record(None, &candidate.input, &reference.input)?;
    Ok(Check {
        name: name.to_string(),
        rtol,
        atol,
        deviations,
    })
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub checks: Vec<Check>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for check in &self.checks {
            let verdict = if check.passed() { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{} (rtol {:e}, atol {:e}): {verdict}",
                check.name, check.rtol, check.atol
            )?;
            for d in &check.deviations {
                let at = d.layer.map_or("input".to_string(), |l| format!("layer {l}"));
                let mark = if d.passed() { "" } else { "  <-- exceeds tolerance" };
                writeln!(f, "  {at:<10} max |dev| {:.3e}{mark}", d.max_abs)?;
            }
        }
        Ok(())
    }
}

/// Random probe batch for a network: `N(0, 1)` inputs and uniform labels.
pub fn probe_batch(net: &Network, seed: u64) -> Result<(Tensor, Vec<usize>)> {
    use rand::Rng as _;
    let mut rng = stream_rng(seed, Stream::Probe, 0);
    let mut shape = vec![BATCH];
    shape.extend_from_slice(net.input_shape());
    let x = gaussian(&shape, 1.0, &mut rng)?;
    let labels = (0..BATCH).map(|_| rng.gen_range(0..net.classes())).collect();
    Ok((x, labels))
}

/// Gives biases and batch-norm affine parameters small random values so
/// their gradients are exercised away from the zero-initialized point.
pub fn jitter_offsets(net: &mut Network, seed: u64) -> Result<()> {
    let mut rng = stream_rng(seed, Stream::Probe, 1);
    for p in net.params_mut() {
        if p.label.name.ends_with("weight") {
            continue;
        }
        let noise = gaussian(p.value.shape(), 0.1, &mut rng)?;
        *p.value = p.value.add(&noise)?;
    }
    Ok(())
}

/// Runs the full verification on `spec`:
///
/// * every layer exact: `source` against central finite differences;
/// * the configured assignment and each uniform rule: `source` against the
///   loop reference.
pub fn gradcheck<S: GradientSource>(
    spec: &NetworkSpec,
    assignment: &LayerAssignment,
    seed: u64,
    source: &mut S,
) -> Result<GradcheckReport> {
    let build = |spec: &NetworkSpec, a: &LayerAssignment| -> Result<Network> {
        let mut net = Network::build(spec, a, seed)?;
        jitter_offsets(&mut net, seed)?;
        Ok(net)
    };
    let exact = build(&spec.without_rule_overrides(), &LayerAssignment::uniform(RuleKind::Symmetric))?;
    let count = exact.param_count();
    if count > MAX_PARAMS {
        return Err(Error::Config(format!(
            "gradcheck needs a small network (at most {MAX_PARAMS} parameters), got {count}"
        )));
    }
    let (x, labels) = probe_batch(&exact, seed)?;

    let mut checks = Vec::new();
    let fd = finite_differences(&exact, &x, &labels, FD_STEP)?;
    let got = source.gradients(&exact, &x, &labels)?;
    checks.push(compare("bp vs finite differences", &got, &fd, FD_RTOL, FD_ATOL)?);

    let mut assignments = vec![(format!("{} vs loop reference", assignment.label()), assignment.clone())];
    for kind in RuleKind::ALL {
        let a = LayerAssignment::uniform(kind);
        if a != *assignment {
            assignments.push((format!("{kind} vs loop reference"), a));
        }
    }
    for (name, a) in assignments {
        let net = build(spec, &a)?;
        let reference = naive_gradients(&net, &x, &labels)?;
        let got = source.gradients(&net, &x, &labels)?;
        checks.push(compare(&name, &got, &reference, 0.0, ORACLE_ATOL)?);
    }
    Ok(GradcheckReport { checks })
}

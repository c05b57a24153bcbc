//! Dense row-major `f64` tensors and the numeric kernels the rest of the
//! crate is built on.
//!
//! Every contraction accumulates in a fixed ascending order, so a given
//! input always produces bit-identical output.

use crate::error::{Error, Result};

/// Dense n-dimensional array of finite `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that the extents are positive, that they
    /// cover `data` exactly and that every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Dimension {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        let t = Tensor { shape, data };
        t.check_finite("Tensor::new")?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "tensor extents must be positive, got {shape:?}"
        );
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a tensor element by element from the flat row-major index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let len: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..len).map(&mut f).collect())
    }

    /// Convenience constructor for literal matrices in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Config("ragged matrix rows".into()));
        }
        Tensor::new(vec![m, n], rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Leading extent (the batch dimension for activations).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all extents after the first.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
        .finite("map")
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn check_finite(&self, op: &str) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!(
                "{op} produced {} at flat index {i} of shape {:?}",
                self.data[i], self.shape
            ))),
        }
    }

    fn finite(self, op: &str) -> Result<Self> {
        self.check_finite(op)?;
        Ok(self)
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.same_shape(other, op)?;
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
        .finite(op)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Result<Self> {
        self.map(|x| x * factor)
    }

    pub fn relu(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| x.max(0.0)).collect(),
        }
    }

    /// Passes `grad` where `pre` is strictly positive; the derivative at
    /// exactly zero is taken as zero.
    pub fn relu_backward(pre: &Tensor, grad: &Tensor) -> Result<Self> {
        pre.zip_with(grad, "relu_backward", |p, g| if p > 0.0 { g } else { 0.0 })
    }

    /// Sum of all elements, accumulated in index order.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Elementwise sign with `sign(0) = 0`.
    pub fn signum(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| sign(x)).collect(),
        }
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Transpose of a matrix.
    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.as_matrix("transpose")?;
        let mut out = vec![0.0; m * n];
        transpose_into(m, n, &self.data, &mut out);
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::dim(op, &self.shape, &[0, 0])),
        }
    }
}

/// `sign` with `sign(0) = 0`.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Matrix product `a · b` with `a: [m, k]` and `b: [k, n]`.
///
/// Each output element is accumulated over the inner index in ascending
/// order starting from zero.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.as_matrix("matmul")?;
    let (k2, n) = b.as_matrix("matmul")?;
    if k != k2 {
        return Err(Error::dim("matmul", &a.shape, &b.shape));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, &b.data, &mut out);
    Tensor {
        shape: vec![m, n],
        data: out,
    }
    .finite("matmul")
}

/// `a · bᵀ` with `a: [m, k]` and `b: [n, k]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, k) = a.as_matrix("matmul_nt")?;
    let (_, k2) = b.as_matrix("matmul_nt")?;
    if k != k2 {
        return Err(Error::dim("matmul_nt", &a.shape, &b.shape));
    }
    matmul(a, &b.transpose()?)
}

/// `aᵀ · b` with `a: [k, m]` and `b: [k, n]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, _) = a.as_matrix("matmul_tn")?;
    let (k2, _) = b.as_matrix("matmul_tn")?;
    if k != k2 {
        return Err(Error::dim("matmul_tn", &a.shape, &b.shape));
    }
    matmul(&a.transpose()?, b)
}

const MR: usize = 8;
const NR: usize = 8;

/// `c = a · b` for row-major slices. The register tiling only changes which
/// outputs are computed together; every `c[i][j]` is summed over
/// `t = 0, 1, ..., k-1` in order, starting from zero. No fused multiply-add
/// is used, so the vectorized and scalar paths give identical bits.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    #[cfg(target_arch = "x86_64")]
    {
        // SAFETY: each branch only runs on a CPU reporting the feature.
        if std::is_x86_feature_detected!("avx512f") {
            unsafe { gemm_avx512(m, k, n, a, b, c) };
            return;
        }
        if std::is_x86_feature_detected!("avx2") {
            unsafe { gemm_avx2(m, k, n, a, b, c) };
            return;
        }
    }
    gemm_kernel(m, k, n, a, b, c);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn gemm_avx512(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm_kernel(m, k, n, a, b, c);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_avx2(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm_kernel(m, k, n, a, b, c);
}

#[inline(always)]
fn gemm_kernel(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    let m_full = m - m % MR;
    let n_full = n - n % NR;
    let mut panel = vec![0.0f64; k * NR];
    for j0 in (0..n_full).step_by(NR) {
        for t in 0..k {
            panel[t * NR..(t + 1) * NR].copy_from_slice(&b[t * n + j0..t * n + j0 + NR]);
        }
        for i0 in (0..m_full).step_by(MR) {
            let mut acc = [[0.0f64; NR]; MR];
            let rows: [&[f64]; MR] = std::array::from_fn(|r| &a[(i0 + r) * k..(i0 + r + 1) * k]);
            for (t, bv) in panel.chunks_exact(NR).enumerate() {
                for (row, arow) in acc.iter_mut().zip(&rows) {
                    let av = arow[t];
                    for (cv, &x) in row.iter_mut().zip(bv) {
                        *cv += av * x;
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(row);
            }
        }
    }
    if n_full < n {
        gemm_edge(0..m_full, n_full..n, k, n, a, b, c);
    }
    if m_full < m {
        gemm_edge(m_full..m, 0..n, k, n, a, b, c);
    }
}

#[inline(always)]
fn gemm_edge(
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
) {
    for i in rows {
        let crow = &mut c[i * n + cols.start..i * n + cols.end];
        crow.fill(0.0);
        for t in 0..k {
            let av = a[i * k + t];
            let brow = &b[t * n + cols.start..t * n + cols.end];
            for (cv, &x) in crow.iter_mut().zip(brow) {
                *cv += av * x;
            }
        }
    }
}

fn transpose_into(m: usize, n: usize, src: &[f64], dst: &mut [f64]) {
    const TILE: usize = 32;
    for i0 in (0..m).step_by(TILE) {
        for j0 in (0..n).step_by(TILE) {
            for i in i0..(i0 + TILE).min(m) {
                for j in j0..(j0 + TILE).min(n) {
                    dst[j * m + i] = src[i * n + j];
                }
            }
        }
    }
}

/// Stride and zero padding of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config("convolution stride must be positive".into()));
        }
        Ok(ConvGeometry { stride, padding })
    }

    /// Output extent along one axis, or a configuration error when the
    /// window does not tile the padded input exactly.
    pub fn output_extent(&self, input: usize, kernel: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if kernel == 0 || kernel > padded {
            return Err(Error::Config(format!(
                "kernel extent {kernel} does not fit padded input extent {padded}"
            )));
        }
        if (padded - kernel) % self.stride != 0 {
            return Err(Error::Config(format!(
                "(input {input} + 2*padding {} - kernel {kernel}) is not divisible by stride {}",
                self.padding, self.stride
            )));
        }
        Ok((padded - kernel) / self.stride + 1)
    }
}

impl Default for ConvGeometry {
    fn default() -> Self {
        ConvGeometry {
            stride: 1,
            padding: 0,
        }
    }
}

struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

impl ConvDims {
    fn resolve(input: &[usize], kernel: &[usize], geom: ConvGeometry) -> Result<Self> {
        let (&[n, c, h, w], &[o, kc, kh, kw]) = (input, kernel) else {
            return Err(Error::dim("conv2d", input, kernel));
        };
        if c != kc {
            return Err(Error::dim("conv2d", input, kernel));
        }
        Ok(ConvDims {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            oh: geom.output_extent(h, kh)?,
            ow: geom.output_extent(w, kw)?,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_area(&self) -> usize {
        self.oh * self.ow
    }

    fn output_shape(&self) -> [usize; 4] {
        [self.n, self.o, self.oh, self.ow]
    }
}

/// Unfolds one sample `[c, h, w]` into `[c*kh*kw, oh*ow]` patch columns.
fn im2col(d: &ConvDims, geom: ConvGeometry, sample: &[f64], cols: &mut [f64]) {
    let area = d.out_area();
    let pad = geom.padding as isize;
    for ci in 0..d.c {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (ci * d.kh + ki) * d.kw + kj;
                let dst = &mut cols[row * area..(row + 1) * area];
                for oy in 0..d.oh {
                    let iy = (oy * geom.stride + ki) as isize - pad;
                    for ox in 0..d.ow {
                        let ix = (ox * geom.stride + kj) as isize - pad;
                        dst[oy * d.ow + ox] = if iy >= 0
                            && (iy as usize) < d.h
                            && ix >= 0
                            && (ix as usize) < d.w
                        {
                            sample[(ci * d.h + iy as usize) * d.w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds patch columns back onto one `[c, h, w]` sample.
fn col2im(d: &ConvDims, geom: ConvGeometry, cols: &[f64], sample: &mut [f64]) {
    let area = d.out_area();
    let pad = geom.padding as isize;
    for ci in 0..d.c {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (ci * d.kh + ki) * d.kw + kj;
                let src = &cols[row * area..(row + 1) * area];
                for oy in 0..d.oh {
                    let iy = (oy * geom.stride + ki) as isize - pad;
                    if iy < 0 || iy as usize >= d.h {
                        continue;
                    }
                    for ox in 0..d.ow {
                        let ix = (ox * geom.stride + kj) as isize - pad;
                        if ix < 0 || ix as usize >= d.w {
                            continue;
                        }
                        sample[(ci * d.h + iy as usize) * d.w + ix as usize] += src[oy * d.ow + ox];
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation of `input: [N, C, H, W]` with
/// `kernel: [O, C, kh, kw]`, zero padded.
pub fn conv2d(input: &Tensor, kernel: &Tensor, geom: ConvGeometry) -> Result<Tensor> {
    let d = ConvDims::resolve(&input.shape, &kernel.shape, geom)?;
    let (patch, area) = (d.patch(), d.out_area());
    let sample_len = d.c * d.h * d.w;
    let mut cols = vec![0.0; patch * area];
    let mut out = vec![0.0; d.n * d.o * area];
    for s in 0..d.n {
        im2col(&d, geom, &input.data[s * sample_len..(s + 1) * sample_len], &mut cols);
        gemm(
            d.o,
            patch,
            area,
            &kernel.data,
            &cols,
            &mut out[s * d.o * area..(s + 1) * d.o * area],
        );
    }
    Tensor {
        shape: d.output_shape().to_vec(),
        data: out,
    }
    .finite("conv2d")
}

/// Error propagated to the input of a convolution: the transposed
/// convolution of `grad_output` with `feedback_kernel`.
pub fn conv2d_input_grad(
    input_shape: &[usize],
    feedback_kernel: &Tensor,
    grad_output: &Tensor,
    geom: ConvGeometry,
) -> Result<Tensor> {
    let d = ConvDims::resolve(input_shape, &feedback_kernel.shape, geom)?;
    if grad_output.shape != d.output_shape() {
        return Err(Error::dim("conv2d_backward", &grad_output.shape, &d.output_shape()));
    }
    let (patch, area) = (d.patch(), d.out_area());
    let sample_len = d.c * d.h * d.w;
    let kernel_t = feedback_kernel.clone().reshape(&[d.o, patch])?.transpose()?;
    let mut dcols = vec![0.0; patch * area];
    let mut grad_input = vec![0.0; d.n * sample_len];
    for s in 0..d.n {
        dcols.fill(0.0);
        gemm(
            patch,
            d.o,
            area,
            &kernel_t.data,
            &grad_output.data[s * d.o * area..(s + 1) * d.o * area],
            &mut dcols,
        );
        col2im(&d, geom, &dcols, &mut grad_input[s * sample_len..(s + 1) * sample_len]);
    }
    Tensor {
        shape: input_shape.to_vec(),
        data: grad_input,
    }
    .finite("conv2d_backward")
}

/// Gradient of a convolution with respect to its kernel, summed over the
/// batch in sample order.
pub fn conv2d_kernel_grad(
    input: &Tensor,
    kernel_shape: &[usize],
    grad_output: &Tensor,
    geom: ConvGeometry,
) -> Result<Tensor> {
    let d = ConvDims::resolve(&input.shape, kernel_shape, geom)?;
    if grad_output.shape != d.output_shape() {
        return Err(Error::dim("conv2d_backward", &grad_output.shape, &d.output_shape()));
    }
    let (patch, area) = (d.patch(), d.out_area());
    let sample_len = d.c * d.h * d.w;
    let mut cols = vec![0.0; patch * area];
    let mut cols_t = vec![0.0; area * patch];
    let mut per_sample = vec![0.0; d.o * patch];
    let mut grad_kernel = vec![0.0; d.o * patch];
    for s in 0..d.n {
        im2col(&d, geom, &input.data[s * sample_len..(s + 1) * sample_len], &mut cols);
        transpose_into(patch, area, &cols, &mut cols_t);
        per_sample.fill(0.0);
        gemm(
            d.o,
            area,
            patch,
            &grad_output.data[s * d.o * area..(s + 1) * d.o * area],
            &cols_t,
            &mut per_sample,
        );
        for (g, p) in grad_kernel.iter_mut().zip(&per_sample) {
            *g += p;
        }
    }
    Tensor {
        shape: kernel_shape.to_vec(),
        data: grad_kernel,
    }
    .finite("conv2d_backward")
}

/// Both backward contractions of [`conv2d`]. The input gradient flows
/// through `feedback_kernel`; the kernel gradient is the true local one.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_output: &Tensor,
    feedback_kernel: &Tensor,
    geom: ConvGeometry,
) -> Result<(Tensor, Tensor)> {
    if feedback_kernel.shape != kernel.shape {
        return Err(Error::dim("conv2d_backward", &kernel.shape, &feedback_kernel.shape));
    }
    let grad_input = conv2d_input_grad(&input.shape, feedback_kernel, grad_output, geom)?;
    let grad_kernel = conv2d_kernel_grad(input, &kernel.shape, grad_output, geom)?;
    Ok((grad_input, grad_kernel))
}

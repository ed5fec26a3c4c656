//! Dense row-major `f64` tensors with the handful of kernels the model needs:
//! elementwise maps, channel softmax, and zero-padded 2D cross-correlation with
//! hand-written backward passes.
//!
//! Every reduction runs in a fixed loop order, so results are bit-reproducible.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n = check_shape(shape)?;
        if data.len() != n {
            return Err(Error::shape(format!(
                "{} values for shape {shape:?} ({n} expected)",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    /// Zero tensor. Panics on an empty or zero dimension; use [`Tensor::full`]
    /// for shapes that come from user input.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0).expect("zeros: invalid shape")
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor {
            shape: other.shape.clone(),
            data: vec![0.0; other.data.len()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    /// `self += other`, same shape required.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.axpy(1.0, other)
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "accumulate {:?} into {:?}",
                other.shape, self.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    /// Slice `index` along the leading axis.
    pub fn slice0(&self, index: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        let shape = if self.shape.len() > 1 {
            self.shape[1..].to_vec()
        } else {
            vec![1]
        };
        Tensor {
            shape,
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
        }
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack0(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::shape(format!(
                    "stack {:?} with {:?}",
                    p.shape, first.shape
                )));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

impl BinaryOp {
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
        }
    }
}

/// Elementwise `a op b`. `b` may also broadcast over the leading (channel)
/// axis of `a`, either as `[1, ..rest]` or as `rest` itself.
pub fn elementwise(op: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| op.apply(x, y))
            .collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    let rest = &a.shape[1..];
    let broadcasts = (b.shape.len() == a.shape.len() && b.shape[0] == 1 && &b.shape[1..] == rest)
        || (!rest.is_empty() && b.shape == rest);
    if !broadcasts {
        return Err(Error::shape(format!(
            "cannot broadcast {:?} against {:?}",
            b.shape, a.shape
        )));
    }
    let inner = b.len();
    let data = a
        .data
        .chunks_exact(inner)
        .flat_map(|chunk| chunk.iter().zip(&b.data).map(|(&x, &y)| op.apply(x, y)))
        .collect();
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    elementwise(BinaryOp::Add, a, b)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    elementwise(BinaryOp::Sub, a, b)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    elementwise(BinaryOp::Mul, a, b)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    // Split by sign so exp never overflows.
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn tanh_map(x: &Tensor) -> Tensor {
    x.map(f64::tanh)
}

/// Softmax along axis 0 of a `[D, ...]` tensor, max-subtracted.
pub fn softmax_channel(x: &Tensor) -> Tensor {
    let depth = x.shape[0];
    let plane = x.len() / depth;
    let mut out = Tensor::zeros_like(x);
    for p in 0..plane {
        let mut max = f64::NEG_INFINITY;
        for d in 0..depth {
            max = max.max(x.data[d * plane + p]);
        }
        let mut total = 0.0;
        for d in 0..depth {
            let e = (x.data[d * plane + p] - max).exp();
            out.data[d * plane + p] = e;
            total += e;
        }
        for d in 0..depth {
            out.data[d * plane + p] /= total;
        }
    }
    out
}

/// Gradient of the logits given the softmax output `prob` and its cotangent.
pub fn softmax_channel_backward(prob: &Tensor, grad_prob: &Tensor) -> Tensor {
    let depth = prob.shape[0];
    let plane = prob.len() / depth;
    let mut out = Tensor::zeros_like(prob);
    for p in 0..plane {
        let mut inner = 0.0;
        for d in 0..depth {
            inner += prob.data[d * plane + p] * grad_prob.data[d * plane + p];
        }
        for d in 0..depth {
            let i = d * plane + p;
            out.data[i] = prob.data[i] * (grad_prob.data[i] - inner);
        }
    }
    out
}

struct ConvDims {
    c_in: usize,
    c_out: usize,
    k: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    stride: usize,
}

impl ConvDims {
    fn check(input: &Tensor, kernel: &Tensor, stride: usize) -> Result<Self> {
        if input.ndim() != 3 || kernel.ndim() != 4 {
            return Err(Error::shape(format!(
                "conv2d expects [C,H,W] input and [Co,Ci,k,k] kernel, got {:?} and {:?}",
                input.shape, kernel.shape
            )));
        }
        let (c_in, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
        let (c_out, kc, k, k2) = (
            kernel.shape[0],
            kernel.shape[1],
            kernel.shape[2],
            kernel.shape[3],
        );
        if k != k2 {
            return Err(Error::InvalidKernel(format!("non-square kernel {k}x{k2}")));
        }
        if k % 2 == 0 {
            return Err(Error::InvalidKernel(format!("kernel size {k} is even")));
        }
        if kc != c_in {
            return Err(Error::shape(format!(
                "kernel expects {kc} input channels, input has {c_in}"
            )));
        }
        if stride == 0 || h % stride != 0 || w % stride != 0 {
            return Err(Error::shape(format!(
                "spatial size {h}x{w} not divisible by stride {stride}"
            )));
        }
        Ok(ConvDims {
            c_in,
            c_out,
            k,
            h,
            w,
            oh: h / stride,
            ow: w / stride,
            stride,
        })
    }

    /// Input row sampled by output row `o` at kernel tap `t`, if inside the image.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let anchor = o * self.stride + (self.stride - 1) / 2;
        let pos = anchor as isize + t as isize - (self.k / 2) as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// Range of output columns whose tap `t` lands inside the input, stride 1 only.
    #[inline]
    fn valid_range(&self, t: usize, extent: usize) -> (usize, usize) {
        let off = t as isize - (self.k / 2) as isize;
        let lo = (-off).max(0) as usize;
        let hi = (extent as isize - off).min(extent as isize).max(0) as usize;
        (lo, hi.max(lo))
    }
}

/// Zero-padded "same" cross-correlation, no bias: `[C_in,H,W] * [C_out,C_in,k,k] -> [C_out,H,W]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    conv2d_strided(input, kernel, 1)
}

/// Strided variant: output is `[C_out, H/stride, W/stride]`, each output pixel
/// centred on input pixel `o*stride + (stride-1)/2`.
pub fn conv2d_strided(input: &Tensor, kernel: &Tensor, stride: usize) -> Result<Tensor> {
    let d = ConvDims::check(input, kernel, stride)?;
    let mut out = Tensor::zeros(&[d.c_out, d.oh, d.ow]);
    let (k, h, w) = (d.k, d.h, d.w);
    for co in 0..d.c_out {
        let out_plane = &mut out.data[co * d.oh * d.ow..(co + 1) * d.oh * d.ow];
        for ci in 0..d.c_in {
            let in_plane = &input.data[ci * h * w..(ci + 1) * h * w];
            let kbase = (co * d.c_in + ci) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = kernel.data[kbase + ky * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    if stride == 1 {
                        let (x0, x1) = d.valid_range(kx, w);
                        let (y0, y1) = d.valid_range(ky, h);
                        let dx = kx as isize - (k / 2) as isize;
                        let dy = ky as isize - (k / 2) as isize;
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let src = &in_plane[sy * w..(sy + 1) * w];
                            let dst = &mut out_plane[y * w..(y + 1) * w];
                            let sx0 = (x0 as isize + dx) as usize;
                            for (o, s) in dst[x0..x1].iter_mut().zip(&src[sx0..sx0 + (x1 - x0)]) {
                                *o += wv * s;
                            }
                        }
                    } else {
                        for oy in 0..d.oh {
                            let Some(sy) = d.src(oy, ky, h) else { continue };
                            for ox in 0..d.ow {
                                let Some(sx) = d.src(ox, kx, w) else { continue };
                                out_plane[oy * d.ow + ox] += wv * in_plane[sy * w + sx];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact gradients of [`conv2d`] with respect to input and kernel.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    conv2d_strided_backward(input, kernel, grad_out, 1)
}

pub fn conv2d_strided_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
) -> Result<(Tensor, Tensor)> {
    let mut grad_input = Tensor::zeros_like(input);
    let mut grad_kernel = Tensor::zeros_like(kernel);
    conv2d_strided_backward_into(input, kernel, grad_out, stride, &mut grad_input, &mut grad_kernel)?;
    Ok((grad_input, grad_kernel))
}

/// Accumulating form of the backward pass: adds into `grad_input` and `grad_kernel`.
pub fn conv2d_strided_backward_into(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    grad_input: &mut Tensor,
    grad_kernel: &mut Tensor,
) -> Result<()> {
    let d = ConvDims::check(input, kernel, stride)?;
    if grad_out.shape != [d.c_out, d.oh, d.ow] {
        return Err(Error::shape(format!(
            "conv2d grad_out {:?}, expected {:?}",
            grad_out.shape,
            [d.c_out, d.oh, d.ow]
        )));
    }
    if grad_input.shape != input.shape || grad_kernel.shape != kernel.shape {
        return Err(Error::shape("conv2d gradient accumulators mis-shaped"));
    }
    let (k, h, w) = (d.k, d.h, d.w);
    for co in 0..d.c_out {
        let g_plane = &grad_out.data[co * d.oh * d.ow..(co + 1) * d.oh * d.ow];
        for ci in 0..d.c_in {
            let in_plane = &input.data[ci * h * w..(ci + 1) * h * w];
            let gi_plane = &mut grad_input.data[ci * h * w..(ci + 1) * h * w];
            let kbase = (co * d.c_in + ci) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = kernel.data[kbase + ky * k + kx];
                    let mut gk = 0.0;
                    if stride == 1 {
                        let (x0, x1) = d.valid_range(kx, w);
                        let (y0, y1) = d.valid_range(ky, h);
                        let dx = kx as isize - (k / 2) as isize;
                        let dy = ky as isize - (k / 2) as isize;
                        let sx0 = (x0 as isize + dx) as usize;
                        let n = x1 - x0;
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let g = &g_plane[y * w + x0..y * w + x1];
                            let src = &in_plane[sy * w + sx0..sy * w + sx0 + n];
                            let dst = &mut gi_plane[sy * w + sx0..sy * w + sx0 + n];
                            for i in 0..n {
                                gk += g[i] * src[i];
                                dst[i] += wv * g[i];
                            }
                        }
                    } else {
                        for oy in 0..d.oh {
                            let Some(sy) = d.src(oy, ky, h) else { continue };
                            for ox in 0..d.ow {
                                let Some(sx) = d.src(ox, kx, w) else { continue };
                                let g = g_plane[oy * d.ow + ox];
                                gk += g * in_plane[sy * w + sx];
                                gi_plane[sy * w + sx] += wv * g;
                            }
                        }
                    }
                    grad_kernel.data[kbase + ky * k + kx] += gk;
                }
            }
        }
    }
    Ok(())
}

/// Adds a per-channel bias `[C]` to a `[C, ...]` tensor in place.
pub fn add_channel_bias(x: &mut Tensor, bias: &Tensor) -> Result<()> {
    let c = x.shape[0];
    if bias.len() != c {
        return Err(Error::shape(format!(
            "bias of {} for {c} channels",
            bias.len()
        )));
    }
    let plane = x.len() / c;
    for (chunk, b) in x.data.chunks_exact_mut(plane).zip(&bias.data) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
    Ok(())
}

/// Gradient of a channel bias: per-channel sum of the cotangent.
pub fn channel_bias_grad(grad: &Tensor) -> Tensor {
    let c = grad.shape[0];
    let plane = grad.len() / c;
    let data = grad
        .data
        .chunks_exact(plane)
        .map(|chunk| chunk.iter().sum())
        .collect();
    Tensor {
        shape: vec![c],
        data,
    }
}

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, step: f64) -> Tensor {
    let mut grad = Tensor::zeros_like(x);
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + step;
        let up = f(&probe);
        probe.data[i] = orig - step;
        let down = f(&probe);
        probe.data[i] = orig;
        grad.data[i] = (up - down) / (2.0 * step);
    }
    grad
}

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both are zero.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.data.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.data.iter().map(|v| v * v).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

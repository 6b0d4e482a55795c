//! Forward and reverse-mode passes for every layer of the mixer network.
//!
//! Each forward returns its output together with a cache that the matching
//! backward consumes by value, so a cache can feed at most one backward call:
//!
//! ```compile_fail
//! use scenemixer::layers::{gelu, gelu_backward};
//! use scenemixer::numerics::Tensor;
//! let x = Tensor::<f64>::zeros(&[2]).unwrap();
//! let (_, cache) = gelu(&x);
//! let g = x.ones_like();
//! let _ = gelu_backward(cache, &g);
//! let _ = gelu_backward(cache, &g); // cache already moved
//! ```
//!
//! All image tensors are `(n, y, x, c)`. Work is split per sample with rayon;
//! parameter gradients are reduced in sample order so the result does not
//! depend on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{Real, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Weights and bias of a convolution or dense layer. Gradients use the same
/// type.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> ConvParams<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Self {
        ConvParams { weight, bias }
    }

    fn zeros_like(&self) -> Self {
        ConvParams {
            weight: self.weight.zeros_like(),
            bias: self.bias.zeros_like(),
        }
    }

    fn out_channels(&self) -> usize {
        self.bias.len()
    }

    fn check(&self, expected: &[usize], context: &'static str) -> Result<()> {
        if self.weight.dims() != expected {
            return Err(Error::UnexpectedShape {
                context,
                expected: Shape::new(expected)?,
                actual: self.weight.shape().clone(),
            });
        }
        let out = *expected.last().unwrap_or(&0);
        if self.bias.dims() != [out] {
            return Err(Error::UnexpectedShape {
                context,
                expected: Shape::new([out])?,
                actual: self.bias.shape().clone(),
            });
        }
        Ok(())
    }
}

fn image_dims<T: Real>(x: &Tensor<T>, context: &str) -> Result<(usize, usize, usize, usize)> {
    match *x.dims() {
        [n, h, w, c] => Ok((n, h, w, c)),
        _ => Err(Error::Layer(format!(
            "{context} expects an (n, y, x, c) tensor, got {}",
            x.shape()
        ))),
    }
}

fn check_upstream<T: Real>(upstream: &Tensor<T>, expected: &Shape, context: &'static str) -> Result<()> {
    if upstream.shape() != expected {
        return Err(Error::UnexpectedShape {
            context,
            expected: expected.clone(),
            actual: upstream.shape().clone(),
        });
    }
    Ok(())
}

/// Sums per-sample parameter gradients in sample order.
fn reduce_in_order<T: Real>(parts: Vec<(Vec<T>, Vec<T>)>, grads: &mut ConvParams<T>) {
    for (w, b) in parts {
        for (g, v) in grads.weight.data_mut().iter_mut().zip(w) {
            *g += v;
        }
        for (g, v) in grads.bias.data_mut().iter_mut().zip(b) {
            *g += v;
        }
    }
}

// ---------------------------------------------------------------------------
// Patch embedding

/// Non-overlapping `patch x patch` convolution with stride `patch`.
/// Weights are `(patch, patch, c_in, d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbed<T> {
    pub params: ConvParams<T>,
    pub patch: usize,
}

#[derive(Debug)]
pub struct PatchEmbedCache<T> {
    input: Tensor<T>,
    out_shape: Shape,
}

impl<T: Real> PatchEmbed<T> {
    pub fn new(params: ConvParams<T>, patch: usize) -> Result<Self> {
        if patch == 0 {
            return Err(Error::Config("patch size must be >= 1".into()));
        }
        let dims = params.weight.dims();
        if dims.len() != 4 || dims[0] != patch || dims[1] != patch {
            return Err(Error::Layer(format!(
                "patch embedding weights must be ({patch}, {patch}, c_in, d), got {}",
                params.weight.shape()
            )));
        }
        let expected = dims.to_vec();
        params.check(&expected, "patch embedding")?;
        Ok(PatchEmbed { params, patch })
    }

    fn in_channels(&self) -> usize {
        self.params.weight.dims()[2]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, PatchEmbedCache<T>)> {
        let (n, h, w, c) = image_dims(x, "patch embedding")?;
        let p = self.patch;
        if h % p != 0 || w % p != 0 {
            return Err(Error::Layer(format!(
                "input {h}x{w} is not divisible by patch size {p}"
            )));
        }
        if c != self.in_channels() {
            return Err(Error::Layer(format!(
                "patch embedding expects {} input channels, got {c}",
                self.in_channels()
            )));
        }
        let d = self.params.out_channels();
        let (gh, gw) = (h / p, w / p);
        let wt = self.params.weight.data();
        let bias = self.params.bias.data();
        let mut out = vec![T::zero(); n * gh * gw * d];
        out.par_chunks_mut(gh * gw * d)
            .zip(x.data().par_chunks(h * w * c))
            .for_each(|(o, img)| {
                for gy in 0..gh {
                    for gx in 0..gw {
                        let tok = &mut o[(gy * gw + gx) * d..][..d];
                        tok.copy_from_slice(bias);
                        for py in 0..p {
                            for px in 0..p {
                                let row = &img[((gy * p + py) * w + gx * p + px) * c..][..c];
                                for (ci, &a) in row.iter().enumerate() {
                                    let wrow = &wt[((py * p + px) * c + ci) * d..][..d];
                                    for (t, &wv) in tok.iter_mut().zip(wrow) {
                                        *t = T::mac(*t, a, wv);
                                    }
                                }
                            }
                        }
                    }
                }
            });
        let out = Tensor::from_vec(&[n, gh, gw, d], out)?;
        let cache = PatchEmbedCache {
            input: x.clone(),
            out_shape: out.shape().clone(),
        };
        Ok((out, cache))
    }

    pub fn backward(
        &self,
        cache: PatchEmbedCache<T>,
        upstream: &Tensor<T>,
    ) -> Result<(Tensor<T>, ConvParams<T>)> {
        check_upstream(upstream, &cache.out_shape, "patch embedding backward")?;
        let x = &cache.input;
        let (n, h, w, c) = image_dims(x, "patch embedding")?;
        let p = self.patch;
        let d = self.params.out_channels();
        let (gh, gw) = (h / p, w / p);
        let wt = self.params.weight.data();
        let wlen = wt.len();

        let parts: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..n)
            .into_par_iter()
            .map(|s| {
                let img = &x.data()[s * h * w * c..][..h * w * c];
                let g = &upstream.data()[s * gh * gw * d..][..gh * gw * d];
                let mut dx = vec![T::zero(); h * w * c];
                let mut dw = vec![T::zero(); wlen];
                let mut db = vec![T::zero(); d];
                for gy in 0..gh {
                    for gx in 0..gw {
                        let gt = &g[(gy * gw + gx) * d..][..d];
                        for (b, &gv) in db.iter_mut().zip(gt) {
                            *b += gv;
                        }
                        for py in 0..p {
                            for px in 0..p {
                                let base = ((gy * p + py) * w + gx * p + px) * c;
                                for ci in 0..c {
                                    let a = img[base + ci];
                                    let k = ((py * p + px) * c + ci) * d;
                                    let wrow = &wt[k..][..d];
                                    let dwrow = &mut dw[k..][..d];
                                    let mut acc = T::zero();
                                    for j in 0..d {
                                        dwrow[j] += a * gt[j];
                                        acc += wrow[j] * gt[j];
                                    }
                                    dx[base + ci] = acc;
                                }
                            }
                        }
                    }
                }
                (dx, dw, db)
            })
            .collect();

        let mut grads = self.params.zeros_like();
        let mut dx = Vec::with_capacity(n * h * w * c);
        let mut pg = Vec::with_capacity(n);
        for (sx, w, b) in parts {
            dx.extend(sx);
            pg.push((w, b));
        }
        reduce_in_order(pg, &mut grads);
        Ok((Tensor::from_vec(x.dims(), dx)?, grads))
    }
}

// ---------------------------------------------------------------------------
// Depthwise convolution

/// Per-channel `k x k` convolution, stride 1, zero "same" padding of `k / 2`.
/// Weights are `(k, k, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthwiseConv<T> {
    pub params: ConvParams<T>,
    pub kernel: usize,
}

#[derive(Debug)]
pub struct DepthwiseCache<T> {
    input: Tensor<T>,
}

fn pad_sample<T: Real>(img: &[T], h: usize, w: usize, c: usize, r: usize) -> Vec<T> {
    let pw = w + 2 * r;
    let mut out = vec![T::zero(); (h + 2 * r) * pw * c];
    for y in 0..h {
        let dst = ((y + r) * pw + r) * c;
        out[dst..dst + w * c].copy_from_slice(&img[y * w * c..][..w * c]);
    }
    out
}

impl<T: Real> DepthwiseConv<T> {
    pub fn new(params: ConvParams<T>, kernel: usize) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Layer(format!(
                "depthwise kernel size must be odd, got {kernel}"
            )));
        }
        let c = params.out_channels();
        params.check(&[kernel, kernel, c], "depthwise convolution")?;
        Ok(DepthwiseConv { params, kernel })
    }

    pub fn channels(&self) -> usize {
        self.params.out_channels()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, DepthwiseCache<T>)> {
        let (_, h, w, c) = image_dims(x, "depthwise convolution")?;
        if c != self.channels() {
            return Err(Error::Layer(format!(
                "depthwise convolution has {} channels, input has {c}",
                self.channels()
            )));
        }
        let k = self.kernel;
        let r = k / 2;
        let pw = w + 2 * r;
        let wt = self.params.weight.data();
        let bias = self.params.bias.data();
        let mut out = vec![T::zero(); x.len()];
        out.par_chunks_mut(h * w * c)
            .zip(x.data().par_chunks(h * w * c))
            .for_each(|(o, img)| {
                let padded = pad_sample(img, h, w, c, r);
                for y in 0..h {
                    for xx in 0..w {
                        let px = &mut o[(y * w + xx) * c..][..c];
                        px.copy_from_slice(bias);
                        for ky in 0..k {
                            for kx in 0..k {
                                let src = &padded[((y + ky) * pw + xx + kx) * c..][..c];
                                let wrow = &wt[(ky * k + kx) * c..][..c];
                                for ((o, &a), &b) in px.iter_mut().zip(src).zip(wrow) {
                                    *o = T::mac(*o, a, b);
                                }
                            }
                        }
                    }
                }
            });
        let out = Tensor::from_vec(x.dims(), out)?;
        Ok((out, DepthwiseCache { input: x.clone() }))
    }

    pub fn backward(
        &self,
        cache: DepthwiseCache<T>,
        upstream: &Tensor<T>,
    ) -> Result<(Tensor<T>, ConvParams<T>)> {
        let x = &cache.input;
        check_upstream(upstream, x.shape(), "depthwise backward")?;
        let (n, h, w, c) = image_dims(x, "depthwise convolution")?;
        let k = self.kernel;
        let r = k / 2;
        let pw = w + 2 * r;
        let wt = self.params.weight.data();
        let len = h * w * c;

        let parts: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..n)
            .into_par_iter()
            .map(|s| {
                let img = &x.data()[s * len..][..len];
                let g = &upstream.data()[s * len..][..len];
                let padded = pad_sample(img, h, w, c, r);
                let mut dpad = vec![T::zero(); padded.len()];
                let mut dw = vec![T::zero(); k * k * c];
                let mut db = vec![T::zero(); c];
                for y in 0..h {
                    for xx in 0..w {
                        let gp = &g[(y * w + xx) * c..][..c];
                        for (b, &gv) in db.iter_mut().zip(gp) {
                            *b += gv;
                        }
                        for ky in 0..k {
                            for kx in 0..k {
                                let off = ((y + ky) * pw + xx + kx) * c;
                                let kofs = (ky * k + kx) * c;
                                let src = &padded[off..][..c];
                                let wrow = &wt[kofs..][..c];
                                let dwrow = &mut dw[kofs..][..c];
                                for ch in 0..c {
                                    dwrow[ch] += src[ch] * gp[ch];
                                }
                                let drow = &mut dpad[off..][..c];
                                for ch in 0..c {
                                    drow[ch] += wrow[ch] * gp[ch];
                                }
                            }
                        }
                    }
                }
                let mut dx = Vec::with_capacity(len);
                for y in 0..h {
                    dx.extend_from_slice(&dpad[((y + r) * pw + r) * c..][..w * c]);
                }
                (dx, dw, db)
            })
            .collect();

        let mut grads = self.params.zeros_like();
        let mut dx = Vec::with_capacity(x.len());
        let mut pg = Vec::with_capacity(n);
        for (sx, w, b) in parts {
            dx.extend(sx);
            pg.push((w, b));
        }
        reduce_in_order(pg, &mut grads);
        Ok((Tensor::from_vec(x.dims(), dx)?, grads))
    }
}

// ---------------------------------------------------------------------------
// Pointwise (1x1) convolution

/// Channel mixing at every position. Weights are `(c_in, c_out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointwiseConv<T> {
    pub params: ConvParams<T>,
}

#[derive(Debug)]
pub struct PointwiseCache<T> {
    input: Tensor<T>,
    out_shape: Shape,
}

/// `out[p, :] = bias + sum_i x[p, i] * w[i, :]` for each of `rows` positions.
fn matmul_bias<T: Real>(x: &[T], w: &[T], bias: &[T], rows: usize, cin: usize, cout: usize, out: &mut [T]) {
    for p in 0..rows {
        let o = &mut out[p * cout..][..cout];
        o.copy_from_slice(bias);
        let xr = &x[p * cin..][..cin];
        for (i, &a) in xr.iter().enumerate() {
            let wr = &w[i * cout..][..cout];
            for (ov, &wv) in o.iter_mut().zip(wr) {
                *ov = T::mac(*ov, a, wv);
            }
        }
    }
}

/// Gradients of [`matmul_bias`] for one block of rows. `wt` is `w` transposed.
fn matmul_bias_backward<T: Real>(
    x: &[T],
    wt: &[T],
    g: &[T],
    rows: usize,
    cin: usize,
    cout: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); rows * cin];
    let mut dw = vec![T::zero(); cin * cout];
    let mut db = vec![T::zero(); cout];
    for p in 0..rows {
        let gr = &g[p * cout..][..cout];
        let xr = &x[p * cin..][..cin];
        for (b, &gv) in db.iter_mut().zip(gr) {
            *b += gv;
        }
        for (i, &a) in xr.iter().enumerate() {
            let dwr = &mut dw[i * cout..][..cout];
            for (d, &gv) in dwr.iter_mut().zip(gr) {
                *d += a * gv;
            }
        }
        let dxr = &mut dx[p * cin..][..cin];
        for (j, &gv) in gr.iter().enumerate() {
            let wr = &wt[j * cin..][..cin];
            for (d, &wv) in dxr.iter_mut().zip(wr) {
                *d += gv * wv;
            }
        }
    }
    (dx, dw, db)
}

fn transpose<T: Real>(w: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); w.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = w[i * cols + j];
        }
    }
    out
}

impl<T: Real> PointwiseConv<T> {
    pub fn new(params: ConvParams<T>) -> Result<Self> {
        let dims = params.weight.dims().to_vec();
        if dims.len() != 2 {
            return Err(Error::Layer(format!(
                "pointwise weights must be (c_in, c_out), got {}",
                params.weight.shape()
            )));
        }
        params.check(&dims, "pointwise convolution")?;
        Ok(PointwiseConv { params })
    }

    fn io(&self) -> (usize, usize) {
        let d = self.params.weight.dims();
        (d[0], d[1])
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, PointwiseCache<T>)> {
        let (n, h, w, c) = image_dims(x, "pointwise convolution")?;
        let (cin, cout) = self.io();
        if c != cin {
            return Err(Error::Layer(format!(
                "pointwise convolution expects {cin} input channels, got {c}"
            )));
        }
        let wt = self.params.weight.data();
        let bias = self.params.bias.data();
        let rows = h * w;
        let mut out = vec![T::zero(); n * rows * cout];
        out.par_chunks_mut(rows * cout)
            .zip(x.data().par_chunks(rows * cin))
            .for_each(|(o, xs)| matmul_bias(xs, wt, bias, rows, cin, cout, o));
        let out = Tensor::from_vec(&[n, h, w, cout], out)?;
        let cache = PointwiseCache {
            input: x.clone(),
            out_shape: out.shape().clone(),
        };
        Ok((out, cache))
    }

    pub fn backward(
        &self,
        cache: PointwiseCache<T>,
        upstream: &Tensor<T>,
    ) -> Result<(Tensor<T>, ConvParams<T>)> {
        check_upstream(upstream, &cache.out_shape, "pointwise backward")?;
        let x = &cache.input;
        let (n, h, w, _) = image_dims(x, "pointwise convolution")?;
        let (cin, cout) = self.io();
        let rows = h * w;
        let wt = transpose(self.params.weight.data(), cin, cout);
        let parts: Vec<_> = (0..n)
            .into_par_iter()
            .map(|s| {
                matmul_bias_backward(
                    &x.data()[s * rows * cin..][..rows * cin],
                    &wt,
                    &upstream.data()[s * rows * cout..][..rows * cout],
                    rows,
                    cin,
                    cout,
                )
            })
            .collect();
        let mut grads = self.params.zeros_like();
        let mut dx = Vec::with_capacity(x.len());
        let mut pg = Vec::with_capacity(n);
        for (sx, w, b) in parts {
            dx.extend(sx);
            pg.push((w, b));
        }
        reduce_in_order(pg, &mut grads);
        Ok((Tensor::from_vec(x.dims(), dx)?, grads))
    }
}

// ---------------------------------------------------------------------------
// Dense head

/// Fully connected layer, `out = x W + b` with `W` shaped `(features, outputs)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub params: ConvParams<T>,
}

#[derive(Debug)]
pub struct DenseCache<T> {
    input: Tensor<T>,
    out_shape: Shape,
}

impl<T: Real> Dense<T> {
    pub fn new(params: ConvParams<T>) -> Result<Self> {
        let dims = params.weight.dims().to_vec();
        if dims.len() != 2 {
            return Err(Error::Layer(format!(
                "dense weights must be (features, outputs), got {}",
                params.weight.shape()
            )));
        }
        params.check(&dims, "dense")?;
        Ok(Dense { params })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, DenseCache<T>)> {
        let (f, k) = {
            let d = self.params.weight.dims();
            (d[0], d[1])
        };
        let n = match *x.dims() {
            [n, xf] if xf == f => n,
            _ => {
                return Err(Error::Layer(format!(
                    "dense layer expects (n, {f}) input, got {}",
                    x.shape()
                )))
            }
        };
        let mut out = vec![T::zero(); n * k];
        matmul_bias(x.data(), self.params.weight.data(), self.params.bias.data(), n, f, k, &mut out);
        let out = Tensor::from_vec(&[n, k], out)?;
        let cache = DenseCache {
            input: x.clone(),
            out_shape: out.shape().clone(),
        };
        Ok((out, cache))
    }

    pub fn backward(&self, cache: DenseCache<T>, upstream: &Tensor<T>) -> Result<(Tensor<T>, ConvParams<T>)> {
        check_upstream(upstream, &cache.out_shape, "dense backward")?;
        let d = self.params.weight.dims();
        let (f, k) = (d[0], d[1]);
        let n = cache.input.dims()[0];
        let wt = transpose(self.params.weight.data(), f, k);
        let (dx, dw, db) = matmul_bias_backward(cache.input.data(), &wt, upstream.data(), n, f, k);
        let grads = ConvParams {
            weight: Tensor::from_vec(&[f, k], dw)?,
            bias: Tensor::from_vec(&[k], db)?,
        };
        Ok((Tensor::from_vec(&[n, f], dx)?, grads))
    }
}

// ---------------------------------------------------------------------------
// GELU

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF.
#[inline]
pub fn normal_cdf<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[derive(Debug)]
pub struct GeluCache<T> {
    input: Tensor<T>,
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu<T: Real>(x: &Tensor<T>) -> (Tensor<T>, GeluCache<T>) {
    let y = x.map(|v| v * normal_cdf(v));
    (y, GeluCache { input: x.clone() })
}

pub fn gelu_backward<T: Real>(cache: GeluCache<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    check_upstream(upstream, cache.input.shape(), "gelu backward")?;
    let c = T::from_f64(FRAC_1_SQRT_2PI);
    let half = T::from_f64(-0.5);
    let data = cache
        .input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&v, &g)| g * (normal_cdf(v) + v * c * (half * v * v).exp()))
        .collect();
    Tensor::from_vec(cache.input.dims(), data)
}

// ---------------------------------------------------------------------------
// Batch normalization

/// Per-channel batch normalization over the leading `(n, y, x)` axes.
///
/// Training normalizes with the biased batch variance; the running variance
/// is updated with the unbiased estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug)]
pub struct BatchNormCache<T> {
    normalized: Tensor<T>,
    inv_std: Vec<T>,
    mode: Mode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormGrads<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::Config(format!("batch-norm momentum {momentum} not in (0, 1)")));
        }
        if eps <= 0.0 || !eps.is_finite() {
            return Err(Error::Config(format!("batch-norm epsilon {eps} must be positive")));
        }
        Ok(BatchNorm {
            gamma: Tensor::fill(&[channels], T::one())?,
            beta: Tensor::zeros(&[channels])?,
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::fill(&[channels], T::one())?,
            momentum,
            eps,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn rows(&self, x: &Tensor<T>) -> Result<usize> {
        let c = *x.dims().last().unwrap_or(&0);
        if x.dims().len() < 2 || c != self.channels() {
            return Err(Error::Layer(format!(
                "batch norm over {} channels got input {}",
                self.channels(),
                x.shape()
            )));
        }
        Ok(x.len() / c)
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, BatchNormCache<T>)> {
        match mode {
            Mode::Infer => self.infer(x),
            Mode::Train => {
                let (mean, var) = self.batch_moments(x)?;
                let m = (x.len() / self.channels()) as f64;
                let keep = T::from_f64(self.momentum);
                let blend = T::from_f64(1.0 - self.momentum);
                let bessel = T::from_f64(m / (m - 1.0));
                for ch in 0..self.channels() {
                    let rm = &mut self.running_mean.data_mut()[ch];
                    *rm = keep * *rm + blend * mean[ch];
                    let rv = &mut self.running_var.data_mut()[ch];
                    *rv = keep * *rv + blend * var[ch] * bessel;
                }
                self.normalize(x, &mean, &var, Mode::Train)
            }
        }
    }

    /// Normalizes with the running statistics; never mutates state.
    pub fn infer(&self, x: &Tensor<T>) -> Result<(Tensor<T>, BatchNormCache<T>)> {
        self.rows(x)?;
        self.normalize(x, self.running_mean.data(), self.running_var.data(), Mode::Infer)
    }

    /// Per-channel mean and biased variance.
    fn batch_moments(&self, x: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
        let m = self.rows(x)?;
        if m < 2 {
            return Err(Error::Layer(
                "batch norm in train mode needs at least two values per channel".into(),
            ));
        }
        let c = self.channels();
        let mt = T::from_f64(m as f64);
        let mut mean = vec![T::zero(); c];
        for row in x.data().chunks_exact(c) {
            for (s, &v) in mean.iter_mut().zip(row) {
                *s += v;
            }
        }
        for s in &mut mean {
            *s = *s / mt;
        }
        let mut var = vec![T::zero(); c];
        for row in x.data().chunks_exact(c) {
            for ((s, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
                let d = v - mu;
                *s += d * d;
            }
        }
        for s in &mut var {
            *s = *s / mt;
        }
        Ok((mean, var))
    }

    fn normalize(&self, x: &Tensor<T>, mean: &[T], var: &[T], mode: Mode) -> Result<(Tensor<T>, BatchNormCache<T>)> {
        let c = self.channels();
        let eps = T::from_f64(self.eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gamma = self.gamma.data();
        let beta = self.beta.data();
        let mut normalized = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks_exact(c) {
            for ch in 0..c {
                let xh = (row[ch] - mean[ch]) * inv_std[ch];
                normalized.push(xh);
                out.push(gamma[ch] * xh + beta[ch]);
            }
        }
        let cache = BatchNormCache {
            normalized: Tensor::from_vec(x.dims(), normalized)?,
            inv_std,
            mode,
        };
        Ok((Tensor::from_vec(x.dims(), out)?, cache))
    }

    pub fn backward(
        &self,
        cache: BatchNormCache<T>,
        upstream: &Tensor<T>,
    ) -> Result<(Tensor<T>, BatchNormGrads<T>)> {
        check_upstream(upstream, cache.normalized.shape(), "batch norm backward")?;
        let c = self.channels();
        let m = upstream.len() / c;
        let xh = cache.normalized.data();
        let g = upstream.data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for (xr, gr) in xh.chunks_exact(c).zip(g.chunks_exact(c)) {
            for ch in 0..c {
                dgamma[ch] += gr[ch] * xr[ch];
                dbeta[ch] += gr[ch];
            }
        }
        let gamma = self.gamma.data();
        let mut dx = Vec::with_capacity(upstream.len());
        match cache.mode {
            Mode::Train => {
                let mt = T::from_f64(m as f64);
                let scale: Vec<T> = (0..c).map(|ch| gamma[ch] * cache.inv_std[ch] / mt).collect();
                for (xr, gr) in xh.chunks_exact(c).zip(g.chunks_exact(c)) {
                    for ch in 0..c {
                        dx.push(scale[ch] * (mt * gr[ch] - dbeta[ch] - xr[ch] * dgamma[ch]));
                    }
                }
            }
            Mode::Infer => {
                for gr in g.chunks_exact(c) {
                    for ch in 0..c {
                        dx.push(gr[ch] * gamma[ch] * cache.inv_std[ch]);
                    }
                }
            }
        }
        Ok((
            Tensor::from_vec(upstream.dims(), dx)?,
            BatchNormGrads {
                gamma: Tensor::from_vec(&[c], dgamma)?,
                beta: Tensor::from_vec(&[c], dbeta)?,
            },
        ))
    }
}

// ---------------------------------------------------------------------------
// Global average pooling

#[derive(Debug)]
pub struct PoolCache {
    in_shape: Shape,
}

/// Spatial mean per channel: `(n, y, x, c) -> (n, c)`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, PoolCache)> {
    let (n, h, w, c) = image_dims(x, "global average pooling")?;
    let mut out = vec![T::zero(); n * c];
    for (s, img) in x.data().chunks_exact(h * w * c).enumerate() {
        let o = &mut out[s * c..][..c];
        for px in img.chunks_exact(c) {
            for (a, &v) in o.iter_mut().zip(px) {
                *a += v;
            }
        }
    }
    let count = T::from_f64((h * w) as f64);
    for v in &mut out {
        *v = *v / count;
    }
    Ok((
        Tensor::from_vec(&[n, c], out)?,
        PoolCache {
            in_shape: x.shape().clone(),
        },
    ))
}

pub fn global_avg_pool_backward<T: Real>(cache: PoolCache, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    let d = cache.in_shape.dims();
    let (n, h, w, c) = (d[0], d[1], d[2], d[3]);
    check_upstream(upstream, &Shape::new([n, c])?, "pooling backward")?;
    let count = T::from_f64((h * w) as f64);
    let mut dx = Vec::with_capacity(n * h * w * c);
    for s in 0..n {
        let g: Vec<T> = upstream.data()[s * c..][..c].iter().map(|&v| v / count).collect();
        for _ in 0..h * w {
            dx.extend_from_slice(&g);
        }
    }
    Tensor::from_vec(d, dx)
}

// ---------------------------------------------------------------------------
// Softmax

#[derive(Debug)]
pub struct SoftmaxCache<T> {
    output: Tensor<T>,
}

/// Row-wise softmax with max shift.
pub fn softmax<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, SoftmaxCache<T>)> {
    let k = match *x.dims() {
        [_, k] => k,
        _ => return Err(Error::Layer(format!("softmax expects (n, k), got {}", x.shape()))),
    };
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks_exact(k) {
        let mx = row.iter().copied().fold(row[0], T::max);
        let start = out.len();
        let mut total = T::zero();
        for &v in row {
            let e = (v - mx).exp();
            total += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v = *v / total;
        }
    }
    let out = Tensor::from_vec(x.dims(), out)?;
    Ok((out.clone(), SoftmaxCache { output: out }))
}

pub fn softmax_backward<T: Real>(cache: SoftmaxCache<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    let y = &cache.output;
    check_upstream(upstream, y.shape(), "softmax backward")?;
    let k = y.dims()[1];
    let mut dx = Vec::with_capacity(y.len());
    for (yr, gr) in y.data().chunks_exact(k).zip(upstream.data().chunks_exact(k)) {
        let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&p, &g)| a + p * g);
        dx.extend(yr.iter().zip(gr).map(|(&p, &g)| p * (g - dot)));
    }
    Tensor::from_vec(y.dims(), dx)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

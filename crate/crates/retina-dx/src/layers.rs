//! The layer stack: declarative network configs, parameter initialization,
//! and hand-written forward/backward passes for every layer kind.
//!
//! A `Network` owns its layers, their parameters, and the activation caches
//! the backward pass needs, so one instance must not run forward from two
//! threads at once. All accumulations run in fixed row-major order, which
//! makes training bit-reproducible for a given seed.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{streams, Rng};
use crate::tensor::{col2im, conv_out_dim, im2col, matmul, Scalar, Tensor};

/// Whether stochastic layers (dropout) and batchnorm use batch statistics
/// or behave as fixed inference-time functions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Training,
    Inference,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    Max,
    Mean,
}

impl fmt::Display for PoolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PoolMode::Max => write!(f, "max"),
            PoolMode::Mean => write!(f, "mean"),
        }
    }
}

/// One layer of the stack, as configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        filter_h: usize,
        filter_w: usize,
        num_filters: usize,
        stride: usize,
        pad: usize,
    },
    Batchnorm {
        epsilon: f64,
    },
    Relu,
    Maxpool {
        pool_h: usize,
        pool_w: usize,
        stride: usize,
        pad: usize,
        mode: PoolMode,
    },
    Fc {
        output_size: usize,
    },
    Dropout {
        probability: f64,
    },
    Softmax,
}

impl LayerSpec {
    fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Batchnorm { .. } => "batchnorm",
            LayerSpec::Relu => "relu",
            LayerSpec::Maxpool { .. } => "maxpool",
            LayerSpec::Fc { .. } => "fc",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Softmax => "softmax",
        }
    }
}

/// Declarative description of a network: a name, the per-sample input shape
/// (channels, height, width), and the ordered layer list ending in softmax.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub name: String,
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

fn conv3(num_filters: usize) -> LayerSpec {
    LayerSpec::Conv {
        filter_h: 3,
        filter_w: 3,
        num_filters,
        stride: 1,
        pad: 0,
    }
}

fn bn() -> LayerSpec {
    LayerSpec::Batchnorm { epsilon: 1e-5 }
}

fn pool2() -> LayerSpec {
    LayerSpec::Maxpool {
        pool_h: 2,
        pool_w: 2,
        stride: 2,
        pad: 0,
        mode: PoolMode::Max,
    }
}

impl NetworkConfig {
    /// Built-in architectures.
    ///
    /// `table1` is the reference two-block stack on 3×64×64 input:
    /// conv(3×3,8) → bn → relu → pool(2×2/2) → conv(3×3,16) → bn → relu →
    /// pool → fc(2) → dropout(0.3) → fc(2) → softmax. `text3` adds a third
    /// conv block of 32 filters before the fully connected head. The
    /// `*_shrunk` variants are small-input versions used by the gradient
    /// checker; `table1_shrunk` drops the second pool because the spatial
    /// extent is already 1×1 at that point on an 8×8 input.
    pub fn preset(name: &str) -> Result<Self> {
        let (input, layers): ([usize; 3], Vec<LayerSpec>) = match name {
            "table1" => (
                [3, 64, 64],
                vec![
                    conv3(8),
                    bn(),
                    LayerSpec::Relu,
                    pool2(),
                    conv3(16),
                    bn(),
                    LayerSpec::Relu,
                    pool2(),
                    LayerSpec::Fc { output_size: 2 },
                    LayerSpec::Dropout { probability: 0.3 },
                    LayerSpec::Fc { output_size: 2 },
                    LayerSpec::Softmax,
                ],
            ),
            "text3" => (
                [3, 64, 64],
                vec![
                    conv3(8),
                    bn(),
                    LayerSpec::Relu,
                    pool2(),
                    conv3(16),
                    bn(),
                    LayerSpec::Relu,
                    pool2(),
                    conv3(32),
                    bn(),
                    LayerSpec::Relu,
                    pool2(),
                    LayerSpec::Fc { output_size: 2 },
                    LayerSpec::Dropout { probability: 0.3 },
                    LayerSpec::Fc { output_size: 2 },
                    LayerSpec::Softmax,
                ],
            ),
            "table1_shrunk" => (
                [3, 8, 8],
                vec![
                    conv3(8),
                    bn(),
                    LayerSpec::Relu,
                    pool2(),
                    conv3(16),
                    bn(),
                    LayerSpec::Relu,
                    LayerSpec::Fc { output_size: 2 },
                    LayerSpec::Dropout { probability: 0.3 },
                    LayerSpec::Fc { output_size: 2 },
                    LayerSpec::Softmax,
                ],
            ),
            "text3_shrunk" => {
                let mut cfg = Self::preset("text3")?;
                cfg.name = "text3_shrunk".into();
                cfg.input = [3, 22, 22];
                return Ok(cfg);
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?} (available: table1, text3, table1_shrunk, text3_shrunk)"
                )))
            }
        };
        Ok(Self {
            name: name.to_string(),
            input,
            layers,
        })
    }

    /// The small-input variant of a preset used for gradient checking.
    pub fn gradcheck_variant(name: &str) -> Result<Self> {
        match name {
            "table1" => Self::preset("table1_shrunk"),
            "text3" => Self::preset("text3_shrunk"),
            other => Self::preset(other),
        }
    }
}

/// Pooling output size. Unlike convolution, pooling drops a trailing
/// remainder window instead of rejecting it, so e.g. a 2×2/2 pool maps
/// 29 → 14. The window must still fit at the first position.
pub fn pool_out_dim(input: usize, pool: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::InvalidParam("stride must be >= 1".into()));
    }
    let span = input as i64 + 2 * pad as i64 - pool as i64;
    if span < 0 {
        return Err(Error::ShapeMismatch(format!(
            "pool window {pool} larger than padded input {input}+2·{pad}"
        )));
    }
    Ok((span / stride as i64) as usize + 1)
}

// --- individual layers ----------------------------------------------------

struct ConvLayer<T: Scalar> {
    kernels: Tensor<T>, // Cout×Cin×kh×kw
    bias: Tensor<T>,    // Cout
    stride: usize,
    pad: usize,
    cache: Option<ConvCache<T>>,
}

struct ConvCache<T: Scalar> {
    cols: Vec<Tensor<T>>, // one im2col matrix per batch item
    in_shape: [usize; 4],
}

/// Strided 2-D convolution: `x` is N×Cin×H×W, `kernels` Cout×Cin×kh×kw,
/// `bias` has Cout entries added per output channel. Implemented as im2col
/// plus one matrix product per batch item; also returns the column matrices
/// the backward pass reuses.
fn conv2d_with_cols<T: Scalar>(
    x: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    if x.shape().len() != 4 || kernels.shape().len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "conv wants N×C×H×W input and Cout×Cin×kh×kw kernels, got {:?} and {:?}",
            x.shape(),
            kernels.shape()
        )));
    }
    let (kh, kw) = (kernels.shape()[2], kernels.shape()[3]);
    let (n, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if cin != kernels.shape()[1] {
        return Err(Error::ShapeMismatch(format!(
            "conv expects {} input channels, got {cin}",
            kernels.shape()[1]
        )));
    }
    let cout = kernels.shape()[0];
    if bias.numel() != cout {
        return Err(Error::ShapeMismatch(format!(
            "conv bias has {} entries for {cout} output channels",
            bias.numel()
        )));
    }
    let ho = conv_out_dim(h, kh, stride, pad)?;
    let wo = conv_out_dim(w, kw, stride, pad)?;

    // The bias rides along as the leading column against a constant-one row,
    // so each output element accumulates (bias, then kernel taps in
    // channel-major order) — the exact term order of the direct
    // sliding-window formulation, making the two bit-identical.
    let taps = cin * kh * kw;
    let mut aug_k = Tensor::zeros(&[cout, taps + 1]);
    for oc in 0..cout {
        let row = &mut aug_k.data_mut()[oc * (taps + 1)..(oc + 1) * (taps + 1)];
        row[0] = bias.data()[oc];
        row[1..].copy_from_slice(&kernels.data()[oc * taps..(oc + 1) * taps]);
    }

    let mut out = Tensor::zeros(&[n, cout, ho, wo]);
    let mut cols = Vec::with_capacity(n);
    let plane = cin * h * w;
    for b in 0..n {
        let xb = Tensor::new(&[cin, h, w], x.data()[b * plane..(b + 1) * plane].to_vec())?;
        let col = im2col(&xb, kh, kw, stride, pad)?;
        let t = col.shape()[1];
        let mut aug_col = Tensor::zeros(&[taps + 1, t]);
        aug_col.data_mut()[..t].fill(T::one());
        aug_col.data_mut()[t..].copy_from_slice(col.data());
        let y = matmul(&aug_k, &aug_col)?; // Cout×(Ho·Wo), bias included
        out.data_mut()[b * cout * ho * wo..(b + 1) * cout * ho * wo].copy_from_slice(y.data());
        cols.push(col);
    }
    Ok((out, cols))
}

/// Public convolution entry point (no cache); see [`conv2d_with_cols`].
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    Ok(conv2d_with_cols(x, kernels, bias, stride, pad)?.0)
}

impl<T: Scalar> ConvLayer<T> {
    fn out_channels(&self) -> usize {
        self.kernels.shape()[0]
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (out, cols) = conv2d_with_cols(x, &self.kernels, &self.bias, self.stride, self.pad)?;
        self.cache = Some(ConvCache {
            cols,
            in_shape: [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]],
        });
        Ok(out)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("conv backward called before forward".into()))?;
        let [n, cin, h, w] = cache.in_shape;
        let cout = self.out_channels();
        let (kh, kw) = (self.kernels.shape()[2], self.kernels.shape()[3]);
        let (ho, wo) = (dy.shape()[2], dy.shape()[3]);
        if dy.shape()[0] != n || dy.shape()[1] != cout {
            return Err(Error::ShapeMismatch(format!(
                "conv backward: dy {:?} does not match forward output",
                dy.shape()
            )));
        }

        let kmat = self.kernels.reshape(&[cout, cin * kh * kw])?;
        let kmat_t = kmat.transpose2d()?;
        let mut dkernels = Tensor::zeros(&[cout, cin, kh, kw]);
        let mut dbias = Tensor::zeros(&[cout]);
        let mut dx = Tensor::zeros(&[n, cin, h, w]);
        let plane = cin * h * w;
        for b in 0..n {
            let dyb = Tensor::new(
                &[cout, ho * wo],
                dy.data()[b * cout * ho * wo..(b + 1) * cout * ho * wo].to_vec(),
            )?;
            // dK accumulates dy·colsᵀ over the batch; db accumulates row sums.
            let dk = matmul(&dyb, &cache.cols[b].transpose2d()?)?;
            for (acc, v) in dkernels.data_mut().iter_mut().zip(dk.data()) {
                *acc = *acc + *v;
            }
            for oc in 0..cout {
                let mut s = T::zero();
                for t in 0..ho * wo {
                    s = s + dyb.data()[oc * ho * wo + t];
                }
                dbias.data_mut()[oc] = dbias.data_mut()[oc] + s;
            }
            let dcols = matmul(&kmat_t, &dyb)?;
            let dxb = col2im(&dcols, cin, h, w, kh, kw, self.stride, self.pad)?;
            dx.data_mut()[b * plane..(b + 1) * plane].copy_from_slice(dxb.data());
        }
        Ok((dx, dkernels, dbias))
    }
}

struct BatchnormLayer<T: Scalar> {
    gamma: Tensor<T>,
    beta: Tensor<T>,
    epsilon: f64,
    running_mean: Option<Tensor<T>>,
    running_var: Option<Tensor<T>>,
    cache: Option<BnCache<T>>,
}

struct BnCache<T: Scalar> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    shape: [usize; 4], // N, C, spatial, 1 (2-D inputs use spatial = 1)
}

// Channel count and flattened (N, spatial) geometry of a bn input; accepts
// N×C×H×W activations and N×C vectors alike.
fn bn_geometry(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [n, c, h, w] => Ok((*n, *c, h * w)),
        [n, c] => Ok((*n, *c, 1)),
        other => Err(Error::ShapeMismatch(format!(
            "batchnorm expects N×C or N×C×H×W, got {other:?}"
        ))),
    }
}

impl<T: Scalar> BatchnormLayer<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (n, c, sp) = bn_geometry(x.shape())?;
        if c != self.gamma.numel() {
            return Err(Error::ShapeMismatch(format!(
                "batchnorm has {} channels, input has {c}",
                self.gamma.numel()
            )));
        }
        let eps = T::from_f64(self.epsilon);
        let m = n * sp;
        let mut y = Tensor::zeros(x.shape());
        match mode {
            Mode::Training => {
                if m < 2 {
                    return Err(Error::InvalidParam(format!(
                        "batchnorm needs at least 2 values per channel in training, got {m}"
                    )));
                }
                let mf = T::from_f64(m as f64);
                let mut xhat = Tensor::zeros(x.shape());
                let mut inv_std = Vec::with_capacity(c);
                let mut batch_mean = Tensor::zeros(&[c]);
                let mut batch_var = Tensor::zeros(&[c]);
                for ch in 0..c {
                    let mut sum = T::zero();
                    for b in 0..n {
                        let base = (b * c + ch) * sp;
                        for s in 0..sp {
                            sum = sum + x.data()[base + s];
                        }
                    }
                    let mean = sum / mf;
                    // Biased variance: divide by the count, not count-1.
                    let mut sq = T::zero();
                    for b in 0..n {
                        let base = (b * c + ch) * sp;
                        for s in 0..sp {
                            let d = x.data()[base + s] - mean;
                            sq = sq + d * d;
                        }
                    }
                    let var = sq / mf;
                    let istd = T::one() / (var + eps).sqrt();
                    for b in 0..n {
                        let base = (b * c + ch) * sp;
                        for s in 0..sp {
                            let xh = (x.data()[base + s] - mean) * istd;
                            xhat.data_mut()[base + s] = xh;
                            y.data_mut()[base + s] =
                                self.gamma.data()[ch] * xh + self.beta.data()[ch];
                        }
                    }
                    inv_std.push(istd);
                    batch_mean.data_mut()[ch] = mean;
                    batch_var.data_mut()[ch] = var;
                }
                // Running statistics blend toward the batch values with
                // momentum 0.9, starting from the conventional (0, 1).
                let keep = T::from_f64(0.9);
                let take = T::from_f64(0.1);
                let (rm0, rv0) = match (self.running_mean.take(), self.running_var.take()) {
                    (Some(rm), Some(rv)) => (rm, rv),
                    _ => (Tensor::zeros(&[c]), Tensor::full(&[c], T::one())),
                };
                let mut rm = rm0;
                let mut rv = rv0;
                for ch in 0..c {
                    rm.data_mut()[ch] = keep * rm.data()[ch] + take * batch_mean.data()[ch];
                    rv.data_mut()[ch] = keep * rv.data()[ch] + take * batch_var.data()[ch];
                }
                self.running_mean = Some(rm);
                self.running_var = Some(rv);
                self.cache = Some(BnCache {
                    xhat,
                    inv_std,
                    shape: [n, c, sp, 1],
                });
            }
            Mode::Inference => {
                let (rm, rv) = match (&self.running_mean, &self.running_var) {
                    (Some(rm), Some(rv)) => (rm, rv),
                    _ => {
                        return Err(Error::State(
                            "batchnorm inference requires populated running statistics"
                                .into(),
                        ))
                    }
                };
                for ch in 0..c {
                    let istd = T::one() / (rv.data()[ch] + eps).sqrt();
                    for b in 0..n {
                        let base = (b * c + ch) * sp;
                        for s in 0..sp {
                            y.data_mut()[base + s] = self.gamma.data()[ch]
                                * ((x.data()[base + s] - rm.data()[ch]) * istd)
                                + self.beta.data()[ch];
                        }
                    }
                }
                self.cache = None;
            }
        }
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let cache = self.cache.take().ok_or_else(|| {
            Error::State("batchnorm backward called before a training-mode forward".into())
        })?;
        let [n, c, sp, _] = cache.shape;
        let mf = T::from_f64((n * sp) as f64);
        let mut dgamma = Tensor::zeros(&[c]);
        let mut dbeta = Tensor::zeros(&[c]);
        let mut dx = Tensor::zeros(dy.shape());
        for ch in 0..c {
            // First pass: channel sums of dy, dy·xhat.
            let mut s_dy = T::zero();
            let mut s_dyx = T::zero();
            for b in 0..n {
                let base = (b * c + ch) * sp;
                for s in 0..sp {
                    let d = dy.data()[base + s];
                    s_dy = s_dy + d;
                    s_dyx = s_dyx + d * cache.xhat.data()[base + s];
                }
            }
            dgamma.data_mut()[ch] = s_dyx;
            dbeta.data_mut()[ch] = s_dy;
            // dx folds in the gradient through the batch mean and variance:
            // dx = γ·istd/m · (m·dy − Σdy − x̂·Σ(dy·x̂)).
            let scale = self.gamma.data()[ch] * cache.inv_std[ch] / mf;
            for b in 0..n {
                let base = (b * c + ch) * sp;
                for s in 0..sp {
                    let d = dy.data()[base + s];
                    let xh = cache.xhat.data()[base + s];
                    dx.data_mut()[base + s] = scale * (mf * d - s_dy - xh * s_dyx);
                }
            }
        }
        Ok((dx, dgamma, dbeta))
    }
}

struct ReluLayer<T: Scalar> {
    cache: Option<Vec<bool>>, // x > 0 mask
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> ReluLayer<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.cache = Some(x.data().iter().map(|&v| v > T::zero()).collect());
        x.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let mask = self
            .cache
            .take()
            .ok_or_else(|| Error::State("relu backward called before forward".into()))?;
        if mask.len() != dy.numel() {
            return Err(Error::ShapeMismatch("relu backward shape".into()));
        }
        let mut dx = dy.clone();
        for (d, keep) in dx.data_mut().iter_mut().zip(&mask) {
            if !keep {
                *d = T::zero();
            }
        }
        Ok(dx)
    }
}

struct PoolLayer<T: Scalar> {
    pool_h: usize,
    pool_w: usize,
    stride: usize,
    pad: usize,
    mode: PoolMode,
    cache: Option<PoolCache>,
    _marker: std::marker::PhantomData<T>,
}

struct PoolCache {
    in_shape: [usize; 4],
    out_shape: [usize; 4],
    // Max mode: flat input index feeding each output element.
    argmax: Vec<usize>,
}

impl<T: Scalar> PoolLayer<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let ho = pool_out_dim(h, self.pool_h, self.stride, self.pad)?;
        let wo = pool_out_dim(w, self.pool_w, self.stride, self.pad)?;
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let mut argmax = Vec::new();
        if self.mode == PoolMode::Max {
            argmax.resize(n * c * ho * wo, 0);
        }
        let window = T::from_f64((self.pool_h * self.pool_w) as f64);
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * h * w;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let o = ((b * c + ch) * ho + oy) * wo + ox;
                        match self.mode {
                            PoolMode::Max => {
                                // Ties keep the first window position in
                                // row-major order (strict > to replace).
                                let mut best: Option<(T, usize)> = None;
                                for ky in 0..self.pool_h {
                                    let iy = (oy * self.stride + ky) as i64 - self.pad as i64;
                                    if iy < 0 || iy >= h as i64 {
                                        continue;
                                    }
                                    for kx in 0..self.pool_w {
                                        let ix =
                                            (ox * self.stride + kx) as i64 - self.pad as i64;
                                        if ix < 0 || ix >= w as i64 {
                                            continue;
                                        }
                                        let idx = base + iy as usize * w + ix as usize;
                                        let v = x.data()[idx];
                                        if best.map_or(true, |(bv, _)| v > bv) {
                                            best = Some((v, idx));
                                        }
                                    }
                                }
                                let (v, idx) = best.ok_or_else(|| {
                                    Error::ShapeMismatch(
                                        "pool window entirely outside the input".into(),
                                    )
                                })?;
                                out.data_mut()[o] = v;
                                argmax[o] = idx;
                            }
                            PoolMode::Mean => {
                                // Padding contributes zeros; the divisor is
                                // always the full window size.
                                let mut s = T::zero();
                                for ky in 0..self.pool_h {
                                    let iy = (oy * self.stride + ky) as i64 - self.pad as i64;
                                    if iy < 0 || iy >= h as i64 {
                                        continue;
                                    }
                                    for kx in 0..self.pool_w {
                                        let ix =
                                            (ox * self.stride + kx) as i64 - self.pad as i64;
                                        if ix < 0 || ix >= w as i64 {
                                            continue;
                                        }
                                        s = s + x.data()[base + iy as usize * w + ix as usize];
                                    }
                                }
                                out.data_mut()[o] = s / window;
                            }
                        }
                    }
                }
            }
        }
        self.cache = Some(PoolCache {
            in_shape: [n, c, h, w],
            out_shape: [n, c, ho, wo],
            argmax,
        });
        Ok(out)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("pool backward called before forward".into()))?;
        if dy.shape() != cache.out_shape {
            return Err(Error::ShapeMismatch(format!(
                "pool backward: dy {:?} vs forward output {:?}",
                dy.shape(),
                cache.out_shape
            )));
        }
        let [n, c, h, w] = cache.in_shape;
        let [_, _, ho, wo] = cache.out_shape;
        let mut dx = Tensor::zeros(&[n, c, h, w]);
        match self.mode {
            PoolMode::Max => {
                for (o, &src) in cache.argmax.iter().enumerate() {
                    dx.data_mut()[src] = dx.data_mut()[src] + dy.data()[o];
                }
            }
            PoolMode::Mean => {
                let window = T::from_f64((self.pool_h * self.pool_w) as f64);
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * h * w;
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let g = dy.data()[((b * c + ch) * ho + oy) * wo + ox] / window;
                                for ky in 0..self.pool_h {
                                    let iy = (oy * self.stride + ky) as i64 - self.pad as i64;
                                    if iy < 0 || iy >= h as i64 {
                                        continue;
                                    }
                                    for kx in 0..self.pool_w {
                                        let ix =
                                            (ox * self.stride + kx) as i64 - self.pad as i64;
                                        if ix < 0 || ix >= w as i64 {
                                            continue;
                                        }
                                        let t = base + iy as usize * w + ix as usize;
                                        dx.data_mut()[t] = dx.data_mut()[t] + g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(dx)
    }
}

struct FcLayer<T: Scalar> {
    weight: Tensor<T>, // Out×In
    bias: Tensor<T>,   // Out
    cache: Option<FcCache<T>>,
}

struct FcCache<T: Scalar> {
    x_flat: Tensor<T>,
    in_shape: Vec<usize>,
}

impl<T: Scalar> FcLayer<T> {
    /// Flattens all non-batch dims, then y = x·Wᵀ + b.
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = x.shape()[0];
        let flat: usize = x.shape()[1..].iter().product();
        if flat != self.weight.shape()[1] {
            return Err(Error::ShapeMismatch(format!(
                "fc expects {} inputs per sample, got {flat}",
                self.weight.shape()[1]
            )));
        }
        let x_flat = x.reshape(&[n, flat])?;
        let mut y = matmul(&x_flat, &self.weight.transpose2d()?)?;
        let out = self.weight.shape()[0];
        for b in 0..n {
            for o in 0..out {
                y.data_mut()[b * out + o] = y.data()[b * out + o] + self.bias.data()[o];
            }
        }
        self.cache = Some(FcCache {
            x_flat,
            in_shape: x.shape().to_vec(),
        });
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("fc backward called before forward".into()))?;
        let (n, out) = (cache.x_flat.shape()[0], self.weight.shape()[0]);
        if dy.shape() != [n, out] {
            return Err(Error::ShapeMismatch(format!(
                "fc backward: dy {:?}, expected [{n}, {out}]",
                dy.shape()
            )));
        }
        let dweight = matmul(&dy.transpose2d()?, &cache.x_flat)?;
        let mut dbias = Tensor::zeros(&[out]);
        for b in 0..n {
            for o in 0..out {
                dbias.data_mut()[o] = dbias.data_mut()[o] + dy.data()[b * out + o];
            }
        }
        let dx = matmul(dy, &self.weight)?.reshape(&cache.in_shape)?;
        Ok((dx, dweight, dbias))
    }
}

struct DropoutLayer<T: Scalar> {
    probability: f64,
    cache: Option<Vec<T>>, // per-element scale: 0 or 1/(1-p)
}

impl<T: Scalar> DropoutLayer<T> {
    /// Inverted dropout: surviving activations are scaled by 1/(1−p) during
    /// training so inference is the identity.
    fn forward(&mut self, x: &Tensor<T>, mode: Mode, rng: &mut Rng) -> Tensor<T> {
        if mode == Mode::Inference || self.probability == 0.0 {
            self.cache = None;
            return x.clone();
        }
        let keep = 1.0 - self.probability;
        let scale = T::from_f64(1.0 / keep);
        let mask: Vec<T> = (0..x.numel())
            .map(|_| {
                if rng.uniform() < keep {
                    scale
                } else {
                    T::zero()
                }
            })
            .collect();
        let mut y = x.clone();
        for (v, s) in y.data_mut().iter_mut().zip(&mask) {
            *v = *v * *s;
        }
        self.cache = Some(mask);
        y
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        match self.cache.take() {
            Some(mask) => {
                let mut dx = dy.clone();
                for (d, s) in dx.data_mut().iter_mut().zip(&mask) {
                    *d = *d * *s;
                }
                dx
            }
            // Identity forward (inference or p = 0) has identity backward.
            None => dy.clone(),
        }
    }
}

// --- softmax and the cross-entropy loss -----------------------------------

/// Row-wise stabilized softmax of an N×C matrix.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.shape().len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "softmax expects N×C, got {:?}",
            logits.shape()
        )));
    }
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    let mut out = Tensor::zeros(&[n, c]);
    for b in 0..n {
        let row = &logits.data()[b * c..(b + 1) * c];
        let mut m = row[0];
        for &v in &row[1..] {
            if v > m {
                m = v;
            }
        }
        let mut s = T::zero();
        for j in 0..c {
            let e = (row[j] - m).exp();
            out.data_mut()[b * c + j] = e;
            s = s + e;
        }
        for j in 0..c {
            out.data_mut()[b * c + j] = out.data()[b * c + j] / s;
        }
    }
    Ok(out)
}

/// Mean cross-entropy of already-softmaxed probabilities, plus the gradient
/// with respect to the logits that produced them: (probs − onehot)/N.
pub fn xent_from_probs<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (n, c) = (probs.shape()[0], probs.shape()[1]);
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    for &l in labels {
        if l >= c {
            return Err(Error::BadLabel(l));
        }
    }
    let nf = T::from_f64(n as f64);
    let mut loss = T::zero();
    let mut dlogits = probs.clone();
    for (b, &l) in labels.iter().enumerate() {
        loss = loss - probs.data()[b * c + l].ln();
        dlogits.data_mut()[b * c + l] = dlogits.data()[b * c + l] - T::one();
    }
    for d in dlogits.data_mut() {
        *d = *d / nf;
    }
    Ok((loss / nf, dlogits))
}

/// Stabilized softmax + mean cross-entropy in one step.
/// Returns (probabilities, loss, dlogits).
pub fn softmax_xent<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(Tensor<T>, T, Tensor<T>)> {
    let probs = softmax_rows(logits)?;
    let (loss, dlogits) = xent_from_probs(&probs, labels)?;
    Ok((probs, loss, dlogits))
}

// --- the network ----------------------------------------------------------

enum Layer<T: Scalar> {
    Conv(ConvLayer<T>),
    Batchnorm(BatchnormLayer<T>),
    Relu(ReluLayer<T>),
    Pool(PoolLayer<T>),
    Fc(FcLayer<T>),
    Dropout(DropoutLayer<T>),
    Softmax,
}

/// A built network: layers with parameters and activation caches, plus the
/// generator driving dropout masks. Forward/backward mutate the caches, so
/// an instance is single-writer.
pub struct Network<T: Scalar = f32> {
    config: NetworkConfig,
    layers: Vec<Layer<T>>,
    // Name prefix per layer with parameters ("conv1", "bn2", ...).
    names: Vec<Option<String>>,
    dropout_rng: Rng,
    seed: u64,
}

impl<T: Scalar> fmt::Debug for Network<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Network({:?}, {} layers, seed {})",
            self.config.name,
            self.layers.len(),
            self.seed
        )
    }
}

/// Validates the layer composition against the input shape and allocates
/// initialized parameters: He-normal weights (std = sqrt(2/fan_in)) for
/// conv/fc, zero biases, unit gamma, zero beta. All randomness comes from
/// `seed`; the same seed gives bit-identical parameters.
pub fn build_network<T: Scalar>(config: &NetworkConfig, seed: u64) -> Result<Network<T>> {
    let mut init_rng = Rng::with_stream(seed, streams::INIT);
    let mut shape: Vec<usize> = config.input.to_vec();
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::Config(format!(
            "input shape {:?} has a zero dimension",
            config.input
        )));
    }
    let mut layers = Vec::with_capacity(config.layers.len());
    let mut names = Vec::with_capacity(config.layers.len());
    let (mut n_conv, mut n_bn, mut n_fc) = (0, 0, 0);
    let mut softmax_at = None;

    for (i, spec) in config.layers.iter().enumerate() {
        let fail = |msg: String| Error::Config(format!("layer {} ({}): {msg}", i + 1, spec.kind()));
        match *spec {
            LayerSpec::Conv {
                filter_h,
                filter_w,
                num_filters,
                stride,
                pad,
            } => {
                if filter_h == 0 || filter_w == 0 || num_filters == 0 || stride == 0 {
                    return Err(fail("all sizes must be positive".into()));
                }
                if shape.len() != 3 {
                    return Err(fail(format!("needs C×H×W input, has {shape:?}")));
                }
                let (cin, h, w) = (shape[0], shape[1], shape[2]);
                let ho = conv_out_dim(h, filter_h, stride, pad)
                    .map_err(|e| fail(e.to_string()))?;
                let wo = conv_out_dim(w, filter_w, stride, pad)
                    .map_err(|e| fail(e.to_string()))?;
                let fan_in = cin * filter_h * filter_w;
                let std = (2.0 / fan_in as f64).sqrt();
                let kernels = Tensor::from_fn(&[num_filters, cin, filter_h, filter_w], || {
                    T::from_f64(init_rng.normal(0.0, std))
                });
                n_conv += 1;
                names.push(Some(format!("conv{n_conv}")));
                layers.push(Layer::Conv(ConvLayer {
                    kernels,
                    bias: Tensor::zeros(&[num_filters]),
                    stride,
                    pad,
                    cache: None,
                }));
                shape = vec![num_filters, ho, wo];
            }
            LayerSpec::Batchnorm { epsilon } => {
                if !(epsilon > 0.0) {
                    return Err(fail(format!("epsilon must be > 0, got {epsilon}")));
                }
                if shape.is_empty() {
                    return Err(fail("needs at least a channel dimension".into()));
                }
                let c = shape[0];
                n_bn += 1;
                names.push(Some(format!("bn{n_bn}")));
                layers.push(Layer::Batchnorm(BatchnormLayer {
                    gamma: Tensor::full(&[c], T::one()),
                    beta: Tensor::zeros(&[c]),
                    epsilon,
                    running_mean: None,
                    running_var: None,
                    cache: None,
                }));
            }
            LayerSpec::Relu => {
                names.push(None);
                layers.push(Layer::Relu(ReluLayer {
                    cache: None,
                    _marker: std::marker::PhantomData,
                }));
            }
            LayerSpec::Maxpool {
                pool_h,
                pool_w,
                stride,
                pad,
                mode,
            } => {
                if pool_h == 0 || pool_w == 0 || stride == 0 {
                    return Err(fail("all sizes must be positive".into()));
                }
                if shape.len() != 3 {
                    return Err(fail(format!("needs C×H×W input, has {shape:?}")));
                }
                let ho = pool_out_dim(shape[1], pool_h, stride, pad)
                    .map_err(|e| fail(e.to_string()))?;
                let wo = pool_out_dim(shape[2], pool_w, stride, pad)
                    .map_err(|e| fail(e.to_string()))?;
                names.push(None);
                layers.push(Layer::Pool(PoolLayer {
                    pool_h,
                    pool_w,
                    stride,
                    pad,
                    mode,
                    cache: None,
                    _marker: std::marker::PhantomData,
                }));
                shape = vec![shape[0], ho, wo];
            }
            LayerSpec::Fc { output_size } => {
                if output_size == 0 {
                    return Err(fail("output size must be positive".into()));
                }
                let fan_in: usize = shape.iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                let weight = Tensor::from_fn(&[output_size, fan_in], || {
                    T::from_f64(init_rng.normal(0.0, std))
                });
                n_fc += 1;
                names.push(Some(format!("fc{n_fc}")));
                layers.push(Layer::Fc(FcLayer {
                    weight,
                    bias: Tensor::zeros(&[output_size]),
                    cache: None,
                }));
                shape = vec![output_size];
            }
            LayerSpec::Dropout { probability } => {
                if !(0.0..1.0).contains(&probability) {
                    return Err(fail(format!(
                        "probability must be in [0,1), got {probability}"
                    )));
                }
                names.push(None);
                layers.push(Layer::Dropout(DropoutLayer {
                    probability,
                    cache: None,
                }));
            }
            LayerSpec::Softmax => {
                if shape.len() != 1 {
                    return Err(fail(format!("needs a flat input, has {shape:?}")));
                }
                softmax_at = Some(i);
                names.push(None);
                layers.push(Layer::Softmax);
            }
        }
    }

    if softmax_at != Some(config.layers.len().saturating_sub(1)) || config.layers.is_empty() {
        return Err(Error::Config(
            "the layer list must end with exactly one softmax".into(),
        ));
    }
    if shape.len() != 1 || shape[0] < 2 {
        return Err(Error::Config(format!(
            "network must emit at least 2 class scores, emits {shape:?}"
        )));
    }

    Ok(Network {
        config: config.clone(),
        layers,
        names,
        dropout_rng: Rng::with_stream(seed, streams::DROPOUT),
        seed,
    })
}

impl<T: Scalar> Network<T> {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_classes(&self) -> usize {
        // Composition is validated at build time; the last fc decides.
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Fc(fc) => Some(fc.weight.shape()[0]),
                _ => None,
            })
            .expect("validated networks contain an fc layer")
    }

    /// Runs the full stack and returns class probabilities (N×classes).
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let want = &self.config.input;
        if x.shape().len() != 4 || x.shape()[1..] != want[..] {
            return Err(Error::ShapeMismatch(format!(
                "network expects N×{}×{}×{} input, got {:?}",
                want[0],
                want[1],
                want[2],
                x.shape()
            )));
        }
        let mut cur = x.clone();
        for layer in self.layers.iter_mut() {
            cur = match layer {
                Layer::Conv(l) => l.forward(&cur)?,
                Layer::Batchnorm(l) => l.forward(&cur, mode)?,
                Layer::Relu(l) => l.forward(&cur),
                Layer::Pool(l) => l.forward(&cur)?,
                Layer::Fc(l) => l.forward(&cur)?,
                Layer::Dropout(l) => l.forward(&cur, mode, &mut self.dropout_rng),
                Layer::Softmax => softmax_rows(&cur)?,
            };
        }
        Ok(cur)
    }

    /// Backpropagates a loss gradient with respect to the logits through the
    /// whole stack and returns gradients keyed exactly like the trainable
    /// parameters. The softmax layer passes the gradient through unchanged
    /// because [`softmax_xent`] already differentiates through it.
    pub fn backward(&mut self, dlogits: &Tensor<T>) -> Result<BTreeMap<String, Tensor<T>>> {
        let mut grads = BTreeMap::new();
        let mut cur = dlogits.clone();
        for (layer, name) in self.layers.iter_mut().zip(&self.names).rev() {
            cur = match layer {
                Layer::Conv(l) => {
                    let (dx, dk, db) = l.backward(&cur)?;
                    let p = name.as_ref().unwrap();
                    grads.insert(format!("{p}.kernels"), dk);
                    grads.insert(format!("{p}.bias"), db);
                    dx
                }
                Layer::Batchnorm(l) => {
                    let (dx, dg, db) = l.backward(&cur)?;
                    let p = name.as_ref().unwrap();
                    grads.insert(format!("{p}.gamma"), dg);
                    grads.insert(format!("{p}.beta"), db);
                    dx
                }
                Layer::Relu(l) => l.backward(&cur)?,
                Layer::Pool(l) => l.backward(&cur)?,
                Layer::Fc(l) => {
                    let (dx, dw, db) = l.backward(&cur)?;
                    let p = name.as_ref().unwrap();
                    grads.insert(format!("{p}.weight"), dw);
                    grads.insert(format!("{p}.bias"), db);
                    dx
                }
                Layer::Dropout(l) => l.backward(&cur),
                Layer::Softmax => cur,
            };
        }
        Ok(grads)
    }

    /// Trainable parameters in deterministic layer order.
    pub fn trainable_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (layer, name) in self.layers.iter().zip(&self.names) {
            match layer {
                Layer::Conv(l) => {
                    let p = name.as_ref().unwrap();
                    out.push((format!("{p}.kernels"), &l.kernels));
                    out.push((format!("{p}.bias"), &l.bias));
                }
                Layer::Batchnorm(l) => {
                    let p = name.as_ref().unwrap();
                    out.push((format!("{p}.gamma"), &l.gamma));
                    out.push((format!("{p}.beta"), &l.beta));
                }
                Layer::Fc(l) => {
                    let p = name.as_ref().unwrap();
                    out.push((format!("{p}.weight"), &l.weight));
                    out.push((format!("{p}.bias"), &l.bias));
                }
                _ => {}
            }
        }
        out
    }

    /// Non-trainable state tensors (batchnorm running statistics), only
    /// those actually populated.
    pub fn state_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (layer, name) in self.layers.iter().zip(&self.names) {
            if let Layer::Batchnorm(l) = layer {
                let p = name.as_ref().unwrap();
                if let Some(rm) = &l.running_mean {
                    out.push((format!("{p}.running_mean"), rm));
                }
                if let Some(rv) = &l.running_var {
                    out.push((format!("{p}.running_var"), rv));
                }
            }
        }
        out
    }

    pub fn trainable_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (layer, name) in self.layers.iter_mut().zip(&self.names) {
            match layer {
                Layer::Conv(l) => {
                    let p = name.as_ref().unwrap();
                    out.push((format!("{p}.kernels"), &mut l.kernels));
                    out.push((format!("{p}.bias"), &mut l.bias));
                }
                Layer::Batchnorm(l) => {
                    let p = name.as_ref().unwrap();
                    out.push((format!("{p}.gamma"), &mut l.gamma));
                    out.push((format!("{p}.beta"), &mut l.beta));
                }
                Layer::Fc(l) => {
                    let p = name.as_ref().unwrap();
                    out.push((format!("{p}.weight"), &mut l.weight));
                    out.push((format!("{p}.bias"), &mut l.bias));
                }
                _ => {}
            }
        }
        out
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.trainable_params()
            .into_iter()
            .chain(self.state_tensors())
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.trainable_params_mut()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Overwrites one tensor by name — trainable parameters or batchnorm
    /// running statistics (which become populated). Shapes must match; for
    /// running stats the channel count is checked.
    pub fn restore_tensor(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        for (layer, lname) in self.layers.iter_mut().zip(&self.names) {
            let Some(prefix) = lname else { continue };
            let Some(member) = name
                .strip_prefix(prefix.as_str())
                .and_then(|r| r.strip_prefix('.'))
            else {
                continue;
            };
            let slot: &mut Tensor<T> = match (layer, member) {
                (Layer::Conv(l), "kernels") => &mut l.kernels,
                (Layer::Conv(l), "bias") => &mut l.bias,
                (Layer::Batchnorm(l), "gamma") => &mut l.gamma,
                (Layer::Batchnorm(l), "beta") => &mut l.beta,
                (Layer::Batchnorm(l), "running_mean") => {
                    l.running_mean.get_or_insert_with(|| Tensor::zeros(&[l.gamma.numel()]))
                }
                (Layer::Batchnorm(l), "running_var") => {
                    l.running_var.get_or_insert_with(|| Tensor::zeros(&[l.gamma.numel()]))
                }
                (Layer::Fc(l), "weight") => &mut l.weight,
                (Layer::Fc(l), "bias") => &mut l.bias,
                _ => continue,
            };
            if slot.shape() != tensor.shape() {
                return Err(Error::CheckpointShape(format!(
                    "tensor {name:?} has shape {:?}, network expects {:?}",
                    tensor.shape(),
                    slot.shape()
                )));
            }
            *slot = tensor;
            return Ok(());
        }
        Err(Error::CheckpointShape(format!(
            "tensor {name:?} does not exist in this network"
        )))
    }

    /// Snapshot of the dropout generator; restoring it replays the same
    /// mask sequence (used to freeze masks during finite differencing).
    pub fn rng_snapshot(&self) -> Rng {
        self.dropout_rng.clone()
    }

    pub fn restore_rng(&mut self, rng: Rng) {
        self.dropout_rng = rng;
    }
}

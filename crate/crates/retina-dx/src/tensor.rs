//! Dense tensors and the bulk numeric primitives the network is built on.
//!
//! Tensors are flat row-major buffers with an explicit shape; activations and
//! images use NCHW order. All reductions run in a fixed row-major order so
//! results are bit-reproducible run to run.

use std::fmt;

use crate::error::{Error, Result};

/// Element type of a tensor. Training and inference use `f32`; the
/// gradient-check harness runs the same code in `f64`.
pub trait Scalar:
    num_traits::Float + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense N-dimensional array, row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!(
                "zero-sized dimension in shape {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} implies {numel} elements, data has {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// Fills row-major from repeated calls to `f`.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut() -> T) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(|_| f()).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Same data, new shape. Element count must match.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} ({} elements) to {shape:?} ({numel} elements)",
                self.shape,
                self.data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Flat offset of NCHW coordinates. Only valid on rank-4 tensors.
    pub fn idx4(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 4);
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    pub fn convert<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2d(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "transpose2d expects a matrix, got {:?}",
                self.shape
            )));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self {
            shape: vec![n, m],
            data,
        })
    }
}

/// Matrix product of `a` (M×K) and `b` (K×N).
///
/// Each output element accumulates over `k` in ascending order starting from
/// zero, which is the same order as the naive triple loop; results are
/// bit-identical to it.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::ShapeMismatch(format!(
            "matmul expects M×K · K×N, got {:?} · {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![T::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    // i-k-j loop: cache friendly, and per-element accumulation order over k
    // is identical to the i-j-k triple loop.
    for i in 0..m {
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// Output spatial size of a convolution-style window. Errors unless the
/// window tiles the padded input exactly.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::InvalidParam("stride must be >= 1".into()));
    }
    let span = input as i64 + 2 * pad as i64 - kernel as i64;
    if span < 0 || span % stride as i64 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "window {kernel} with stride {stride}, pad {pad} does not produce an integral output size on input {input}"
        )));
    }
    Ok((span / stride as i64) as usize + 1)
}

/// Unrolls receptive fields of a C×H×W input into a (C·kh·kw)×(Ho·Wo)
/// matrix; column `t` holds the window of output position `t`, with
/// zero padding outside the image.
pub fn im2col<T: Scalar>(
    x: &Tensor<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    if x.shape().len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "im2col expects C×H×W, got {:?}",
            x.shape()
        )));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ho = conv_out_dim(h, kh, stride, pad)?;
    let wo = conv_out_dim(w, kw, stride, pad)?;
    let rows = c * kh * kw;
    let cols = ho * wo;
    let mut out = vec![T::zero(); rows * cols];
    let xd = x.data();
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as i64 - pad as i64;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as i64 - pad as i64;
                        let v = if iy >= 0 && iy < h as i64 && ix >= 0 && ix < w as i64 {
                            xd[(ch * h + iy as usize) * w + ix as usize]
                        } else {
                            T::zero()
                        };
                        out[row * cols + oy * wo + ox] = v;
                    }
                }
            }
        }
    }
    Tensor::new(&[rows, cols], out)
}

/// Adjoint of [`im2col`]: scatter-adds the column matrix back onto a
/// C×H×W buffer. Used by the convolution backward pass.
pub fn col2im<T: Scalar>(
    cols: &Tensor<T>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let ho = conv_out_dim(h, kh, stride, pad)?;
    let wo = conv_out_dim(w, kw, stride, pad)?;
    if cols.shape() != [c * kh * kw, ho * wo] {
        return Err(Error::ShapeMismatch(format!(
            "col2im expects {:?}, got {:?}",
            [c * kh * kw, ho * wo],
            cols.shape()
        )));
    }
    let mut out = vec![T::zero(); c * h * w];
    let cd = cols.data();
    let ncols = ho * wo;
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as i64 - pad as i64;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as i64 - pad as i64;
                        if iy >= 0 && iy < h as i64 && ix >= 0 && ix < w as i64 {
                            let t = (ch * h + iy as usize) * w + ix as usize;
                            out[t] = out[t] + cd[row * ncols + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

//! Brute-force reference implementations used to cross-check the fast paths.
//!
//! Everything here is written as directly as possible from the definitions
//! (explicit loops, no shared code with the implementations under test) and
//! is only intended for tests and the acceptance suite.

use crate::clahe::ClaheParams;
use crate::error::{Error, Result};
use crate::image::Image8;
use crate::tensor::{Scalar, Tensor};

/// Naive i-j-k triple-loop matrix product.
pub fn naive_matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    assert_eq!(k, b.shape()[0]);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::zero();
            for p in 0..k {
                acc = acc + a.data()[i * k + p] * b.data()[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(&[m, n], out).unwrap()
}

/// Direct sliding-window cross-correlation over an N×C×H×W input.
/// Kernels are Cout×Cin×kh×kw; bias is per output channel.
pub fn direct_conv2d<T: Scalar>(
    x: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kin, kh, kw) = (
        kernels.shape()[0],
        kernels.shape()[1],
        kernels.shape()[2],
        kernels.shape()[3],
    );
    if kin != cin {
        return Err(Error::ShapeMismatch(format!(
            "kernel channels {kin} vs input channels {cin}"
        )));
    }
    let span_h = h as i64 + 2 * pad as i64 - kh as i64;
    let span_w = w as i64 + 2 * pad as i64 - kw as i64;
    if span_h < 0 || span_w < 0 || span_h % stride as i64 != 0 || span_w % stride as i64 != 0 {
        return Err(Error::ShapeMismatch("non-integral conv output".into()));
    }
    let ho = (span_h / stride as i64) as usize + 1;
    let wo = (span_w / stride as i64) as usize + 1;
    let mut out = Tensor::zeros(&[n, cout, ho, wo]);
    for b in 0..n {
        for oc in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.data()[oc];
                    for ic in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as i64 - pad as i64;
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if iy >= 0 && iy < h as i64 && ix >= 0 && ix < w as i64 {
                                    let xv = x.data()
                                        [((b * cin + ic) * h + iy as usize) * w + ix as usize];
                                    let kv =
                                        kernels.data()[((oc * cin + ic) * kh + ky) * kw + kx];
                                    acc = acc + xv * kv;
                                }
                            }
                        }
                    }
                    let o = ((b * cout + oc) * ho + oy) * wo + ox;
                    out.data_mut()[o] = acc;
                }
            }
        }
    }
    Ok(out)
}

// --- brute-force CLAHE ---------------------------------------------------

// Tile column range `[x0, x1)` for tile index i of tiles over width w.
fn tile_range(i: usize, tiles: usize, extent: usize) -> (usize, usize) {
    (i * extent / tiles, (i + 1) * extent / tiles)
}

// Center coordinate of a tile, on the pixel grid.
fn tile_center(i: usize, tiles: usize, extent: usize) -> f64 {
    let (lo, hi) = tile_range(i, tiles, extent);
    (lo + hi - 1) as f64 * 0.5
}

// Mapped value for intensity `v` under the tile with index (tx, ty),
// recomputed from scratch: histogram, clip+redistribute, mid-bin CDF.
fn tile_mapped_value(img: &Image8, p: &ClaheParams, tx: usize, ty: usize, v: u8) -> f64 {
    let (x0, x1) = tile_range(tx, p.tiles_x, img.width());
    let (y0, y1) = tile_range(ty, p.tiles_y, img.height());
    let npix = (x1 - x0) * (y1 - y0);

    let mut hist = vec![0.0f64; p.bins];
    for y in y0..y1 {
        for x in x0..x1 {
            let val = img.get(x, y, 0) as usize;
            hist[val * p.bins / 256] += 1.0;
        }
    }

    let clip = (p.clip_limit * npix as f64).ceil();
    let mut excess = 0.0;
    for h in hist.iter_mut() {
        if *h > clip {
            excess += *h - clip;
            *h = clip;
        }
    }
    let share = excess / p.bins as f64;
    for h in hist.iter_mut() {
        *h += share;
    }

    // CDF evaluated at the middle of the value's bin, so a perfectly uniform
    // histogram maps every value to itself.
    let bin = v as usize * p.bins / 256;
    let below: f64 = hist[..bin].iter().sum();
    let cdf = (below + 0.5 * hist[bin]) / npix as f64;
    (255.0 * cdf).round().clamp(0.0, 255.0)
}

// Indices of the two tile centers bracketing coordinate `c`, plus the blend
// weight toward the second one. Clamps outside the first/last center.
fn bracket(coord: usize, tiles: usize, extent: usize) -> (usize, usize, f64) {
    let c = coord as f64;
    if tiles == 1 || c <= tile_center(0, tiles, extent) {
        return (0, 0, 0.0);
    }
    if c >= tile_center(tiles - 1, tiles, extent) {
        return (tiles - 1, tiles - 1, 0.0);
    }
    for i in 0..tiles - 1 {
        let lo = tile_center(i, tiles, extent);
        let hi = tile_center(i + 1, tiles, extent);
        if c >= lo && c < hi {
            return (i, i + 1, (c - lo) / (hi - lo));
        }
    }
    unreachable!("coordinate not bracketed");
}

/// Per-pixel brute-force CLAHE: for every pixel, recompute the four
/// neighboring tile mappings and blend them bilinearly.
pub fn reference_clahe(img: &Image8, p: &ClaheParams) -> Image8 {
    assert_eq!(img.channels(), 1);
    let (w, h) = (img.width(), img.height());
    let mut out = vec![0u8; w * h];
    for y in 0..h {
        let (ty0, ty1, wy) = bracket(y, p.tiles_y, h);
        for x in 0..w {
            let (tx0, tx1, wx) = bracket(x, p.tiles_x, w);
            let v = img.get(x, y, 0);
            let m00 = tile_mapped_value(img, p, tx0, ty0, v);
            let m10 = tile_mapped_value(img, p, tx1, ty0, v);
            let m01 = tile_mapped_value(img, p, tx0, ty1, v);
            let m11 = tile_mapped_value(img, p, tx1, ty1, v);
            let top = m00 * (1.0 - wx) + m10 * wx;
            let bot = m01 * (1.0 - wx) + m11 * wx;
            let blended = top * (1.0 - wy) + bot * wy;
            out[y * w + x] = blended.round().clamp(0.0, 255.0) as u8;
        }
    }
    Image8::new(w, h, 1, out).unwrap()
}

//! Contrast-limited adaptive histogram equalization.
//!
//! The image is divided into a grid of tiles; each tile gets its own
//! clipped-histogram equalization mapping, and every pixel is bilinearly
//! blended between the mappings of the four nearest tile centers. Unlike the
//! per-pixel brute-force reference, this implementation precomputes one
//! 256-entry lookup table per tile and one bracketing table per axis, so the
//! whole pass is linear in the pixel count.

use crate::error::{Error, Result};
use crate::image::Image8;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClaheParams {
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub clip_limit: f64,
    pub bins: usize,
}

impl Default for ClaheParams {
    fn default() -> Self {
        Self {
            tiles_x: 8,
            tiles_y: 8,
            clip_limit: 0.01,
            bins: 256,
        }
    }
}

impl ClaheParams {
    pub fn validate(&self) -> Result<()> {
        if self.tiles_x == 0 || self.tiles_y == 0 {
            return Err(Error::InvalidParam(format!(
                "tile grid must be positive, got {}x{}",
                self.tiles_x, self.tiles_y
            )));
        }
        if self.bins < 2 {
            return Err(Error::InvalidParam(format!(
                "need at least 2 histogram bins, got {}",
                self.bins
            )));
        }
        if !(self.clip_limit > 0.0 && self.clip_limit <= 1.0) {
            return Err(Error::InvalidParam(format!(
                "clip limit must be in (0,1], got {}",
                self.clip_limit
            )));
        }
        Ok(())
    }
}

// Tile i of `tiles` covers [lo, hi) of an axis of length `extent`.
fn tile_bounds(i: usize, tiles: usize, extent: usize) -> (usize, usize) {
    (i * extent / tiles, (i + 1) * extent / tiles)
}

fn tile_center(i: usize, tiles: usize, extent: usize) -> f64 {
    let (lo, hi) = tile_bounds(i, tiles, extent);
    (lo + hi - 1) as f64 * 0.5
}

/// One equalization lookup table (value -> mapped value, already rounded)
/// per tile, row-major over (tile_y, tile_x).
pub(crate) fn tile_mappings(img: &Image8, p: &ClaheParams) -> Vec<Vec<f64>> {
    let mut luts = Vec::with_capacity(p.tiles_x * p.tiles_y);
    for ty in 0..p.tiles_y {
        let (y0, y1) = tile_bounds(ty, p.tiles_y, img.height());
        for tx in 0..p.tiles_x {
            let (x0, x1) = tile_bounds(tx, p.tiles_x, img.width());
            let npix = ((x1 - x0) * (y1 - y0)) as f64;

            let mut hist = vec![0.0f64; p.bins];
            for y in y0..y1 {
                for x in x0..x1 {
                    hist[img.get(x, y, 0) as usize * p.bins / 256] += 1.0;
                }
            }

            // Clip each bin at ceil(clip_limit * tile pixels) and hand the
            // total excess back uniformly to every bin.
            let clip = (p.clip_limit * npix).ceil();
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

            // CDF at the middle of each value's bin; this keeps an exactly
            // uniform histogram mapping every value to itself.
            let mut below = vec![0.0f64; p.bins];
            let mut acc = 0.0;
            for (b, h) in hist.iter().enumerate() {
                below[b] = acc;
                acc += *h;
            }
            let lut = (0..256usize)
                .map(|v| {
                    let bin = v * p.bins / 256;
                    let cdf = (below[bin] + 0.5 * hist[bin]) / npix;
                    (255.0 * cdf).round().clamp(0.0, 255.0)
                })
                .collect();
            luts.push(lut);
        }
    }
    luts
}

// For every coordinate along one axis: the two bracketing tile indices and
// the blend weight toward the second. Coordinates outside the first/last
// tile center clamp to that tile alone.
fn bracket_table(extent: usize, tiles: usize) -> Vec<(usize, usize, f64)> {
    let centers: Vec<f64> = (0..tiles).map(|i| tile_center(i, tiles, extent)).collect();
    let mut table = Vec::with_capacity(extent);
    let mut i = 0usize;
    for coord in 0..extent {
        let c = coord as f64;
        if tiles == 1 || c <= centers[0] {
            table.push((0, 0, 0.0));
        } else if c >= centers[tiles - 1] {
            table.push((tiles - 1, tiles - 1, 0.0));
        } else {
            // Coordinates are visited in increasing order, so the lower
            // bracket index only ever moves forward.
            while c >= centers[i + 1] {
                i += 1;
            }
            table.push((i, i + 1, (c - centers[i]) / (centers[i + 1] - centers[i])));
        }
    }
    table
}

/// CLAHE over a single-channel image. The image must be at least as large as
/// the tile grid so every tile holds at least one pixel.
pub fn clahe(img: &Image8, p: &ClaheParams) -> Result<Image8> {
    p.validate()?;
    if img.channels() != 1 {
        return Err(Error::InvalidParam(format!(
            "clahe expects a single-channel image, got {} channels",
            img.channels()
        )));
    }
    if img.width() < p.tiles_x || img.height() < p.tiles_y {
        return Err(Error::InvalidParam(format!(
            "image {}x{} is smaller than the {}x{} tile grid",
            img.width(),
            img.height(),
            p.tiles_x,
            p.tiles_y
        )));
    }

    let luts = tile_mappings(img, p);
    let bx = bracket_table(img.width(), p.tiles_x);
    let by = bracket_table(img.height(), p.tiles_y);

    let (w, h) = (img.width(), img.height());
    let mut out = vec![0u8; w * h];
    for y in 0..h {
        let (ty0, ty1, wy) = by[y];
        for x in 0..w {
            let (tx0, tx1, wx) = bx[x];
            let v = img.get(x, y, 0) as usize;
            let m00 = luts[ty0 * p.tiles_x + tx0][v];
            let m10 = luts[ty0 * p.tiles_x + tx1][v];
            let m01 = luts[ty1 * p.tiles_x + tx0][v];
            let m11 = luts[ty1 * p.tiles_x + tx1][v];
            let top = m00 * (1.0 - wx) + m10 * wx;
            let bot = m01 * (1.0 - wx) + m11 * wx;
            let blended = top * (1.0 - wy) + bot * wy;
            out[y * w + x] = blended.round().clamp(0.0, 255.0) as u8;
        }
    }
    Image8::new(w, h, 1, out)
}

/// CLAHE applied independently to each channel of an RGB image.
pub fn enhance_color(img: &Image8, p: &ClaheParams) -> Result<Image8> {
    if img.channels() != 3 {
        return Err(Error::InvalidParam(format!(
            "enhance_color expects an RGB image, got {} channels",
            img.channels()
        )));
    }
    let mut out = img.clone();
    for ch in 0..3 {
        out.set_channel(ch, &clahe(&img.channel(ch), p)?);
    }
    Ok(out)
}

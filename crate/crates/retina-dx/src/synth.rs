//! Synthetic fundus images for self-contained training runs and tests.
//!
//! Each image is a dark frame holding a shaded reddish disc. Healthy images
//! stay below the bright-lesion threshold everywhere; images with signs add
//! a handful of small bright blobs inside the disc, angularly spread so they
//! form separate clusters.

use crate::data::Label;
use crate::error::{Error, Result};
use crate::image::Image8;
use crate::rng::{streams, Rng};

/// Luma level that separates lesion pixels from disc background.
pub const LESION_LUMA_THRESHOLD: u8 = 240;

/// Base disc color before shading (R, G, B).
const DISC_COLOR: [f64; 3] = [195.0, 105.0, 55.0];
/// Bright lesion color; its luma is ≈251, safely above the threshold.
const LESION_COLOR: [u8; 3] = [255, 252, 235];
/// Disc pixels clamp here so healthy luma can never reach the threshold.
const DISC_MAX: f64 = 235.0;

/// Deterministically renders one RGB fundus of `size`×`size` (size ≥ 32).
/// All draws come from the synthesis stream offset by the class index, so
/// (label, seed, size) fully determines the pixels.
pub fn synth_fundus(label: Label, seed: u64, size: usize) -> Result<Image8> {
    if size < 32 {
        return Err(Error::InvalidParam(format!(
            "synthetic fundus needs size >= 32, got {size}"
        )));
    }
    let mut rng = Rng::with_stream(seed, streams::SYNTH + label.index() as u64);
    let mut img = Image8::zeros(size, size, 3);

    let c = (size as f64 - 1.0) / 2.0;
    let r = size as f64 * rng.uniform_in(0.38, 0.40);

    // Disc with quadratic radial shading plus a little per-pixel noise.
    for y in 0..size {
        for x in 0..size {
            let d2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2);
            if d2 > r * r {
                continue;
            }
            let shade = 1.0 - 0.30 * (d2 / (r * r));
            let noise = rng.uniform_in(-10.0, 10.0);
            for (ch, base) in DISC_COLOR.iter().enumerate() {
                let v = (base * shade + noise).clamp(0.0, DISC_MAX);
                img.set(x, y, ch, v.round() as u8);
            }
        }
    }

    if label == Label::DrSigns {
        // 3..=8 bright blobs at spread angles, mid-radius, so they stay
        // inside the disc and apart from each other.
        let k = 3 + rng.index(6);
        for i in 0..k {
            let angle = std::f64::consts::TAU * i as f64 / k as f64 + rng.uniform_in(-0.05, 0.05);
            let dist = r * rng.uniform_in(0.40, 0.65);
            let brad = rng.uniform_in(1.2, 2.4);
            let bx = c + dist * angle.cos();
            let by = c + dist * angle.sin();
            let x_lo = (bx - brad).floor().max(0.0) as usize;
            let x_hi = ((bx + brad).ceil() as usize).min(size - 1);
            let y_lo = (by - brad).floor().max(0.0) as usize;
            let y_hi = ((by + brad).ceil() as usize).min(size - 1);
            for y in y_lo..=y_hi {
                for x in x_lo..=x_hi {
                    let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
                    if d2 <= brad * brad {
                        for (ch, &v) in LESION_COLOR.iter().enumerate() {
                            img.set(x, y, ch, v);
                        }
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Counts 4-connected clusters of pixels with luma strictly above
/// `threshold`, keeping only clusters of at least `min_size` pixels.
pub fn bright_clusters(img: &Image8, threshold: u8, min_size: usize) -> usize {
    let (w, h) = (img.width(), img.height());
    let luma = img.luma();
    let mut visited = vec![false; w * h];
    let mut clusters = 0usize;
    for start in 0..w * h {
        if visited[start] || luma[start] <= threshold {
            continue;
        }
        let mut count = 0usize;
        let mut stack = vec![start];
        visited[start] = true;
        while let Some(idx) = stack.pop() {
            count += 1;
            let (x, y) = (idx % w, idx / w);
            let mut push = |nx: usize, ny: usize| {
                let n = ny * w + nx;
                if !visited[n] && luma[n] > threshold {
                    visited[n] = true;
                    stack.push(n);
                }
            };
            if x > 0 {
                push(x - 1, y);
            }
            if x + 1 < w {
                push(x + 1, y);
            }
            if y > 0 {
                push(x, y - 1);
            }
            if y + 1 < h {
                push(x, y + 1);
            }
        }
        if count >= min_size {
            clusters += 1;
        }
    }
    clusters
}

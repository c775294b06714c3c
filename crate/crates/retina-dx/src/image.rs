//! 8-bit images and the fundus preprocessing pipeline: boundary-detect the
//! retina against the black background, crop, contrast-enhance, resize, and
//! convert to a normalized tensor.

use crate::clahe::{enhance_color, ClaheParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Interleaved 8-bit image, row-major; 1 (grayscale) or 3 (RGB) channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image8 {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<u8>,
}

impl Image8 {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidParam(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidParam(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::InvalidParam(format!(
                "pixel buffer has {} bytes, expected {}",
                pixels.len(),
                width * height * channels
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::new(width, height, channels, vec![0; width * height * channels]).unwrap()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize, ch: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + ch]
    }

    pub fn set(&mut self, x: usize, y: usize, ch: usize, v: u8) {
        self.pixels[(y * self.width + x) * self.channels + ch] = v;
    }

    /// Rec.601 luma, rounded to nearest. Grayscale images return their own
    /// values.
    pub fn luma(&self) -> Vec<u8> {
        if self.channels == 1 {
            return self.pixels.clone();
        }
        self.pixels
            .chunks_exact(3)
            .map(|px| {
                let y = 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64;
                y.round() as u8
            })
            .collect()
    }

    /// Extracts one channel as a grayscale image.
    pub fn channel(&self, ch: usize) -> Image8 {
        let pixels = (0..self.width * self.height)
            .map(|i| self.pixels[i * self.channels + ch])
            .collect();
        Image8::new(self.width, self.height, 1, pixels).unwrap()
    }

    /// Replaces one channel from a same-sized grayscale image.
    pub fn set_channel(&mut self, ch: usize, plane: &Image8) {
        assert_eq!(plane.channels, 1);
        assert_eq!((plane.width, plane.height), (self.width, self.height));
        for i in 0..self.width * self.height {
            self.pixels[i * self.channels + ch] = plane.pixels[i];
        }
    }

    /// Grayscale content replicated into three channels; RGB returned as is.
    pub fn to_rgb(&self) -> Image8 {
        if self.channels == 3 {
            return self.clone();
        }
        let pixels = self.pixels.iter().flat_map(|&v| [v, v, v]).collect();
        Image8::new(self.width, self.height, 3, pixels).unwrap()
    }
}

/// Inclusive bounding box in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn full_frame(img: &Image8) -> Self {
        Self {
            x0: 0,
            y0: 0,
            x1: img.width - 1,
            y1: img.height - 1,
        }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }
}

/// Finds the retina by thresholding luma and taking the bounding box of the
/// largest 4-connected foreground component.
///
/// A component covering less than 10% of the frame is treated as noise and
/// the full frame is returned instead, so degenerate inputs always succeed.
/// Ties between equally large components go to the one whose first pixel in
/// row-major order comes first.
pub fn detect_retina_bbox(img: &Image8, threshold: u8) -> BBox {
    let (w, h) = (img.width, img.height);
    let luma = img.luma();
    let mask: Vec<bool> = luma.iter().map(|&v| v > threshold).collect();

    let mut visited = vec![false; w * h];
    let mut best_count = 0usize;
    let mut best_box = None;
    let mut stack = Vec::new();

    // Row-major scan: components are discovered in order of their top-left
    // pixel, so keeping the first largest implements the tie-break.
    for start in 0..w * h {
        if !mask[start] || visited[start] {
            continue;
        }
        let mut count = 0usize;
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0usize, 0usize);
        visited[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            count += 1;
            let (x, y) = (i % w, i / w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            if x > 0 && mask[i - 1] && !visited[i - 1] {
                visited[i - 1] = true;
                stack.push(i - 1);
            }
            if x + 1 < w && mask[i + 1] && !visited[i + 1] {
                visited[i + 1] = true;
                stack.push(i + 1);
            }
            if y > 0 && mask[i - w] && !visited[i - w] {
                visited[i - w] = true;
                stack.push(i - w);
            }
            if y + 1 < h && mask[i + w] && !visited[i + w] {
                visited[i + w] = true;
                stack.push(i + w);
            }
        }
        if count > best_count {
            best_count = count;
            best_box = Some(BBox { x0, y0, x1, y1 });
        }
    }

    match best_box {
        Some(b) if best_count * 10 >= w * h => b,
        _ => BBox::full_frame(img),
    }
}

pub fn crop(img: &Image8, bbox: BBox) -> Image8 {
    let (w, c) = (bbox.width(), img.channels);
    let mut pixels = Vec::with_capacity(w * bbox.height() * c);
    for y in bbox.y0..=bbox.y1 {
        let row = (y * img.width + bbox.x0) * c;
        pixels.extend_from_slice(&img.pixels[row..row + w * c]);
    }
    Image8::new(w, bbox.height(), c, pixels).unwrap()
}

/// Bilinear resize with half-pixel-center coordinate mapping. Output samples
/// are rounded to the nearest integer, ties away from zero.
pub fn resize_bilinear(img: &Image8, out_w: usize, out_h: usize) -> Image8 {
    assert!(out_w >= 1 && out_h >= 1);
    let (w, h, c) = (img.width, img.height, img.channels);
    let scale_x = w as f64 / out_w as f64;
    let scale_y = h as f64 / out_h as f64;
    let mut pixels = vec![0u8; out_w * out_h * c];
    for oy in 0..out_h {
        let sy = ((oy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx = ((ox as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            for ch in 0..c {
                let p00 = img.get(x0, y0, ch) as f64;
                let p10 = img.get(x1, y0, ch) as f64;
                let p01 = img.get(x0, y1, ch) as f64;
                let p11 = img.get(x1, y1, ch) as f64;
                let top = p00 * (1.0 - fx) + p10 * fx;
                let bot = p01 * (1.0 - fx) + p11 * fx;
                let v = top * (1.0 - fy) + bot * fy;
                pixels[(oy * out_w + ox) * c + ch] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Image8::new(out_w, out_h, c, pixels).unwrap()
}

/// Luma threshold used by the boundary detector in the standard pipeline.
pub const RETINA_LUMA_THRESHOLD: u8 = 15;

/// Full preprocessing for one fundus image: boundary crop, per-channel
/// CLAHE, resize to `out_size`², then scale into a [0,1] tensor of shape
/// 3×out_size×out_size. Grayscale inputs are replicated to RGB first.
pub fn preprocess(img: &Image8, params: &ClaheParams, out_size: usize) -> Result<Tensor<f32>> {
    if out_size == 0 {
        return Err(Error::InvalidParam("output size must be positive".into()));
    }
    let rgb = img.to_rgb();
    let bbox = detect_retina_bbox(&rgb, RETINA_LUMA_THRESHOLD);
    let cropped = crop(&rgb, bbox);
    let enhanced = enhance_color(&cropped, params)?;
    let resized = resize_bilinear(&enhanced, out_size, out_size);

    // HWC interleaved u8 -> CHW f32 in [0,1].
    let mut data = vec![0.0f32; 3 * out_size * out_size];
    for ch in 0..3 {
        for y in 0..out_size {
            for x in 0..out_size {
                data[(ch * out_size + y) * out_size + x] =
                    resized.get(x, y, ch) as f32 / 255.0;
            }
        }
    }
    Tensor::new(&[3, out_size, out_size], data)
}

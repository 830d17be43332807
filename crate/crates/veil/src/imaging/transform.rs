//! Image transformations trackers apply to training data to disrupt
//! cloaks: Gaussian blur, Gaussian noise, JPEG recompression, and random
//! rotation/shift/zoom augmentation.

use std::io::Cursor;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{Error, Result};

/// Symmetric reflection (edge repeated) of an out-of-range index.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i % period;
    if m < 0 {
        m += period;
    }
    if m < n {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Separable Gaussian blur with reflection at the borders.
pub fn gaussian_blur(img: &Image, kernel_size: usize, sigma: f64) -> Result<Image> {
    if kernel_size % 2 == 0 || kernel_size == 0 {
        return Err(Error::Param(format!("kernel size must be odd, got {kernel_size}")));
    }
    if kernel_size > img.height().min(img.width()) {
        return Err(Error::Param(format!(
            "kernel {kernel_size} larger than image {}x{}",
            img.height(),
            img.width()
        )));
    }
    if sigma <= 0.0 {
        return Err(Error::Param(format!("sigma must be positive, got {sigma}")));
    }
    if kernel_size == 1 {
        return Ok(img.clone());
    }

    let r = (kernel_size / 2) as isize;
    let mut kernel = Vec::with_capacity(kernel_size);
    for i in 0..kernel_size {
        let d = i as f64 - r as f64;
        kernel.push((-d * d / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }

    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let mut out = vec![0.0; h * w * ch];
    let mut tmp = vec![0.0; h * w];
    for c in 0..ch {
        let plane = img.plane(c);
        // Horizontal pass.
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    let sx = reflect(x as isize + i as isize - r, w);
                    acc += k * plane[y * w + sx];
                }
                tmp[y * w + x] = acc;
            }
        }
        // Vertical pass.
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    let sy = reflect(y as isize + i as isize - r, h);
                    acc += k * tmp[sy * w + x];
                }
                out[(c * h + y) * w + x] = acc;
            }
        }
    }
    Image::from_raw_clamped(h, w, ch, out)
}

/// Adds i.i.d. `N(0, std^2)` noise to every pixel and clamps to `[0, 1]`.
/// `std = 0` returns the input unchanged.
pub fn gaussian_noise(img: &Image, std: f64, rng: &mut impl Rng) -> Result<Image> {
    if std < 0.0 || !std.is_finite() {
        return Err(Error::Param(format!("noise std must be >= 0, got {std}")));
    }
    if std == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::Param(e.to_string()))?;
    let noisy: Vec<f64> = img.pixels().iter().map(|p| p + normal.sample(rng)).collect();
    Image::from_raw_clamped(img.height(), img.width(), img.channels(), noisy)
}

/// Encodes to JFIF JPEG at the given quality and decodes back.
pub fn jpeg_roundtrip(img: &Image, quality: u8) -> Result<Image> {
    if !(5..=95).contains(&quality) {
        return Err(Error::Param(format!("jpeg quality must be in [5, 95], got {quality}")));
    }
    let to_byte = |p: f64| (p * 255.0).round().clamp(0.0, 255.0) as u8;
    let (h, w, ch) = (img.height(), img.width(), img.channels());

    let mut bytes = Vec::with_capacity(h * w * ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                bytes.push(to_byte(img.get(c, y, x)));
            }
        }
    }
    let color = if ch == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };

    let mut encoded = Cursor::new(Vec::new());
    image::codecs::jpeg::JpegEncoder::new_with_quality(&mut encoded, quality)
        .encode(&bytes, w as u32, h as u32, color)
        .map_err(|e| Error::Numerical(format!("jpeg encode: {e}")))?;
    let decoded = image::load_from_memory(encoded.get_ref())
        .map_err(|e| Error::Numerical(format!("jpeg decode: {e}")))?;

    if ch == 1 {
        let g = decoded.to_luma8();
        Image::from_fn(h, w, 1, |_, y, x| {
            f64::from(g.get_pixel(x as u32, y as u32).0[0]) / 255.0
        })
    } else {
        let rgb = decoded.to_rgb8();
        Image::from_fn(h, w, 3, |c, y, x| {
            f64::from(rgb.get_pixel(x as u32, y as u32).0[c]) / 255.0
        })
    }
}

/// Ranges for the random training-time augmentation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Maximum rotation either way, degrees.
    pub rotation_deg: f64,
    /// Maximum horizontal shift as a fraction of width.
    pub shift_h: f64,
    /// Maximum vertical shift as a fraction of height.
    pub shift_v: f64,
    /// Maximum zoom deviation from 1.0 (0.15 samples scale in [0.85, 1.15]).
    pub zoom: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            rotation_deg: 20.0,
            shift_h: 0.15,
            shift_v: 0.15,
            zoom: 0.15,
        }
    }
}

/// Applies a fixed rotation (degrees), shift (fractions of the image
/// size) and zoom about the image center, sampling bilinearly with
/// reflection padding.
pub fn apply_affine(img: &Image, rot_deg: f64, shift_x: f64, shift_y: f64, zoom: f64) -> Image {
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let theta = rot_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let tx = shift_x * w as f64;
    let ty = shift_y * h as f64;
    let inv_zoom = 1.0 / zoom;

    let mut out = vec![0.0; h * w * ch];
    for y in 0..h {
        for x in 0..w {
            // Destination -> source: undo translation, then rotation/zoom.
            let dx = x as f64 - cx - tx;
            let dy = y as f64 - cy - ty;
            let sx = cx + (cos * dx + sin * dy) * inv_zoom;
            let sy = cy + (-sin * dx + cos * dy) * inv_zoom;

            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let xi = [reflect(x0 as isize, w), reflect(x0 as isize + 1, w)];
            let yi = [reflect(y0 as isize, h), reflect(y0 as isize + 1, h)];
            for c in 0..ch {
                let plane = img.plane(c);
                let v = (1.0 - fy) * ((1.0 - fx) * plane[yi[0] * w + xi[0]] + fx * plane[yi[0] * w + xi[1]])
                    + fy * ((1.0 - fx) * plane[yi[1] * w + xi[0]] + fx * plane[yi[1] * w + xi[1]]);
                out[(c * h + y) * w + x] = v;
            }
        }
    }
    Image::from_raw_clamped(h, w, ch, out).expect("affine output keeps shape")
}

fn draw_symmetric<R: Rng + ?Sized>(rng: &mut R, range: f64) -> f64 {
    if range == 0.0 {
        0.0
    } else {
        rng.gen_range(-range..=range)
    }
}

/// Randomly sampled rotation/shift/zoom within the configured ranges.
/// Sampling order is rotation, horizontal shift, vertical shift, zoom.
pub fn augment(img: &Image, params: &AugmentParams, rng: &mut impl Rng) -> Image {
    let rot = draw_symmetric(rng, params.rotation_deg);
    let sx = draw_symmetric(rng, params.shift_h);
    let sy = draw_symmetric(rng, params.shift_v);
    let zoom = 1.0 + draw_symmetric(rng, params.zoom);
    if rot == 0.0 && sx == 0.0 && sy == 0.0 && zoom == 1.0 {
        return img.clone();
    }
    apply_affine(img, rot, sx, sy, zoom)
}

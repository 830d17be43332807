//! Pixel-level primitives: the image type, perceptual distance (DSSIM) and
//! the transformations trackers use as countermeasures.
//!
//! Pixels are stored channel-planar (`[c][y][x]`) as `f64` in the unit
//! range; PNG files map bytes through `p = byte / 255`.

mod ssim;
mod transform;

use std::path::Path;

use crate::error::{Error, Result};

pub use ssim::{dssim, dssim_with_grad, SsimParams};
pub use transform::{
    apply_affine, augment, gaussian_blur, gaussian_noise, jpeg_roundtrip, AugmentParams,
};

/// Minimum width/height an [`Image`] may have.
pub const MIN_DIM: usize = 16;

/// An `H×W×C` pixel grid with every value in `[0, 1]`.
///
/// `C` is 1 (grayscale) or 3 (RGB). Planar layout: channel, then row.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    /// Builds an image from planar pixel data, validating the invariants.
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if height < MIN_DIM || width < MIN_DIM {
            return Err(Error::Param(format!(
                "image must be at least {MIN_DIM}x{MIN_DIM}, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Param(format!("channels must be 1 or 3, got {channels}")));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "pixel buffer has {} values, expected {}",
                pixels.len(),
                height * width * channels
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !p.is_finite() || **p < 0.0 || **p > 1.0) {
            return Err(Error::Param(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Image {
            height,
            width,
            channels,
            pixels,
        })
    }

    /// Constant-valued image.
    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Image::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Builds an image by evaluating `f(c, y, x)`; values are validated.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    pixels.push(f(c, y, x));
                }
            }
        }
        Image::new(height, width, channels, pixels)
    }

    /// Builds an image from raw values, clamping each into `[0, 1]`.
    /// Dimensions must still be valid.
    pub fn from_raw_clamped(
        height: usize,
        width: usize,
        channels: usize,
        mut pixels: Vec<f64>,
    ) -> Result<Self> {
        for p in &mut pixels {
            *p = if p.is_finite() { p.clamp(0.0, 1.0) } else { 0.0 };
        }
        Image::new(height, width, channels, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    #[inline]
    fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[self.idx(c, y, x)]
    }

    /// One channel plane as a contiguous `H*W` slice.
    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.pixels[c * n..(c + 1) * n]
    }

    /// The full planar pixel buffer.
    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    /// Maximum absolute pixel difference between two same-shape images.
    pub fn max_abs_diff(&self, other: &Image) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(Error::Dimension("images differ in shape".into()));
        }
        Ok(self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Loads an 8-bit PNG; grayscale files become `C=1`, everything else RGB.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| Error::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, e)))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        match img {
            image::DynamicImage::ImageLuma8(g) => Image::from_fn(h, w, 1, |_, y, x| {
                f64::from(g.get_pixel(x as u32, y as u32).0[0]) / 255.0
            }),
            other => {
                let rgb = other.to_rgb8();
                Image::from_fn(h, w, 3, |c, y, x| {
                    f64::from(rgb.get_pixel(x as u32, y as u32).0[c]) / 255.0
                })
            }
        }
    }

    /// Writes the image as an 8-bit PNG (`byte = round(p * 255)`).
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let to_byte = |p: f64| (p * 255.0).round().clamp(0.0, 255.0) as u8;
        let (w, h) = (self.width as u32, self.height as u32);
        let res = if self.channels == 1 {
            let buf: Vec<u8> = self.plane(0).iter().copied().map(to_byte).collect();
            image::save_buffer(path, &buf, w, h, image::ColorType::L8)
        } else {
            let mut buf = Vec::with_capacity(self.pixels.len());
            for y in 0..self.height {
                for x in 0..self.width {
                    for c in 0..3 {
                        buf.push(to_byte(self.get(c, y, x)));
                    }
                }
            }
            image::save_buffer(path, &buf, w, h, image::ColorType::Rgb8)
        };
        res.map_err(|e| Error::io(path, std::io::Error::new(std::io::ErrorKind::Other, e)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_dimensions() {
        assert!(matches!(Image::constant(8, 32, 3, 0.5), Err(Error::Param(_))));
        assert!(matches!(Image::constant(32, 32, 2, 0.5), Err(Error::Param(_))));
        assert!(matches!(
            Image::new(32, 32, 3, vec![0.5; 10]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        let mut px = vec![0.5; 16 * 16];
        px[3] = 1.5;
        assert!(matches!(Image::new(16, 16, 1, px), Err(Error::Param(_))));
    }

    #[test]
    fn png_roundtrip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(20, 24, 3, |c, y, x| {
            ((c * 37 + y * 5 + x * 11) % 256) as f64 / 255.0
        })
        .unwrap();
        let path = dir.path().join("t.png");
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert!(back.same_shape(&img));
        assert!(img.max_abs_diff(&back).unwrap() < 1e-12);
    }

    #[test]
    fn grayscale_png_keeps_single_channel() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(16, 16, 1, |_, y, x| ((y * 16 + x) % 250) as f64 / 255.0).unwrap();
        let path = dir.path().join("g.png");
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(back.channels(), 1);
        assert!(img.max_abs_diff(&back).unwrap() < 1e-12);
    }
}

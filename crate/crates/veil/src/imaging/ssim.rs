//! Structural dissimilarity (DSSIM) with an analytic pixel gradient.
//!
//! SSIM is computed per channel as the mean over all valid sliding-window
//! positions of the standard luminance-contrast-structure product with
//! stabilizers `C1 = (k1*L)^2`, `C2 = (k2*L)^2`, using a uniform (box)
//! window and biased moments. `DSSIM = (1 - SSIM) / 2`, so it is 0 for
//! identical images and at most 1 for unit-range inputs.
//!
//! The gradient with respect to the second image's pixels is exact
//! calculus on the per-window rational form; the cloak optimizer depends
//! on it.

use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{Error, Result};

/// SSIM window and stabilizer configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SsimParams {
    /// Side of the square box window, odd.
    pub window_size: usize,
    pub k1: f64,
    pub k2: f64,
    /// Value range of the pixel data (1.0 for unit-range images).
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window_size: 7,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimParams {
    fn validate(&self, img: &Image) -> Result<()> {
        if self.window_size == 0 || self.window_size % 2 == 0 {
            return Err(Error::Param(format!(
                "window_size must be odd and positive, got {}",
                self.window_size
            )));
        }
        if self.window_size > img.height().min(img.width()) {
            return Err(Error::Param(format!(
                "window {} larger than image {}x{}",
                self.window_size,
                img.height(),
                img.width()
            )));
        }
        if self.k1 <= 0.0 || self.k2 <= 0.0 || self.dynamic_range <= 0.0 {
            return Err(Error::Param("k1, k2, dynamic_range must be > 0".into()));
        }
        Ok(())
    }
}

/// Structural dissimilarity `(1 - SSIM(a, b)) / 2` in `[0, 1]`.
pub fn dssim(a: &Image, b: &Image, params: &SsimParams) -> Result<f64> {
    compute(a, b, params, None)
}

/// DSSIM together with its gradient with respect to `b`'s pixels
/// (planar layout matching [`Image::pixels`]).
pub fn dssim_with_grad(a: &Image, b: &Image, params: &SsimParams) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; b.pixels().len()];
    let value = compute(a, b, params, Some(&mut grad))?;
    Ok((value, grad))
}

/// Per-channel prefix sums so every window sum is O(1).
/// `acc[y][x]` holds the sum over the rectangle `[0, y) x [0, x)`.
struct Prefix {
    acc: Vec<f64>,
    width: usize,
}

impl Prefix {
    fn build(h: usize, w: usize, value: impl Fn(usize, usize) -> f64) -> Prefix {
        let stride = w + 1;
        let mut acc = vec![0.0; (h + 1) * stride];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += value(y, x);
                acc[(y + 1) * stride + x + 1] = acc[y * stride + x + 1] + row;
            }
        }
        Prefix { acc, width: w }
    }

    #[inline]
    fn window(&self, y: usize, x: usize, side: usize) -> f64 {
        let s = self.width + 1;
        self.acc[(y + side) * s + x + side] + self.acc[y * s + x]
            - self.acc[(y + side) * s + x]
            - self.acc[y * s + x + side]
    }
}

fn compute(a: &Image, b: &Image, params: &SsimParams, grad: Option<&mut Vec<f64>>) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Dimension(format!(
            "ssim inputs differ: {}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    params.validate(a)?;

    let (h, w, side) = (a.height(), a.width(), params.window_size);
    let n = (side * side) as f64;
    let c1 = (params.k1 * params.dynamic_range).powi(2);
    let c2 = (params.k2 * params.dynamic_range).powi(2);
    let (wy, wx) = (h - side + 1, w - side + 1);
    let window_count = (wy * wx * a.channels()) as f64;

    let mut grad = grad;
    let mut ssim_sum = 0.0;
    for c in 0..a.channels() {
        let pa = a.plane(c);
        let pb = b.plane(c);
        let at = |y: usize, x: usize| y * w + x;
        let sa = Prefix::build(h, w, |y, x| pa[at(y, x)]);
        let sb = Prefix::build(h, w, |y, x| pb[at(y, x)]);
        let saa = Prefix::build(h, w, |y, x| pa[at(y, x)] * pa[at(y, x)]);
        let sbb = Prefix::build(h, w, |y, x| pb[at(y, x)] * pb[at(y, x)]);
        let sab = Prefix::build(h, w, |y, x| pa[at(y, x)] * pb[at(y, x)]);

        for y in 0..wy {
            for x in 0..wx {
                let mu_a = sa.window(y, x, side) / n;
                let mu_b = sb.window(y, x, side) / n;
                let var_a = saa.window(y, x, side) / n - mu_a * mu_a;
                let var_b = sbb.window(y, x, side) / n - mu_b * mu_b;
                let cov = sab.window(y, x, side) / n - mu_a * mu_b;

                let n1 = 2.0 * mu_a * mu_b + c1;
                let n2 = 2.0 * cov + c2;
                let d1 = mu_a * mu_a + mu_b * mu_b + c1;
                let d2 = var_a + var_b + c2;
                let s = (n1 * n2) / (d1 * d2);
                ssim_sum += s;

                if let Some(g) = grad.as_deref_mut() {
                    // Window-level partials, then chain into each pixel of b:
                    //   d mu_b / d b_j  = 1/n
                    //   d var_b / d b_j = 2 (b_j - mu_b) / n
                    //   d cov / d b_j   = (a_j - mu_a) / n
                    let ds_dmu = 2.0 * mu_a * n2 / (d1 * d2) - s * 2.0 * mu_b / d1;
                    let ds_dvar = -s / d2;
                    let ds_dcov = 2.0 * n1 / (d1 * d2);
                    let base = c * h * w;
                    for ky in 0..side {
                        let row = at(y + ky, x);
                        for kx in 0..side {
                            let aj = pa[row + kx];
                            let bj = pb[row + kx];
                            g[base + row + kx] += (ds_dmu
                                + ds_dvar * 2.0 * (bj - mu_b)
                                + ds_dcov * (aj - mu_a))
                                / n;
                        }
                    }
                }
            }
        }
    }

    if let Some(g) = grad {
        // DSSIM = (1 - mean SSIM) / 2.
        let scale = -0.5 / window_count;
        for v in g.iter_mut() {
            *v *= scale;
        }
    }
    Ok((1.0 - ssim_sum / window_count) / 2.0)
}

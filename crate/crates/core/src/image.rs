//! Square RGB image tensors with bilinear resampling.

use ndarray::Array3;

use crate::error::{invalid, Result};
use crate::scalar::Scalar;

/// Axis-aligned rectangle in continuous image coordinates (pixels).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl Rect {
    pub fn full(n: usize) -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            width: n as f64,
            height: n as f64,
        }
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x && x <= self.x + self.width && y >= self.y && y <= self.y + self.height
    }

    fn inside(&self, n: usize) -> bool {
        self.x >= 0.0
            && self.y >= 0.0
            && self.x + self.width <= n as f64 + 1e-9
            && self.y + self.height <= n as f64 + 1e-9
    }
}

/// Square h×w×3 image with entries in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor<F: Scalar> {
    pub pixels: Array3<F>,
    pub id: usize,
}

impl<F: Scalar> ImageTensor<F> {
    pub fn new(pixels: Array3<F>, id: usize) -> Result<Self> {
        let (h, w, ch) = pixels.dim();
        if h != w || ch != 3 {
            return Err(invalid(format!(
                "image must be square RGB, got {h}x{w}x{ch}"
            )));
        }
        Ok(Self { pixels, id })
    }

    pub fn side(&self) -> usize {
        self.pixels.dim().0
    }

    /// Bilinear sample at continuous coordinates, pixel centers at integers,
    /// clamped at the border.
    fn sample(&self, y: f64, x: f64, c: usize) -> F {
        let n = self.side() as isize;
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let clamp = |v: isize| -> usize { v.clamp(0, n - 1) as usize };
        let (x0i, y0i) = (x0 as isize, y0 as isize);
        let p00 = self.pixels[[clamp(y0i), clamp(x0i), c]].as_f64();
        let p01 = self.pixels[[clamp(y0i), clamp(x0i + 1), c]].as_f64();
        let p10 = self.pixels[[clamp(y0i + 1), clamp(x0i), c]].as_f64();
        let p11 = self.pixels[[clamp(y0i + 1), clamp(x0i + 1), c]].as_f64();
        let top = p00 * (1.0 - fx) + p01 * fx;
        let bottom = p10 * (1.0 - fx) + p11 * fx;
        F::of(top * (1.0 - fy) + bottom * fy)
    }

    /// Crops `rect` and resizes it to `out_side`×`out_side` with bilinear
    /// sampling. An identity rect at the native size reproduces the image
    /// exactly.
    pub fn crop_resize(&self, rect: Rect, out_side: usize) -> Result<ImageTensor<F>> {
        if !rect.inside(self.side()) || rect.width <= 0.0 || rect.height <= 0.0 {
            return Err(invalid(format!("crop rect {rect:?} outside image")));
        }
        let mut out = Array3::<F>::zeros((out_side, out_side, 3));
        let sx = rect.width / out_side as f64;
        let sy = rect.height / out_side as f64;
        for oy in 0..out_side {
            // Map output pixel centers to source pixel centers.
            let src_y = rect.y + (oy as f64 + 0.5) * sy - 0.5;
            for ox in 0..out_side {
                let src_x = rect.x + (ox as f64 + 0.5) * sx - 0.5;
                for c in 0..3 {
                    out[[oy, ox, c]] = self.sample(src_y, src_x, c);
                }
            }
        }
        ImageTensor::new(out, self.id)
    }

    /// Adds a per-channel color offset, clamped to [0, 1].
    pub fn jitter_colors(&self, delta: [f64; 3]) -> ImageTensor<F> {
        let d: Vec<F> = delta.iter().map(|&x| F::of(x)).collect();
        let mut pixels = self.pixels.clone();
        for ((_, _, c), p) in pixels.indexed_iter_mut() {
            *p = (*p + d[c]).max(F::zero()).min(F::one());
        }
        ImageTensor { pixels, id: self.id }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(n: usize, seed: u64) -> ImageTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels = Array3::from_shape_fn((n, n, 3), |_| rng.gen_range(0.0..1.0));
        ImageTensor::new(pixels, 0).unwrap()
    }

    #[test]
    fn identity_crop_is_exact() {
        let img = random_image(16, 1);
        let out = img.crop_resize(Rect::full(16), 16).unwrap();
        assert_eq!(out.pixels, img.pixels);
    }

    #[test]
    fn quadrant_crop_upsamples() {
        let img = random_image(8, 2);
        let out = img
            .crop_resize(
                Rect {
                    x: 0.0,
                    y: 0.0,
                    width: 4.0,
                    height: 4.0,
                },
                8,
            )
            .unwrap();
        assert_eq!(out.side(), 8);
        assert!(out.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn rejects_out_of_bounds_rect() {
        let img = random_image(8, 3);
        assert!(img
            .crop_resize(
                Rect {
                    x: 4.0,
                    y: 4.0,
                    width: 8.0,
                    height: 8.0
                },
                8
            )
            .is_err());
    }

    #[test]
    fn rejects_non_square() {
        let pixels = Array3::<f64>::zeros((4, 8, 3));
        assert!(ImageTensor::new(pixels, 0).is_err());
    }
}

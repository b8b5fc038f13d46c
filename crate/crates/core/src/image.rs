use nalgebra::Vector2;

use crate::error::{Error, Result};

/// Single-channel image with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("image dimensions must be positive".into()));
        }
        if data.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: width * height,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("image intensities must be finite".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self::new(width, height, vec![value; width * height]).expect("valid constant image")
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Whether a bilinear sample at `(u, v)` needs only pixels inside the image.
    pub fn in_bounds(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }

    fn cell(&self, u: f64, v: f64) -> (usize, usize, f64, f64) {
        let x0 = (u.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (v.floor() as usize).min(self.height.saturating_sub(2));
        (x0, y0, u - x0 as f64, v - y0 as f64)
    }

    fn corners(&self, x0: usize, y0: usize) -> [f64; 4] {
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        [self.get(x0, y0), self.get(x1, y0), self.get(x0, y1), self.get(x1, y1)]
    }

    /// Bilinear sample; `None` outside `[0, w−1] × [0, h−1]`.
    pub fn sample(&self, u: f64, v: f64) -> Option<f64> {
        self.sample_with_gradient(u, v).map(|(i, _)| i)
    }

    /// Bilinear sample together with the exact derivative of the bilinear
    /// interpolant with respect to `(u, v)`.
    pub fn sample_with_gradient(&self, u: f64, v: f64) -> Option<(f64, Vector2<f64>)> {
        if !self.in_bounds(u, v) {
            return None;
        }
        let (x0, y0, fx, fy) = self.cell(u, v);
        let [a, b, c, d] = self.corners(x0, y0);
        let top = a + (b - a) * fx;
        let bottom = c + (d - c) * fx;
        let value = top + (bottom - top) * fy;
        let du = (b - a) * (1.0 - fy) + (d - c) * fy;
        let dv = bottom - top;
        Some((value, Vector2::new(du, dv)))
    }

    /// Central-difference gradient at an integer pixel, one-sided at borders.
    pub fn central_gradient(&self, x: usize, y: usize) -> Vector2<f64> {
        let diff = |lo: f64, hi: f64, span: usize| if span == 0 { 0.0 } else { (hi - lo) / span as f64 };
        let (xl, xh) = (x.saturating_sub(1), (x + 1).min(self.width - 1));
        let (yl, yh) = (y.saturating_sub(1), (y + 1).min(self.height - 1));
        Vector2::new(
            diff(self.get(xl, y), self.get(xh, y), xh - xl),
            diff(self.get(x, yl), self.get(x, yh), yh - yl),
        )
    }

    /// Central-difference gradient interpolated bilinearly at `(u, v)`.
    pub fn gradient_at(&self, u: f64, v: f64) -> Option<Vector2<f64>> {
        if !self.in_bounds(u, v) {
            return None;
        }
        let (x0, y0, fx, fy) = self.cell(u, v);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let g = |x, y| self.central_gradient(x, y);
        let top = g(x0, y0) * (1.0 - fx) + g(x1, y0) * fx;
        let bottom = g(x0, y1) * (1.0 - fx) + g(x1, y1) * fx;
        Some(top * (1.0 - fy) + bottom * fy)
    }

    /// Gradient magnitudes at every pixel.
    pub fn gradient_magnitude(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..self.width {
                out.push(self.central_gradient(x, y).norm());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn bilinear_field(x: f64, y: f64) -> f64 {
        0.1 + 0.02 * x + 0.03 * y + 0.001 * x * y
    }

    #[test]
    fn constant_image_samples_constant() {
        let img = GrayImage::filled(7, 5, 0.37);
        for &(u, v) in &[(0.0, 0.0), (3.3, 2.7), (6.0, 4.0), (5.99, 0.01)] {
            assert_relative_eq!(img.sample(u, v).unwrap(), 0.37, epsilon = 1e-15);
            assert_eq!(img.gradient_at(u, v).unwrap(), Vector2::zeros());
        }
    }

    #[test]
    fn bilinear_is_exact_on_bilinear_images() {
        let img = GrayImage::from_fn(12, 9, |x, y| bilinear_field(x as f64, y as f64)).unwrap();
        for i in 0..50 {
            let u = 11.0 * (i as f64 * 0.618).fract();
            let v = 8.0 * (i as f64 * 0.377).fract();
            let (val, grad) = img.sample_with_gradient(u, v).unwrap();
            assert_relative_eq!(val, bilinear_field(u, v), epsilon = 1e-14);
            assert_relative_eq!(grad.x, 0.02 + 0.001 * v, epsilon = 1e-14);
            assert_relative_eq!(grad.y, 0.03 + 0.001 * u, epsilon = 1e-14);
        }
    }

    #[test]
    fn out_of_bounds_samples_are_none() {
        let img = GrayImage::filled(4, 3, 0.5);
        assert!(img.sample(-0.01, 1.0).is_none());
        assert!(img.sample(3.01, 1.0).is_none());
        assert!(img.sample(1.0, 2.01).is_none());
        assert!(img.sample(3.0, 2.0).is_some());
    }

    #[test]
    fn central_gradient_of_ramp() {
        let img = GrayImage::from_fn(6, 4, |x, y| 0.1 * x as f64 + 0.05 * y as f64).unwrap();
        for y in 0..4 {
            for x in 0..6 {
                let g = img.central_gradient(x, y);
                assert_relative_eq!(g.x, 0.1, epsilon = 1e-12);
                assert_relative_eq!(g.y, 0.05, epsilon = 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn sample_stays_within_corner_range(u in 0.0f64..9.0, v in 0.0f64..6.0, seed in 0u64..1000) {
            let img = GrayImage::from_fn(10, 7, |x, y| ((x * 31 + y * 17 + seed as usize) % 13) as f64 / 12.0).unwrap();
            let s = img.sample(u, v).unwrap();
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&s));
        }
    }
}

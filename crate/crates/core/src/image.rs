//! Dense real-valued images in height × width × channel layout.

use crate::error::{FgdError, Result};

/// Image dimensions: height, width and channel count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_plane(&self, other: &Shape) -> bool {
        self.height == other.height && self.width == other.width
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// Row-major `H × W × C` image with interleaved channels.
///
/// Pixel-domain images live nominally in `[-1, 1]`, but intermediate
/// diffusion states are unbounded. Values must be finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    shape: Shape,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.height == 0 || shape.width == 0 || shape.channels == 0 {
            return Err(FgdError::DegenerateShape(shape));
        }
        if data.len() != shape.len() {
            return Err(FgdError::DataLength {
                expected: shape.len(),
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(FgdError::NonFinite { index: i });
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: Shape, value: f64) -> Result<Self> {
        Self::new(shape, vec![value; shape.len()])
    }

    pub fn zeros(shape: Shape) -> Result<Self> {
        Self::filled(shape, 0.0)
    }

    /// Builds an image by evaluating `f(row, col, channel)` everywhere.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.len());
        for y in 0..shape.height {
            for x in 0..shape.width {
                for c in 0..shape.channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(shape, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.shape.width + x) * self.shape.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f64) {
        let i = self.index(y, x, c);
        self.data[i] = value;
    }

    /// All channel values of one pixel.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let start = self.index(y, x, 0);
        &self.data[start..start + self.shape.channels]
    }

    pub fn ensure_shape(&self, expected: Shape) -> Result<()> {
        if self.shape != expected {
            return Err(FgdError::ShapeMismatch {
                expected,
                actual: self.shape,
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageBuffer {
        ImageBuffer {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two images of identical shape.
    pub fn zip_map(&self, other: &ImageBuffer, f: impl Fn(f64, f64) -> f64) -> Result<ImageBuffer> {
        other.ensure_shape(self.shape)?;
        Ok(ImageBuffer {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &ImageBuffer) -> Result<ImageBuffer> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ImageBuffer) -> Result<ImageBuffer> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> ImageBuffer {
        self.map(|v| k * v)
    }

    /// `a·self + b·other`.
    pub fn lincomb(&self, a: f64, other: &ImageBuffer, b: f64) -> Result<ImageBuffer> {
        self.zip_map(other, |x, y| a * x + b * y)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn mean_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &ImageBuffer) -> Result<f64> {
        other.ensure_shape(self.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Extracts one channel as a single-channel image.
    pub fn channel(&self, c: usize) -> ImageBuffer {
        let shape = Shape::new(self.shape.height, self.shape.width, 1);
        let data = self
            .data
            .iter()
            .skip(c)
            .step_by(self.shape.channels)
            .copied()
            .collect();
        ImageBuffer { shape, data }
    }

    /// Bilinear resize with half-pixel centers.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<ImageBuffer> {
        let target = Shape::new(height, width, self.shape.channels);
        if target.height == 0 || target.width == 0 {
            return Err(FgdError::DegenerateShape(target));
        }
        let sy = self.shape.height as f64 / height as f64;
        let sx = self.shape.width as f64 / width as f64;
        ImageBuffer::from_fn(target, |y, x, c| {
            let (y0, y1, wy) = bilinear_taps(y, sy, self.shape.height);
            let (x0, x1, wx) = bilinear_taps(x, sx, self.shape.width);
            let top = (1.0 - wx) * self.get(y0, x0, c) + wx * self.get(y0, x1, c);
            let bottom = (1.0 - wx) * self.get(y1, x0, c) + wx * self.get(y1, x1, c);
            (1.0 - wy) * top + wy * bottom
        })
    }
}

/// Source taps and fractional weight for output index `i` when the source
/// is `scale` times as large as the output.
pub(crate) fn bilinear_taps(i: usize, scale: f64, src_len: usize) -> (usize, usize, f64) {
    let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, pos - lo as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_degenerate_and_non_finite() {
        assert!(ImageBuffer::zeros(Shape::new(0, 3, 1)).is_err());
        assert!(ImageBuffer::new(Shape::new(1, 1, 1), vec![f64::NAN]).is_err());
        assert!(ImageBuffer::new(Shape::new(1, 2, 1), vec![0.0]).is_err());
    }

    #[test]
    fn layout_is_interleaved() {
        let img =
            ImageBuffer::from_fn(Shape::new(2, 3, 2), |y, x, c| (100 * y + 10 * x + c) as f64)
                .unwrap();
        assert_eq!(img.pixel(1, 2), &[120.0, 121.0]);
        assert_eq!(img.data()[img.index(0, 1, 1)], 11.0);
        assert_eq!(
            img.channel(1).data(),
            &[1.0, 11.0, 21.0, 101.0, 111.0, 121.0]
        );
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = ImageBuffer::zeros(Shape::new(2, 2, 1)).unwrap();
        let b = ImageBuffer::zeros(Shape::new(2, 2, 3)).unwrap();
        assert!(matches!(a.add(&b), Err(FgdError::ShapeMismatch { .. })));
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = ImageBuffer::from_fn(Shape::new(4, 5, 2), |y, x, c| (y * 7 + x * 3 + c) as f64)
            .unwrap();
        assert_eq!(img.resize_bilinear(4, 5).unwrap(), img);
        let flat = ImageBuffer::filled(Shape::new(3, 3, 1), 0.25).unwrap();
        let up = flat.resize_bilinear(7, 5).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }
}

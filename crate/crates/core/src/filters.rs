//! Guide filters: an exact joint bilateral filter precomputed into a dense
//! per-pixel weight tensor, and a down/up-sampling low-pass for ablations.
//!
//! Both are linear in the filtered image, which is what the guidance update
//! relies on. Neither is assumed idempotent.

use std::io::{Read, Write};

use rayon::prelude::*;

use crate::error::{FgdError, Result};
use crate::image::{bilinear_taps, ImageBuffer, Shape};

/// A linear image operator acting identically on every channel.
pub trait LinearFilter: Send + Sync {
    fn apply(&self, x: &ImageBuffer) -> Result<ImageBuffer>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilateralParams {
    /// Spatial standard deviation in pixels.
    pub sigma_spatial: f64,
    /// Standard deviation of guide-value differences (images in `[-1, 1]`).
    pub sigma_value: f64,
    /// Window half-width in pixels.
    pub radius: usize,
}

impl BilateralParams {
    /// Parameters with the window truncated at `ceil(3·sigma_spatial)`.
    pub fn new(sigma_spatial: f64, sigma_value: f64) -> Result<Self> {
        let radius = (3.0 * sigma_spatial).ceil().max(1.0) as usize;
        Self::with_radius(sigma_spatial, sigma_value, radius)
    }

    /// Radius 0 gives the identity filter.
    pub fn with_radius(sigma_spatial: f64, sigma_value: f64, radius: usize) -> Result<Self> {
        let p = Self {
            sigma_spatial,
            sigma_value,
            radius,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_spatial > 0.0 && self.sigma_spatial.is_finite()) {
            return Err(FgdError::InvalidParameter(format!(
                "sigma_spatial must be positive, got {}",
                self.sigma_spatial
            )));
        }
        if !(self.sigma_value > 0.0 && self.sigma_value.is_finite()) {
            return Err(FgdError::InvalidParameter(format!(
                "sigma_value must be positive, got {}",
                self.sigma_value
            )));
        }
        Ok(())
    }
}

/// Precomputed joint bilateral weights for one guide image.
///
/// For each output pixel the tensor stores a `(2r+1)²` block of neighbor
/// weights; neighbors outside the image carry weight zero. The same weights
/// apply to any number of channels.
///
/// Weights are kept as `f32`, which halves the memory traffic of
/// [`LinearFilter::apply`], together with an `f64` reciprocal row sum per
/// pixel. The applied operator is `w / Σw` with the stored weights, so its
/// rows sum to one up to `f64` rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterTensor {
    height: usize,
    width: usize,
    radius: usize,
    weights: Vec<f32>,
    norms: Vec<f64>,
}

impl FilterTensor {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    fn window(&self) -> usize {
        2 * self.radius + 1
    }

    fn block_len(&self) -> usize {
        self.window() * self.window()
    }

    fn raw_block(&self, y: usize, x: usize) -> &[f32] {
        let n = self.block_len();
        let start = (y * self.width + x) * n;
        &self.weights[start..start + n]
    }

    /// Normalized weight block of output pixel `(y, x)`, row-major over the window.
    pub fn weights_at(&self, y: usize, x: usize) -> Vec<f64> {
        let norm = self.norms[y * self.width + x];
        self.raw_block(y, x)
            .iter()
            .map(|&w| w as f64 * norm)
            .collect()
    }

    /// Largest deviation of any normalized row sum from one.
    pub fn max_row_sum_error(&self) -> f64 {
        self.weights
            .chunks(self.block_len())
            .zip(&self.norms)
            .map(|(row, norm)| (row.iter().map(|&w| w as f64 * norm).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn min_weight(&self) -> f64 {
        self.weights
            .iter()
            .fold(f64::INFINITY, |m, &w| m.min(w as f64))
    }

    fn from_raw(height: usize, width: usize, radius: usize, weights: Vec<f32>) -> Result<Self> {
        let block = (2 * radius + 1) * (2 * radius + 1);
        let norms = weights
            .chunks(block)
            .map(|row| {
                if row.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
                    return Err(FgdError::MalformedTensor(
                        "negative or non-finite weight".into(),
                    ));
                }
                let sum: f64 = row.iter().map(|&w| w as f64).sum();
                if !(sum > 0.0) {
                    return Err(FgdError::MalformedTensor("empty weight row".into()));
                }
                Ok(1.0 / sum)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            height,
            width,
            radius,
            weights,
            norms,
        })
    }

    fn check_input(&self, x: &ImageBuffer) -> Result<()> {
        if x.height() != self.height || x.width() != self.width {
            return Err(FgdError::ShapeMismatch {
                expected: Shape::new(self.height, self.width, x.channels()),
                actual: x.shape(),
            });
        }
        Ok(())
    }

    fn apply_fixed<const C: usize>(&self, x: &ImageBuffer, out: &mut [f64]) {
        let (h, w, r) = (self.height, self.width, self.radius);
        let win = self.window();
        let src = x.data();
        out.par_chunks_mut(w * C).enumerate().for_each(|(py, row)| {
            let y0 = py.saturating_sub(r);
            let y1 = (py + r).min(h - 1);
            for px in 0..w {
                let x0 = px.saturating_sub(r);
                let x1 = (px + r).min(w - 1);
                let block = self.raw_block(py, px);
                let norm = self.norms[py * w + px];
                let mut acc = [0.0f64; C];
                for qy in y0..=y1 {
                    let wrow = &block[(qy + r - py) * win + (x0 + r - px)..][..=x1 - x0];
                    let srow = &src[(qy * w + x0) * C..(qy * w + x1 + 1) * C];
                    for (&wt, s) in wrow.iter().zip(srow.chunks_exact(C)) {
                        let wt = wt as f64;
                        for c in 0..C {
                            acc[c] += wt * s[c];
                        }
                    }
                }
                for (o, a) in row[px * C..(px + 1) * C].iter_mut().zip(acc) {
                    *o = a * norm;
                }
            }
        });
    }

    fn apply_dynamic(&self, x: &ImageBuffer, out: &mut [f64]) {
        let (h, w, r) = (self.height, self.width, self.radius);
        let ch = x.channels();
        let win = self.window();
        let src = x.data();
        out.par_chunks_mut(w * ch)
            .enumerate()
            .for_each(|(py, row)| {
                let y0 = py.saturating_sub(r);
                let y1 = (py + r).min(h - 1);
                for px in 0..w {
                    let x0 = px.saturating_sub(r);
                    let x1 = (px + r).min(w - 1);
                    let block = self.raw_block(py, px);
                    let norm = self.norms[py * w + px];
                    let acc = &mut row[px * ch..(px + 1) * ch];
                    for qy in y0..=y1 {
                        for qx in x0..=x1 {
                            let wt = block[(qy + r - py) * win + (qx + r - px)] as f64;
                            let s = &src[(qy * w + qx) * ch..(qy * w + qx + 1) * ch];
                            for (a, v) in acc.iter_mut().zip(s) {
                                *a += wt * v;
                            }
                        }
                    }
                    acc.iter_mut().for_each(|a| *a *= norm);
                }
            });
    }

    /// Writes the tensor as `FGDT`, `u32` height, width, radius, then
    /// little-endian `f32` weights.
    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        out.write_all(b"FGDT")?;
        for v in [self.height, self.width, self.radius] {
            let v = u32::try_from(v)
                .map_err(|_| FgdError::MalformedTensor("dimension exceeds u32".into()))?;
            out.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.weights.len() * 4);
        for &w in &self.weights {
            buf.extend_from_slice(&w.to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    /// Reads a tensor written by [`FilterTensor::write_to`].
    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != b"FGDT" {
            return Err(FgdError::MalformedTensor("bad magic".into()));
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            let mut b = [0u8; 4];
            input.read_exact(&mut b)?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let [height, width, radius] = dims;
        if height == 0 || width == 0 {
            return Err(FgdError::MalformedTensor("zero dimension".into()));
        }
        let block = (2 * radius + 1) * (2 * radius + 1);
        let count = height * width * block;
        let mut raw = vec![0u8; count * 4];
        input.read_exact(&mut raw)?;
        let mut trailing = [0u8; 1];
        if input.read(&mut trailing)? != 0 {
            return Err(FgdError::MalformedTensor("trailing bytes".into()));
        }
        let weights = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Self::from_raw(height, width, radius, weights)
    }
}

impl LinearFilter for FilterTensor {
    /// `out(p, c) = Σ_q w(p, q) · x(q, c)`.
    fn apply(&self, x: &ImageBuffer) -> Result<ImageBuffer> {
        self.check_input(x)?;
        let mut out = vec![0.0; x.shape().len()];
        match x.channels() {
            1 => self.apply_fixed::<1>(x, &mut out),
            2 => self.apply_fixed::<2>(x, &mut out),
            3 => self.apply_fixed::<3>(x, &mut out),
            4 => self.apply_fixed::<4>(x, &mut out),
            _ => self.apply_dynamic(x, &mut out),
        }
        ImageBuffer::new(x.shape(), out)
    }
}

fn squared_value_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

/// Precomputes the joint bilateral weights of `guide`.
///
/// `w(p, q) ∝ exp(−‖p − q‖² / 2σ_s²) · exp(−‖G(p) − G(q)‖² / 2σ_v²)`, with the
/// value distance taken jointly over all guide channels and each row
/// normalized over the in-bounds part of the window.
pub fn build_bilateral_tensor(
    guide: &ImageBuffer,
    params: &BilateralParams,
) -> Result<FilterTensor> {
    params.validate()?;
    let (h, w) = (guide.height(), guide.width());
    let r = params.radius;
    let win = 2 * r + 1;
    let block = win * win;
    let inv_s = 1.0 / (2.0 * params.sigma_spatial * params.sigma_spatial);
    let inv_v = 1.0 / (2.0 * params.sigma_value * params.sigma_value);
    let spatial: Vec<f64> = (0..block)
        .map(|i| {
            let dy = (i / win) as f64 - r as f64;
            let dx = (i % win) as f64 - r as f64;
            (-(dy * dy + dx * dx) * inv_s).exp()
        })
        .collect();

    let mut weights = vec![0.0; h * w * block];
    weights
        .par_chunks_mut(w * block)
        .enumerate()
        .for_each(|(py, row_blocks)| {
            for px in 0..w {
                let out = &mut row_blocks[px * block..(px + 1) * block];
                let center = guide.pixel(py, px);
                let mut sum = 0.0;
                for qy in py.saturating_sub(r)..=(py + r).min(h - 1) {
                    for qx in px.saturating_sub(r)..=(px + r).min(w - 1) {
                        let k = (qy + r - py) * win + (qx + r - px);
                        let d2 = squared_value_distance(center, guide.pixel(qy, qx));
                        let wt = spatial[k] * (-d2 * inv_v).exp();
                        out[k] = wt;
                        sum += wt;
                    }
                }
                // the center term is exp(0) = 1, so sum >= 1
                let inv = 1.0 / sum;
                out.iter_mut().for_each(|v| *v *= inv);
            }
        });

    FilterTensor::from_raw(h, w, r, weights.into_iter().map(|v| v as f32).collect())
}

/// Convenience wrapper for [`LinearFilter::apply`].
pub fn apply_filter(f: &impl LinearFilter, x: &ImageBuffer) -> Result<ImageBuffer> {
    f.apply(x)
}

/// Direct evaluation of the joint bilateral filter with no precomputation.
pub fn brute_force_joint_bilateral(
    guide: &ImageBuffer,
    x: &ImageBuffer,
    params: &BilateralParams,
) -> Result<ImageBuffer> {
    params.validate()?;
    if !guide.shape().same_plane(&x.shape()) {
        return Err(FgdError::ShapeMismatch {
            expected: Shape::new(guide.height(), guide.width(), x.channels()),
            actual: x.shape(),
        });
    }
    let (h, w, r) = (
        guide.height() as i64,
        guide.width() as i64,
        params.radius as i64,
    );
    let ss = params.sigma_spatial * params.sigma_spatial;
    let sv = params.sigma_value * params.sigma_value;
    let mut out = ImageBuffer::zeros(x.shape())?;
    for py in 0..h {
        for px in 0..w {
            let mut acc = vec![0.0; x.channels()];
            let mut norm = 0.0;
            for qy in (py - r)..=(py + r) {
                for qx in (px - r)..=(px + r) {
                    if qy < 0 || qx < 0 || qy >= h || qx >= w {
                        continue;
                    }
                    let spatial = ((qy - py).pow(2) + (qx - px).pow(2)) as f64;
                    let mut value = 0.0;
                    for c in 0..guide.channels() {
                        let d = guide.get(py as usize, px as usize, c)
                            - guide.get(qy as usize, qx as usize, c);
                        value += d * d;
                    }
                    let wt = (-spatial / (2.0 * ss)).exp() * (-value / (2.0 * sv)).exp();
                    norm += wt;
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += wt * x.get(qy as usize, qx as usize, c);
                    }
                }
            }
            for (c, a) in acc.iter().enumerate() {
                out.set(py as usize, px as usize, c, a / norm);
            }
        }
    }
    Ok(out)
}

/// Upsampling kernel of the low-pass operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Upsample {
    /// Half-pixel-centered bilinear interpolation.
    Bilinear,
    /// Block replication. With box downsampling this makes the operator an
    /// exact projection on sizes divisible by the factor.
    Nearest,
}

/// Box-downsample by `factor`, then upsample back to the input size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LowpassFilter {
    pub factor: usize,
    pub upsample: Upsample,
}

impl LowpassFilter {
    pub fn new(factor: usize, upsample: Upsample) -> Result<Self> {
        if factor < 1 {
            return Err(FgdError::InvalidParameter(
                "downsampling factor must be >= 1".into(),
            ));
        }
        Ok(Self { factor, upsample })
    }

    /// Block means over `ceil(H/N) × ceil(W/N)` cells; edge cells average
    /// whatever pixels they contain.
    pub fn downsample(&self, x: &ImageBuffer) -> Result<ImageBuffer> {
        let n = self.factor;
        let (h, w, ch) = (x.height(), x.width(), x.channels());
        let lh = h.div_ceil(n);
        let lw = w.div_ceil(n);
        ImageBuffer::from_fn(Shape::new(lh, lw, ch), |ly, lx, c| {
            let ys = ly * n..((ly + 1) * n).min(h);
            let xs = lx * n..((lx + 1) * n).min(w);
            let count = (ys.len() * xs.len()) as f64;
            let mut sum = 0.0;
            for y in ys {
                for xx in xs.clone() {
                    sum += x.get(y, xx, c);
                }
            }
            sum / count
        })
    }

    fn upsample(&self, low: &ImageBuffer, shape: Shape) -> Result<ImageBuffer> {
        match self.upsample {
            Upsample::Nearest => {
                let n = self.factor;
                ImageBuffer::from_fn(shape, |y, x, c| low.get(y / n, x / n, c))
            }
            Upsample::Bilinear => {
                let sy = low.height() as f64 / shape.height as f64;
                let sx = low.width() as f64 / shape.width as f64;
                ImageBuffer::from_fn(shape, |y, x, c| {
                    let (y0, y1, wy) = bilinear_taps(y, sy, low.height());
                    let (x0, x1, wx) = bilinear_taps(x, sx, low.width());
                    let top = (1.0 - wx) * low.get(y0, x0, c) + wx * low.get(y0, x1, c);
                    let bottom = (1.0 - wx) * low.get(y1, x0, c) + wx * low.get(y1, x1, c);
                    (1.0 - wy) * top + wy * bottom
                })
            }
        }
    }
}

impl LinearFilter for LowpassFilter {
    fn apply(&self, x: &ImageBuffer) -> Result<ImageBuffer> {
        if self.factor == 1 {
            return Ok(x.clone());
        }
        let low = self.downsample(x)?;
        self.upsample(&low, x.shape())
    }
}

/// ILVR-style low-pass: box down by `factor`, bilinear back up.
pub fn ilvr_lowpass(x: &ImageBuffer, factor: usize) -> Result<ImageBuffer> {
    LowpassFilter::new(factor, Upsample::Bilinear)?.apply(x)
}

/// `x − f(x)`: the detail the filter leaves to the sampler.
pub fn residual_detail(x: &ImageBuffer, f: &impl LinearFilter) -> Result<ImageBuffer> {
    x.sub(&f.apply(x)?)
}

/// Any of the supported guide filters.
#[derive(Debug, Clone, PartialEq)]
pub enum GuideFilter {
    Bilateral(FilterTensor),
    Lowpass(LowpassFilter),
}

impl LinearFilter for GuideFilter {
    fn apply(&self, x: &ImageBuffer) -> Result<ImageBuffer> {
        match self {
            GuideFilter::Bilateral(t) => t.apply(x),
            GuideFilter::Lowpass(l) => l.apply(x),
        }
    }
}

impl From<FilterTensor> for GuideFilter {
    fn from(t: FilterTensor) -> Self {
        GuideFilter::Bilateral(t)
    }
}

impl From<LowpassFilter> for GuideFilter {
    fn from(l: LowpassFilter) -> Self {
        GuideFilter::Lowpass(l)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{NoiseKey, NoisePurpose};
    use proptest::prelude::*;

    fn uniform(shape: Shape, seed: u64) -> ImageBuffer {
        use rand::Rng;
        let mut rng = NoiseKey::new(seed, 0, NoisePurpose::Auxiliary).rng();
        ImageBuffer::new(
            shape,
            (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn params_validation() {
        assert_eq!(BilateralParams::new(5.0, 0.35).unwrap().radius, 15);
        assert_eq!(BilateralParams::new(0.2, 0.35).unwrap().radius, 1);
        assert!(BilateralParams::new(0.0, 0.35).is_err());
        assert!(BilateralParams::new(1.0, -1.0).is_err());
        assert!(BilateralParams::with_radius(1.0, 0.1, 0).is_ok());
    }

    #[test]
    fn constant_guide_gives_gaussian_blur() {
        let guide = ImageBuffer::filled(Shape::new(9, 7, 3), 0.3).unwrap();
        let params = BilateralParams::with_radius(1.5, 0.2, 3).unwrap();
        let f = build_bilateral_tensor(&guide, &params).unwrap();
        let x = uniform(Shape::new(9, 7, 2), 3);
        let got = f.apply(&x).unwrap();
        // independent truncated Gaussian with renormalization at borders
        let want = ImageBuffer::from_fn(x.shape(), |y, xx, c| {
            let (mut acc, mut norm) = (0.0, 0.0);
            for qy in 0..9i64 {
                for qx in 0..7i64 {
                    let (dy, dx) = (qy - y as i64, qx - xx as i64);
                    if dy.abs() > 3 || dx.abs() > 3 {
                        continue;
                    }
                    let wt = (-((dy * dy + dx * dx) as f64) / (2.0 * 1.5 * 1.5)).exp();
                    acc += wt * x.get(qy as usize, qx as usize, c);
                    norm += wt;
                }
            }
            acc / norm
        })
        .unwrap();
        assert!(got.max_abs_diff(&want).unwrap() < 1e-6);
    }

    #[test]
    fn single_pixel_is_identity() {
        let guide = ImageBuffer::filled(Shape::new(1, 1, 3), -0.5).unwrap();
        let f = build_bilateral_tensor(&guide, &BilateralParams::new(5.0, 0.35).unwrap()).unwrap();
        assert_eq!(f.weights_at(0, 0).iter().sum::<f64>(), 1.0);
        let x = ImageBuffer::new(Shape::new(1, 1, 4), vec![0.1, -0.2, 0.3, 0.9]).unwrap();
        assert_eq!(f.apply(&x).unwrap(), x);
    }

    #[test]
    fn packed_matches_brute_force() {
        let guide = uniform(Shape::new(16, 16, 3), 10);
        let params = BilateralParams::new(5.0, 0.35).unwrap();
        let f = build_bilateral_tensor(&guide, &params).unwrap();
        assert!(f.max_row_sum_error() < 1e-9);
        assert!(f.min_weight() >= 0.0);
        for i in 0..10 {
            let x = uniform(Shape::new(16, 16, 4), 100 + i);
            let packed = f.apply(&x).unwrap();
            let brute = brute_force_joint_bilateral(&guide, &x, &params).unwrap();
            assert!(packed.max_abs_diff(&brute).unwrap() <= 1e-6);
        }
    }

    #[test]
    fn odd_channel_counts_use_generic_path() {
        let guide = uniform(Shape::new(6, 5, 1), 1);
        let params = BilateralParams::with_radius(2.0, 0.5, 2).unwrap();
        let f = build_bilateral_tensor(&guide, &params).unwrap();
        let x = uniform(Shape::new(6, 5, 7), 2);
        let brute = brute_force_joint_bilateral(&guide, &x, &params).unwrap();
        assert!(f.apply(&x).unwrap().max_abs_diff(&brute).unwrap() < 1e-6);
    }

    #[test]
    fn constants_are_preserved() {
        let guide = uniform(Shape::new(8, 8, 3), 4);
        let f = build_bilateral_tensor(&guide, &BilateralParams::new(2.0, 0.3).unwrap()).unwrap();
        let x = ImageBuffer::filled(Shape::new(8, 8, 3), 0.7).unwrap();
        let y = f.apply(&x).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let guide = uniform(Shape::new(8, 8, 1), 4);
        let f = build_bilateral_tensor(&guide, &BilateralParams::new(2.0, 0.3).unwrap()).unwrap();
        let wrong = ImageBuffer::zeros(Shape::new(8, 9, 1)).unwrap();
        assert!(f.apply(&wrong).is_err());
        assert!(brute_force_joint_bilateral(
            &guide,
            &wrong,
            &BilateralParams::new(2.0, 0.3).unwrap()
        )
        .is_err());
    }

    #[test]
    fn residual_detail_identities() {
        let guide = uniform(Shape::new(10, 10, 3), 5);
        let f = build_bilateral_tensor(&guide, &BilateralParams::new(2.0, 0.3).unwrap()).unwrap();
        let flat = ImageBuffer::filled(Shape::new(10, 10, 3), -0.25).unwrap();
        assert!(residual_detail(&flat, &f).unwrap().max_abs() < 1e-12);
        let x = uniform(Shape::new(10, 10, 3), 6);
        let sum = f
            .apply(&x)
            .unwrap()
            .add(&residual_detail(&x, &f).unwrap())
            .unwrap();
        assert!(sum.max_abs_diff(&x).unwrap() < 1e-15);
    }

    #[test]
    fn residual_has_zero_local_mean_in_smooth_region() {
        // guide is constant inside a square and far away outside it; the
        // image is constant inside the square and random outside
        let shape = Shape::new(16, 16, 1);
        let inside = |y: usize, x: usize| (3..13).contains(&y) && (3..13).contains(&x);
        let guide =
            ImageBuffer::from_fn(shape, |y, x, _| if inside(y, x) { -1.0 } else { 1.0 }).unwrap();
        let noise = uniform(shape, 7);
        let x = ImageBuffer::from_fn(shape, |y, xx, _| {
            if inside(y, xx) {
                0.35
            } else {
                noise.get(y, xx, 0)
            }
        })
        .unwrap();
        let params = BilateralParams::with_radius(2.0, 0.05, 6).unwrap();
        let f = build_bilateral_tensor(&guide, &params).unwrap();
        let detail = residual_detail(&x, &f).unwrap();
        let window: Vec<f64> = (3..13)
            .flat_map(|y| (3..13).map(move |xx| (y, xx)))
            .map(|(y, xx)| detail.get(y, xx, 0))
            .collect();
        let mean = window.iter().sum::<f64>() / window.len() as f64;
        assert!(mean.abs() <= 1e-6, "{mean}");
        // outside the square the residual is not small
        assert!(detail.get(0, 0, 0).abs() > 1e-3);
    }

    #[test]
    fn lowpass_identity_and_constants() {
        let x = uniform(Shape::new(7, 9, 2), 8);
        assert_eq!(ilvr_lowpass(&x, 1).unwrap(), x);
        assert!(ilvr_lowpass(&x, 0).is_err());
        let flat = ImageBuffer::filled(Shape::new(7, 9, 2), 0.6).unwrap();
        for n in [2, 3, 4, 8, 16] {
            let y = ilvr_lowpass(&flat, n).unwrap();
            assert!(y.max_abs_diff(&flat).unwrap() < 1e-12, "N={n}");
        }
    }

    #[test]
    fn lowpass_ramp_hand_computed() {
        // 8x8 ramp v = x: 4x4 block means are 1.5 (left) and 5.5 (right)
        let ramp = ImageBuffer::from_fn(Shape::new(8, 8, 1), |_, x, _| x as f64).unwrap();
        let y = ilvr_lowpass(&ramp, 4).unwrap();
        // half-pixel centers: src = (x + 0.5)/4 - 0.5, clamped to [0, 1]
        let expected_row = [1.5, 1.5, 2.0, 3.0, 4.0, 5.0, 5.5, 5.5];
        for row in 0..8 {
            for (x, &e) in expected_row.iter().enumerate() {
                assert!((y.get(row, x, 0) - e).abs() < 1e-12, "({row},{x})");
            }
        }
    }

    #[test]
    fn nearest_lowpass_is_a_projection() {
        let f = LowpassFilter::new(4, Upsample::Nearest).unwrap();
        let x = uniform(Shape::new(16, 12, 3), 9);
        let once = f.apply(&x).unwrap();
        let twice = f.apply(&once).unwrap();
        assert!(once.max_abs_diff(&twice).unwrap() < 1e-15);
    }

    #[test]
    fn tensor_dump_round_trip() {
        let guide = uniform(Shape::new(6, 5, 3), 11);
        let f = build_bilateral_tensor(&guide, &BilateralParams::with_radius(2.0, 0.3, 2).unwrap())
            .unwrap();
        let mut bytes = Vec::new();
        f.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"FGDT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 6);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 5);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 16 + 6 * 5 * 25 * 4);
        let back = FilterTensor::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, f);
        let x = uniform(Shape::new(6, 5, 3), 12);
        assert!(
            back.apply(&x)
                .unwrap()
                .max_abs_diff(&f.apply(&x).unwrap())
                .unwrap()
                == 0.0
        );

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(FilterTensor::read_from(bad.as_slice()).is_err());
        assert!(FilterTensor::read_from(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn filter_is_linear(seed in 0u64..10_000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let shape = Shape::new(9, 11, 3);
            let guide = uniform(shape, seed);
            let f = build_bilateral_tensor(&guide, &BilateralParams::new(1.5, 0.3).unwrap()).unwrap();
            let x = uniform(shape, seed + 1);
            let y = uniform(shape, seed + 2);
            let lhs = f.apply(&x.lincomb(a, &y, b).unwrap()).unwrap();
            let rhs = f.apply(&x).unwrap().lincomb(a, &f.apply(&y).unwrap(), b).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-9);

            let l = LowpassFilter::new(3, Upsample::Bilinear).unwrap();
            let lhs = l.apply(&x.lincomb(a, &y, b).unwrap()).unwrap();
            let rhs = l.apply(&x).unwrap().lincomb(a, &l.apply(&y).unwrap(), b).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-9);
        }

        #[test]
        fn rows_are_stochastic(seed in 0u64..10_000, ss in 0.5f64..6.0, sv in 0.05f64..1.0, h in 1usize..14, w in 1usize..14) {
            let guide = uniform(Shape::new(h, w, 3), seed);
            let f = build_bilateral_tensor(&guide, &BilateralParams::new(ss, sv).unwrap()).unwrap();
            prop_assert!(f.max_row_sum_error() <= 1e-9);
            prop_assert!(f.min_weight() >= 0.0);
        }
    }
}

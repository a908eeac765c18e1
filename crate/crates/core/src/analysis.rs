//! Frequency-domain diagnostics and trajectory summaries.

use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{FgdError, Result};
use crate::filters::LinearFilter;
use crate::guidance::d_score;
use crate::image::{ImageBuffer, Shape};
use crate::rng::{NoiseKey, NoisePurpose};
use crate::samplers::Trajectory;
use crate::schedule::VarianceSchedule;

/// Radially binned spectrum: `(radius, value)` with strictly increasing radii.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialSpectrum {
    pub bins: Vec<(f64, f64)>,
}

impl RadialSpectrum {
    pub fn radii(&self) -> impl Iterator<Item = f64> + '_ {
        self.bins.iter().map(|b| b.0)
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.bins.iter().map(|b| b.1)
    }

    pub fn value_at(&self, radius: f64) -> Option<f64> {
        self.bins.iter().find(|b| b.0 == radius).map(|b| b.1)
    }

    /// Least-squares slope of `ln value` against `ln radius`, skipping DC and
    /// empty bins.
    pub fn log_log_slope(&self, max_radius: f64) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .bins
            .iter()
            .filter(|&&(r, v)| r > 0.0 && r <= max_radius && v > 0.0)
            .map(|&(r, v)| (r.ln(), v.ln()))
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        Some(sxy / sxx)
    }
}

/// Unitary 2-D DFT of one channel.
fn dft2(x: &ImageBuffer, channel: usize, planner: &mut FftPlanner<f64>) -> Vec<Complex64> {
    let (h, w) = (x.height(), x.width());
    let mut buf: Vec<Complex64> = (0..h * w)
        .map(|i| Complex64::new(x.data()[i * x.channels() + channel], 0.0))
        .collect();
    transform2(&mut buf, h, w, planner, false);
    buf
}

fn transform2(
    buf: &mut [Complex64],
    h: usize,
    w: usize,
    planner: &mut FftPlanner<f64>,
    inverse: bool,
) {
    let row_fft = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    for row in buf.chunks_mut(w) {
        row_fft.process(row);
    }
    let col_fft = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
    let norm = 1.0 / ((h * w) as f64).sqrt();
    buf.iter_mut().for_each(|v| *v *= norm);
}

fn signed_freq(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Radial bin of DFT index `(ky, kx)`: the Euclidean frequency radius,
/// expressed in cycles per `min(H, W)` pixels, rounded to the nearest integer.
fn radial_bin(ky: usize, kx: usize, h: usize, w: usize) -> usize {
    let s = h.min(w) as f64;
    let fy = signed_freq(ky, h) * s / h as f64;
    let fx = signed_freq(kx, w) * s / w as f64;
    (fy * fy + fx * fx).sqrt().round() as usize
}

fn bin_average(h: usize, w: usize, value: impl Fn(usize, usize) -> f64) -> RadialSpectrum {
    let max_bin = radial_bin(h / 2, w / 2, h, w);
    let mut sums = vec![0.0; max_bin + 1];
    let mut counts = vec![0usize; max_bin + 1];
    for ky in 0..h {
        for kx in 0..w {
            let b = radial_bin(ky, kx, h, w);
            sums[b] += value(ky, kx);
            counts[b] += 1;
        }
    }
    RadialSpectrum {
        bins: sums
            .into_iter()
            .zip(counts)
            .enumerate()
            .filter(|(_, (_, c))| *c > 0)
            .map(|(r, (s, c))| (r as f64, s / c as f64))
            .collect(),
    }
}

/// Per-coefficient amplitudes of the unitary DFT, averaged over channels.
fn amplitude_grid(x: &ImageBuffer) -> Vec<f64> {
    let mut planner = FftPlanner::new();
    let mut grid = vec![0.0; x.height() * x.width()];
    for c in 0..x.channels() {
        for (g, v) in grid.iter_mut().zip(dft2(x, c, &mut planner)) {
            *g += v.norm();
        }
    }
    let inv = 1.0 / x.channels() as f64;
    grid.iter_mut().for_each(|g| *g *= inv);
    grid
}

/// Mean DFT amplitude per integer radial frequency bin, averaged over channels.
pub fn radial_amplitude_spectrum(x: &ImageBuffer) -> RadialSpectrum {
    let grid = amplitude_grid(x);
    let w = x.width();
    bin_average(x.height(), w, |ky, kx| grid[ky * w + kx])
}

/// Total energy of the unitary DFT over all channels; equals `Σ x²`.
pub fn spectral_energy(x: &ImageBuffer) -> f64 {
    let mut planner = FftPlanner::new();
    (0..x.channels())
        .map(|c| {
            dft2(x, c, &mut planner)
                .iter()
                .map(|v| v.norm_sqr())
                .sum::<f64>()
        })
        .sum()
}

/// Single-channel `size × size` image with amplitude spectrum `∝ 1/max(r, 1)`,
/// random phases, zero mean, scaled so the largest magnitude is one.
pub fn synth_one_over_f(size: usize, seed: u64) -> Result<ImageBuffer> {
    if size == 0 {
        return Err(FgdError::DegenerateShape(Shape::new(0, 0, 1)));
    }
    let mut rng = NoiseKey::new(seed, 0, NoisePurpose::Auxiliary).rng();
    let mut buf: Vec<Complex64> = (0..size * size)
        .map(|i| {
            let (ky, kx) = (i / size, i % size);
            let fy = signed_freq(ky, size);
            let fx = signed_freq(kx, size);
            let r = (fy * fy + fx * fx).sqrt();
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            if r == 0.0 {
                Complex64::new(0.0, 0.0)
            } else {
                Complex64::from_polar(1.0 / r.max(1.0), phase)
            }
        })
        .collect();
    let mut planner = FftPlanner::new();
    transform2(&mut buf, size, size, &mut planner, true);
    let real: Vec<f64> = buf.iter().map(|v| v.re).collect();
    let mean = real.iter().sum::<f64>() / real.len() as f64;
    let centered: Vec<f64> = real.iter().map(|v| v - mean).collect();
    let peak = centered.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { 1.0 / peak } else { 1.0 };
    ImageBuffer::new(
        Shape::new(size, size, 1),
        centered.into_iter().map(|v| v * scale).collect(),
    )
}

/// Expected DFT amplitude of unit white noise, binned like the spectra.
///
/// Self-conjugate coefficients are real `N(0, 1)` with mean magnitude
/// `√(2/π)`; the rest are circular complex Gaussians with mean magnitude `√π/2`.
pub fn noise_amplitude_spectrum(height: usize, width: usize) -> RadialSpectrum {
    let real = (2.0 / std::f64::consts::PI).sqrt();
    let complex = std::f64::consts::PI.sqrt() / 2.0;
    let self_conj = |k: usize, n: usize| k == 0 || (n % 2 == 0 && k == n / 2);
    bin_average(height, width, |ky, kx| {
        if self_conj(ky, height) && self_conj(kx, width) {
            real
        } else {
            complex
        }
    })
}

/// Per-bin amplitude signal-to-noise ratio under forward diffusion.
#[derive(Debug, Clone, PartialEq)]
pub struct SnrSpectrum {
    /// `(radius, √ᾱ_t·A_x0(r) / (√(1 − ᾱ_t)·A_noise(r)))`, or the signal
    /// amplitude alone when `noiseless`.
    pub spectrum: RadialSpectrum,
    /// Set at `t = 0`, where there is no noise to compare against.
    pub noiseless: bool,
}

pub fn snr_per_frequency(x0: &ImageBuffer, s: &VarianceSchedule, t: usize) -> Result<SnrSpectrum> {
    let (signal, noise) = s.signal_noise_strength(t)?;
    let amp = radial_amplitude_spectrum(x0);
    if noise == 0.0 {
        return Ok(SnrSpectrum {
            spectrum: RadialSpectrum {
                bins: amp.bins.iter().map(|&(r, a)| (r, signal * a)).collect(),
            },
            noiseless: true,
        });
    }
    let flat = noise_amplitude_spectrum(x0.height(), x0.width());
    let bins = amp
        .bins
        .iter()
        .zip(&flat.bins)
        .map(|(&(r, a), &(_, n))| (r, signal * a / (noise * n)))
        .collect();
    Ok(SnrSpectrum {
        spectrum: RadialSpectrum { bins },
        noiseless: false,
    })
}

/// `mean |f(a) − f(b)|`.
pub fn structure_distance(a: &ImageBuffer, b: &ImageBuffer, f: &impl LinearFilter) -> Result<f64> {
    Ok(d_score(&f.apply(a)?.sub(&f.apply(b)?)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceSummary {
    /// `(t, d̄_t)` in sampling order.
    pub d_series: Vec<(usize, f64)>,
    pub lambda_series: Vec<(usize, f64)>,
    pub final_structure_distance: Option<f64>,
    /// Median `|d̄_{t−1} − d̄_t|` over steps inside the guidance window.
    pub median_change_during: Option<f64>,
    /// Median `|d̄_{t−1} − d̄_t|` over steps after guidance stopped.
    pub median_change_after: Option<f64>,
    /// `d̄` at the last guided step is below `d̄` at the first guided step.
    pub decreased_during_guidance: Option<bool>,
    /// Median relative change per step after guidance stopped is at most
    /// `flatten_threshold`.
    pub flattens: Option<bool>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

pub fn trace_summary(traj: &Trajectory, flatten_threshold: f64) -> TraceSummary {
    summarize_series(
        traj.records.iter().map(|r| (r.t, r.d_score)).collect(),
        traj.records.iter().map(|r| (r.t, r.lambda)).collect(),
        traj.guidance_window,
        traj.final_d_score,
        flatten_threshold,
    )
}

/// [`trace_summary`] from raw `(t, d̄)` and `(t, λ)` series in sampling order,
/// for traces read back from disk. `window` is `(t_start, t_stop)`.
pub fn summarize_series(
    d_series: Vec<(usize, f64)>,
    lambda_series: Vec<(usize, f64)>,
    window: Option<(usize, usize)>,
    final_structure_distance: Option<f64>,
    flatten_threshold: f64,
) -> TraceSummary {
    let mut summary = TraceSummary {
        d_series: d_series.clone(),
        lambda_series,
        final_structure_distance,
        median_change_during: None,
        median_change_after: None,
        decreased_during_guidance: None,
        flattens: None,
    };
    let Some((t_start, t_stop)) = window else {
        return summary;
    };
    if d_series.iter().any(|d| d.1.is_nan()) {
        return summary;
    }
    let mut during = Vec::new();
    let mut after = Vec::new();
    let mut after_rel = Vec::new();
    for pair in d_series.windows(2) {
        let ((t, d), (_, d_next)) = (pair[0], pair[1]);
        let change = (d_next - d).abs();
        if t > t_stop && t <= t_start {
            during.push(change);
        } else if t < t_stop {
            after.push(change);
            after_rel.push(change / d.max(f64::MIN_POSITIVE));
        }
    }
    summary.median_change_during = median(during);
    summary.median_change_after = median(after);
    summary.flattens = median(after_rel).map(|m| m <= flatten_threshold);
    let guided: Vec<f64> = d_series
        .iter()
        .filter(|(t, _)| (t_stop..=t_start).contains(t))
        .map(|d| d.1)
        .collect();
    if guided.len() >= 2 {
        summary.decreased_during_guidance = Some(guided[guided.len() - 1] < guided[0]);
    }
    summary
}

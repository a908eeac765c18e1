//! Filter guidance: pull the filtered structure of each step's mean toward
//! the filtered guide image, with a weight that adapts to how far off the
//! sample currently is.
//!
//! At step `t` with mean `μ`:
//!
//! ```text
//! d_t = f(x_g) − f(μ)
//! d̄_t = mean |d_t|
//! λ_t = min(d̄_t / δ, 1) · √ᾱ_t
//! μ'  = μ + λ_t · d_t
//! ```
//!
//! `δ` sets how much structural error is tolerated before the adjustment
//! saturates; `√ᾱ_t` keeps the added signal no larger than what a real
//! sample carries at that noise level.

use crate::error::{FgdError, Result};
use crate::filters::{GuideFilter, LinearFilter};
use crate::image::ImageBuffer;
use crate::samplers::{GuidanceHook, HookOutput, InitMode, SamplerKind};
use crate::schedule::VarianceSchedule;

/// `f(x_g) − f(μ)` given the precomputed `f(x_g)`.
pub fn guidance_vector(
    filter: &impl LinearFilter,
    guide_filtered: &ImageBuffer,
    mu: &ImageBuffer,
) -> Result<ImageBuffer> {
    mu.ensure_shape(guide_filtered.shape())?;
    guide_filtered.sub(&filter.apply(mu)?)
}

/// Mean absolute value over every pixel and channel.
pub fn d_score(d: &ImageBuffer) -> f64 {
    d.mean_abs()
}

/// `min(d̄ / δ, 1) · √ᾱ`. An infinite `δ` gives zero.
pub fn adaptive_weight(d_bar: f64, delta: f64, sqrt_alpha_cum: f64) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(FgdError::InvalidParameter(format!(
            "delta must be positive, got {delta}"
        )));
    }
    Ok((d_bar / delta).min(1.0) * sqrt_alpha_cum)
}

/// `μ + λ·d`; `λ = 0` returns `μ` bit for bit.
pub fn guided_mean(mu: &ImageBuffer, d: &ImageBuffer, lambda: f64) -> Result<ImageBuffer> {
    if lambda == 0.0 {
        d.ensure_shape(mu.shape())?;
        return Ok(mu.clone());
    }
    mu.lincomb(1.0, d, lambda)
}

/// One-shot structure transfer `x₀ − f(x₀) + f(x_g)`.
///
/// Evaluated as `f(x_g) + (x₀ − f(x₀))`, except that pixels where the
/// filtered images agree exactly return `x₀`. Both forms are the same value;
/// the split makes `x_g = x₀` and an identity filter exact in floating point.
pub fn laplacian_blend(
    x0: &ImageBuffer,
    guide: &ImageBuffer,
    f: &impl LinearFilter,
) -> Result<ImageBuffer> {
    guide.ensure_shape(x0.shape())?;
    let fx = f.apply(x0)?;
    let fg = f.apply(guide)?;
    let data = x0
        .data()
        .iter()
        .zip(fx.data())
        .zip(fg.data())
        .map(|((&x, &fx), &fg)| if fg == fx { x } else { fg + (x - fx) })
        .collect();
    ImageBuffer::new(x0.shape(), data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub t: usize,
    pub d_score: f64,
    pub lambda: f64,
}

/// Guidance setup and per-step trace for one trajectory.
#[derive(Debug, Clone)]
pub struct GuidanceState {
    filter: GuideFilter,
    guide_filtered: ImageBuffer,
    delta: f64,
    t_start: usize,
    t_stop: usize,
    trace: Vec<TraceEntry>,
}

impl GuidanceState {
    /// `delta` may be `f64::INFINITY`, which measures without adjusting.
    pub fn new(
        filter: GuideFilter,
        guide: &ImageBuffer,
        delta: f64,
        t_start: usize,
        t_stop: usize,
    ) -> Result<Self> {
        if !(delta > 0.0) {
            return Err(FgdError::InvalidParameter(format!(
                "delta must be positive, got {delta}"
            )));
        }
        if t_stop > t_start {
            return Err(FgdError::InvalidParameter(format!(
                "t_stop ({t_stop}) must not exceed t_start ({t_start})"
            )));
        }
        let guide_filtered = filter.apply(guide)?;
        Ok(Self {
            filter,
            guide_filtered,
            delta,
            t_start,
            t_stop,
            trace: Vec::new(),
        })
    }

    pub fn filter(&self) -> &GuideFilter {
        &self.filter
    }

    pub fn guide_filtered(&self) -> &ImageBuffer {
        &self.guide_filtered
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn t_start(&self) -> usize {
        self.t_start
    }

    pub fn t_stop(&self) -> usize {
        self.t_stop
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    pub fn in_window(&self, t: usize) -> bool {
        (self.t_stop..=self.t_start).contains(&t)
    }

    pub fn vector(&self, mu: &ImageBuffer) -> Result<ImageBuffer> {
        guidance_vector(&self.filter, &self.guide_filtered, mu)
    }

    /// Guidance error `d̄` of an arbitrary image against the guide.
    pub fn structure_error(&self, x: &ImageBuffer) -> Result<f64> {
        Ok(d_score(&self.vector(x)?))
    }

    /// Adjusts `mu` when `t` lies in `[t_stop, t_start]`; otherwise returns
    /// it unchanged. The measured `d̄` and the applied `λ` are appended to
    /// the trace either way.
    pub fn step(&mut self, mu: &ImageBuffer, t: usize, signal_strength: f64) -> Result<HookOutput> {
        let d = self.vector(mu)?;
        let d_bar = d_score(&d);
        let lambda = if self.in_window(t) {
            adaptive_weight(d_bar, self.delta, signal_strength)?
        } else {
            0.0
        };
        let value = guided_mean(mu, &d, lambda)?;
        self.trace.push(TraceEntry {
            t,
            d_score: d_bar,
            lambda,
        });
        Ok(HookOutput {
            value,
            d_score: d_bar,
            lambda,
        })
    }

    /// [`GuidanceState::step`] on a DDPM posterior mean at step `t` of `s`.
    pub fn guidance_hook(
        &mut self,
        mu: &ImageBuffer,
        t: usize,
        s: &VarianceSchedule,
    ) -> Result<ImageBuffer> {
        let (signal, _) = s.signal_noise_strength(t)?;
        Ok(self.step(mu, t, signal)?.value)
    }
}

impl GuidanceHook for GuidanceState {
    fn apply(&mut self, value: &ImageBuffer, t: usize, signal_strength: f64) -> Result<HookOutput> {
        self.step(value, t, signal_strength)
    }

    fn window(&self) -> Option<(usize, usize)> {
        Some((self.t_start, self.t_stop))
    }

    fn measure(&self, x: &ImageBuffer) -> Result<Option<f64>> {
        self.structure_error(x).map(Some)
    }
}

/// Named default settings for one sampler family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub sampler: SamplerKind,
    pub init: InitMode,
    /// Respaced inference steps.
    pub steps: usize,
    pub t_start: usize,
    pub t_stop: usize,
    pub delta: f64,
    pub sigma_spatial: f64,
    pub sigma_value: f64,
}

pub const PRESETS: [Preset; 5] = [
    Preset {
        name: "sd-ddim",
        sampler: SamplerKind::Ddim,
        init: InitMode::Noise,
        steps: 50,
        t_start: 50,
        t_stop: 10,
        delta: 0.05,
        sigma_spatial: 5.0,
        sigma_value: 0.35,
    },
    Preset {
        name: "sd-plms",
        sampler: SamplerKind::Plms,
        init: InitMode::Noise,
        steps: 50,
        t_start: 50,
        t_stop: 10,
        delta: 0.05,
        sigma_spatial: 5.0,
        sigma_value: 0.35,
    },
    Preset {
        name: "sd-sdedit",
        sampler: SamplerKind::Ddim,
        init: InitMode::Sdedit { strength: 0.6 },
        steps: 50,
        t_start: 50,
        t_stop: 10,
        delta: 0.05,
        sigma_spatial: 5.0,
        sigma_value: 0.35,
    },
    Preset {
        name: "sd-ddpm",
        sampler: SamplerKind::Ddpm,
        init: InitMode::Noise,
        steps: 50,
        t_start: 50,
        t_stop: 25,
        delta: 0.2,
        sigma_spatial: 5.0,
        sigma_value: 0.35,
    },
    Preset {
        name: "glide-ddpm",
        sampler: SamplerKind::Ddpm,
        init: InitMode::Noise,
        steps: 100,
        t_start: 100,
        t_stop: 50,
        delta: 0.6,
        sigma_spatial: 3.0,
        sigma_value: 0.2,
    },
];

pub fn preset(name: &str) -> Option<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name)
}

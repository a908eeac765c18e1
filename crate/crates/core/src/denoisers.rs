//! Closed-form noise predictors for Gaussian and Gaussian-mixture data
//! distributions.
//!
//! For `x_t = √ᾱ·x₀ + √(1−ᾱ)·z` with a Gaussian prior on `x₀` the posterior
//! mean `E[x₀ | x_t]` is available exactly, and the matching noise estimate
//! follows by inverting the forward mixing. These stand in for a trained
//! network so every sampler and guidance path can be checked exactly.

use rand::Rng;

use crate::error::{FgdError, Result};
use crate::image::{ImageBuffer, Shape};
use crate::rng::{NoiseKey, NoisePurpose};
use crate::samplers::Denoiser;
use crate::schedule::VarianceSchedule;

/// Standard deviation used to model a point mass.
pub const POINT_MASS_STD: f64 = 1e-6;

/// Default spread of each template component.
pub const DEFAULT_TEMPLATE_STD: f64 = 0.2;

/// A data distribution whose posterior mean is known in closed form.
pub trait Prior: Send + Sync {
    fn shape(&self) -> Shape;

    /// `E[x₀ | x_t]` when `x_t` carries signal fraction `alpha_cum`.
    fn posterior_mean(&self, x_t: &ImageBuffer, alpha_cum: f64) -> Result<ImageBuffer>;
}

/// Isotropic Gaussian `N(mean, std²·I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrior {
    pub mean: ImageBuffer,
    pub std: f64,
}

impl GaussianPrior {
    pub fn new(mean: ImageBuffer, std: f64) -> Result<Self> {
        if !(std > 0.0 && std.is_finite()) {
            return Err(FgdError::InvalidParameter(format!(
                "prior std must be positive, got {std}"
            )));
        }
        Ok(Self { mean, std })
    }

    /// A point mass at `mean`, modelled as a Gaussian with std [`POINT_MASS_STD`].
    /// Posterior means are then `mean` up to terms of order `1e-12 / (1 − ᾱ)`.
    pub fn point_mass(mean: ImageBuffer) -> Self {
        Self {
            mean,
            std: POINT_MASS_STD,
        }
    }
}

/// Posterior mean of a single Gaussian component, elementwise:
/// `(σ²·√ᾱ·x_t + (1 − ᾱ)·μ) / (ᾱ·σ² + 1 − ᾱ)`.
fn component_posterior_mean(
    x_t: &ImageBuffer,
    mean: &ImageBuffer,
    std: f64,
    alpha_cum: f64,
) -> Result<ImageBuffer> {
    let var = std * std;
    let denom = alpha_cum * var + (1.0 - alpha_cum);
    let a = var * alpha_cum.sqrt() / denom;
    let b = (1.0 - alpha_cum) / denom;
    x_t.lincomb(a, mean, b)
}

impl Prior for GaussianPrior {
    fn shape(&self) -> Shape {
        self.mean.shape()
    }

    fn posterior_mean(&self, x_t: &ImageBuffer, alpha_cum: f64) -> Result<ImageBuffer> {
        component_posterior_mean(x_t, &self.mean, self.std, alpha_cum)
    }
}

/// Equal-spread Gaussian mixture around a set of template images.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateMixture {
    pub templates: Vec<ImageBuffer>,
    pub std: f64,
    pub weights: Vec<f64>,
}

impl TemplateMixture {
    pub fn new(templates: Vec<ImageBuffer>, std: f64, weights: Vec<f64>) -> Result<Self> {
        let first = templates.first().ok_or_else(|| {
            FgdError::InvalidParameter("mixture needs at least one template".into())
        })?;
        for t in &templates[1..] {
            t.ensure_shape(first.shape())?;
        }
        if weights.len() != templates.len() {
            return Err(FgdError::InvalidParameter(format!(
                "{} weights for {} templates",
                weights.len(),
                templates.len()
            )));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(FgdError::InvalidParameter(
                "mixture weights must be non-negative and sum to 1".into(),
            ));
        }
        if !(std > 0.0 && std.is_finite()) {
            return Err(FgdError::InvalidParameter(format!(
                "template std must be positive, got {std}"
            )));
        }
        Ok(Self {
            templates,
            std,
            weights,
        })
    }

    pub fn uniform(templates: Vec<ImageBuffer>, std: f64) -> Result<Self> {
        let k = templates.len().max(1);
        Self::new(templates, std, vec![1.0 / k as f64; k])
    }

    /// Component responsibilities `r_k ∝ w_k·N(x_t; √ᾱ·μ_k, (ᾱσ² + 1 − ᾱ)·I)`,
    /// normalized in log space.
    pub fn responsibilities(&self, x_t: &ImageBuffer, alpha_cum: f64) -> Result<Vec<f64>> {
        x_t.ensure_shape(self.shape())?;
        let var = alpha_cum * self.std * self.std + (1.0 - alpha_cum);
        let sa = alpha_cum.sqrt();
        let logits: Vec<f64> = self
            .templates
            .iter()
            .zip(&self.weights)
            .map(|(mu, &w)| {
                let d2: f64 = x_t
                    .data()
                    .iter()
                    .zip(mu.data())
                    .map(|(x, m)| (x - sa * m).powi(2))
                    .sum();
                w.ln() - d2 / (2.0 * var)
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        Ok(exps.into_iter().map(|e| e / total).collect())
    }
}

impl Prior for TemplateMixture {
    fn shape(&self) -> Shape {
        self.templates[0].shape()
    }

    fn posterior_mean(&self, x_t: &ImageBuffer, alpha_cum: f64) -> Result<ImageBuffer> {
        let resp = self.responsibilities(x_t, alpha_cum)?;
        let mut out = ImageBuffer::zeros(x_t.shape())?;
        for (mu, r) in self.templates.iter().zip(resp) {
            if r == 0.0 {
                continue;
            }
            let m = component_posterior_mean(x_t, mu, self.std, alpha_cum)?;
            for (o, v) in out.data_mut().iter_mut().zip(m.data()) {
                *o += r * v;
            }
        }
        Ok(out)
    }
}

/// Noise estimate implied by a prior's posterior mean at step `t` of `s`.
pub fn prior_eps(
    prior: &impl Prior,
    s: &VarianceSchedule,
    x_t: &ImageBuffer,
    t: usize,
) -> Result<ImageBuffer> {
    if t == 0 {
        return Err(FgdError::Denoiser("no noise to predict at t = 0".into()));
    }
    s.check_t(t)?;
    x_t.ensure_shape(prior.shape())?;
    let (sa, sn) = s.signal_noise_strength(t)?;
    let x0 = prior.posterior_mean(x_t, s.alpha_cum(t))?;
    x_t.lincomb(1.0 / sn, &x0, -sa / sn)
}

pub fn gaussian_eps(
    prior: &GaussianPrior,
    s: &VarianceSchedule,
    x_t: &ImageBuffer,
    t: usize,
) -> Result<ImageBuffer> {
    prior_eps(prior, s, x_t, t)
}

pub fn mixture_eps(
    prior: &TemplateMixture,
    s: &VarianceSchedule,
    x_t: &ImageBuffer,
    t: usize,
) -> Result<ImageBuffer> {
    prior_eps(prior, s, x_t, t)
}

/// A [`Denoiser`] backed by an exact prior and its training schedule.
#[derive(Debug, Clone)]
pub struct AnalyticDenoiser<P> {
    prior: P,
    schedule: VarianceSchedule,
}

impl<P: Prior> AnalyticDenoiser<P> {
    /// `schedule` is the training schedule; samplers pass training timesteps.
    pub fn new(prior: P, schedule: VarianceSchedule) -> Self {
        Self { prior, schedule }
    }

    pub fn prior(&self) -> &P {
        &self.prior
    }

    pub fn schedule(&self) -> &VarianceSchedule {
        &self.schedule
    }
}

impl<P: Prior> Denoiser for AnalyticDenoiser<P> {
    fn predict_eps(&self, x_t: &ImageBuffer, t: usize) -> Result<ImageBuffer> {
        prior_eps(&self.prior, &self.schedule, x_t, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TemplateKind {
    Stripes,
    Blobs,
    Gradients,
}

impl std::str::FromStr for TemplateKind {
    type Err = FgdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stripes" => Ok(Self::Stripes),
            "blobs" => Ok(Self::Blobs),
            "gradients" => Ok(Self::Gradients),
            other => Err(FgdError::InvalidParameter(format!(
                "unknown template kind {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Stripes => "stripes",
            Self::Blobs => "blobs",
            Self::Gradients => "gradients",
        })
    }
}

/// One synthetic template; values stay within `[-0.8, 0.8]`.
pub fn synth_template(
    kind: TemplateKind,
    size: usize,
    channels: usize,
    seed: u64,
    index: usize,
) -> ImageBuffer {
    let mut rng = NoiseKey::new(
        seed ^ ((kind as u64 + 1) << 48),
        index,
        NoisePurpose::Auxiliary,
    )
    .rng();
    let shape = Shape::new(size, size, channels);
    let n = size as f64;
    let gains: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.5..1.0)).collect();
    let raw = match kind {
        TemplateKind::Stripes => {
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let cycles: f64 = rng.gen_range(1.0..3.0);
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let (dy, dx) = theta.sin_cos();
            ImageBuffer::from_fn(shape, |y, x, c| {
                let u = (y as f64 * dy + x as f64 * dx) / n;
                gains[c] * (std::f64::consts::TAU * cycles * u + phase).sin()
            })
        }
        TemplateKind::Blobs => {
            let blobs: Vec<(f64, f64, f64, f64)> = (0..3)
                .map(|_| {
                    (
                        rng.gen_range(0.15..0.85) * n,
                        rng.gen_range(0.15..0.85) * n,
                        rng.gen_range(0.1..0.25) * n,
                        if rng.gen_bool(0.5) { 1.6 } else { -1.6 },
                    )
                })
                .collect();
            ImageBuffer::from_fn(shape, |y, x, c| {
                let v: f64 = blobs
                    .iter()
                    .map(|&(cy, cx, r, a)| {
                        let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                        a * (-d2 / (2.0 * r * r)).exp()
                    })
                    .sum();
                gains[c] * v.tanh()
            })
        }
        TemplateKind::Gradients => {
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let (dy, dx) = theta.sin_cos();
            ImageBuffer::from_fn(shape, |y, x, c| {
                let u = ((y as f64 + 0.5) / n - 0.5) * dy + ((x as f64 + 0.5) / n - 0.5) * dx;
                gains[c] * (2.0 * std::f64::consts::SQRT_2 * u).clamp(-1.0, 1.0)
            })
        }
    }
    .expect("template shape is valid");
    raw.map(|v| 0.8 * v.clamp(-1.0, 1.0))
}

/// Deterministic synthetic "dataset" of `count` templates of one kind.
pub fn make_test_templates(
    kind: TemplateKind,
    size: usize,
    channels: usize,
    count: usize,
    seed: u64,
) -> Result<TemplateMixture> {
    if size == 0 || channels == 0 {
        return Err(FgdError::DegenerateShape(Shape::new(size, size, channels)));
    }
    let templates = (0..count)
        .map(|i| synth_template(kind, size, channels, seed, i))
        .collect();
    TemplateMixture::uniform(templates, DEFAULT_TEMPLATE_STD)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> ImageBuffer {
        ImageBuffer::filled(Shape::new(1, 1, 1), v).unwrap()
    }

    /// Schedule with ᾱ_1 = 0.64.
    fn schedule_064() -> VarianceSchedule {
        VarianceSchedule::from_betas(vec![0.36]).unwrap()
    }

    /// E[x₀ | x_t] by trapezoidal quadrature over x₀ for a scalar Gaussian prior.
    fn quadrature_posterior_mean(x_t: f64, alpha_cum: f64, mu: f64, std: f64) -> f64 {
        let (sa, sn) = (alpha_cum.sqrt(), (1.0 - alpha_cum).sqrt());
        let (lo, hi, n) = (mu - 12.0 * std, mu + 12.0 * std, 200_000);
        let h = (hi - lo) / n as f64;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..=n {
            let x0 = lo + h * i as f64;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            let p = (-(x0 - mu).powi(2) / (2.0 * std * std)).exp()
                * (-(x_t - sa * x0).powi(2) / (2.0 * sn * sn)).exp();
            num += w * x0 * p;
            den += w * p;
        }
        num / den
    }

    #[test]
    fn scalar_posterior_arithmetic() {
        let oracle = quadrature_posterior_mean(1.0, 0.64, 0.0, 1.0);
        assert!((oracle - 0.8).abs() < 1e-9);
        let prior = GaussianPrior::new(scalar(0.0), 1.0).unwrap();
        let s = schedule_064();
        let x0 = prior.posterior_mean(&scalar(1.0), 0.64).unwrap();
        assert!((x0.data()[0] - 0.8).abs() < 1e-12);
        let eps = gaussian_eps(&prior, &s, &scalar(1.0), 1).unwrap();
        assert!((eps.data()[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn quadrature_agrees_off_center() {
        let prior = GaussianPrior::new(scalar(0.3), 0.5).unwrap();
        for (x_t, a) in [(-1.2, 0.2), (0.7, 0.9), (2.0, 0.5)] {
            let got = prior.posterior_mean(&scalar(x_t), a).unwrap().data()[0];
            let want = quadrature_posterior_mean(x_t, a, 0.3, 0.5);
            assert!((got - want).abs() < 1e-8, "{got} vs {want}");
        }
    }

    #[test]
    fn point_mass_ignores_input() {
        let mu = ImageBuffer::from_fn(Shape::new(3, 3, 2), |y, x, c| {
            0.1 * (y + x + c) as f64 - 0.3
        })
        .unwrap();
        let prior = GaussianPrior::point_mass(mu.clone());
        let x_t = ImageBuffer::filled(mu.shape(), 5.0).unwrap();
        let x0 = prior.posterior_mean(&x_t, 0.5).unwrap();
        assert!(x0.max_abs_diff(&mu).unwrap() < 1e-10);
    }

    #[test]
    fn zero_mean_zero_input_gives_zero_eps() {
        let prior =
            GaussianPrior::new(ImageBuffer::zeros(Shape::new(2, 2, 1)).unwrap(), 0.7).unwrap();
        let s = VarianceSchedule::linear(10, 0.01, 0.2).unwrap();
        let eps = gaussian_eps(
            &prior,
            &s,
            &ImageBuffer::zeros(Shape::new(2, 2, 1)).unwrap(),
            4,
        )
        .unwrap();
        assert_eq!(eps.max_abs(), 0.0);
        assert!(gaussian_eps(&prior, &s, &eps, 0).is_err());
        assert!(gaussian_eps(&prior, &s, &eps, 11).is_err());
    }

    #[test]
    fn single_template_matches_gaussian() {
        let mu = synth_template(TemplateKind::Blobs, 8, 3, 1, 0);
        let mix = TemplateMixture::uniform(vec![mu.clone()], 0.3).unwrap();
        let gauss = GaussianPrior::new(mu, 0.3).unwrap();
        let s = VarianceSchedule::linear(100, 1e-3, 0.05).unwrap();
        let x_t = NoiseKey::new(3, 0, NoisePurpose::Auxiliary).normal_image(Shape::new(8, 8, 3));
        for t in [1, 30, 100] {
            let a = mixture_eps(&mix, &s, &x_t, t).unwrap();
            let b = gaussian_eps(&gauss, &s, &x_t, t).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        }
    }

    #[test]
    fn far_templates_give_dominant_responsibility() {
        let shape = Shape::new(2, 2, 1);
        let a = ImageBuffer::filled(shape, -6.0).unwrap();
        let b = ImageBuffer::filled(shape, 6.0).unwrap();
        let mix = TemplateMixture::uniform(vec![a.clone(), b], 0.2).unwrap();
        let alpha_cum: f64 = 0.5;
        let post_std = (alpha_cum * 0.04 + 1.0 - alpha_cum).sqrt();
        // per-pixel separation √ᾱ·12 over 4 pixels, measured in posterior stds
        let sep = alpha_cum.sqrt() * 12.0 * 2.0 / post_std;
        assert!(sep >= 20.0);
        let x_t = a.scale(alpha_cum.sqrt());
        let r = mix.responsibilities(&x_t, alpha_cum).unwrap();
        assert!(r[0] > 1.0 - 1e-6);
        let x0 = mix.posterior_mean(&x_t, alpha_cum).unwrap();
        let comp = component_posterior_mean(&x_t, &a, 0.2, alpha_cum).unwrap();
        assert!(x0.max_abs_diff(&comp).unwrap() < 1e-6);
    }

    #[test]
    fn symmetric_templates_shrink_to_zero() {
        let shape = Shape::new(3, 3, 2);
        let c = ImageBuffer::filled(shape, 0.6).unwrap();
        let mix = TemplateMixture::uniform(vec![c.clone(), c.scale(-1.0)], 0.2).unwrap();
        let x0 = mix
            .posterior_mean(&ImageBuffer::zeros(shape).unwrap(), 0.3)
            .unwrap();
        assert!(x0.max_abs() < 1e-15);
    }

    #[test]
    fn extreme_inputs_stay_finite() {
        let mix = make_test_templates(TemplateKind::Stripes, 8, 3, 4, 2).unwrap();
        let s = VarianceSchedule::default_training();
        for mag in [1e6, -1e6] {
            let x_t = ImageBuffer::filled(Shape::new(8, 8, 3), mag).unwrap();
            for t in [1, 10, 500, 1000] {
                let eps = mixture_eps(&mix, &s, &x_t, t).unwrap();
                assert!(eps.data().iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn mixture_validation() {
        let a = ImageBuffer::zeros(Shape::new(2, 2, 1)).unwrap();
        let b = ImageBuffer::zeros(Shape::new(2, 3, 1)).unwrap();
        assert!(TemplateMixture::uniform(vec![], 0.2).is_err());
        assert!(TemplateMixture::uniform(vec![a.clone(), b], 0.2).is_err());
        assert!(TemplateMixture::new(vec![a.clone()], 0.2, vec![0.5]).is_err());
        assert!(TemplateMixture::new(vec![a.clone(), a.clone()], 0.2, vec![1.5, -0.5]).is_err());
        assert!(TemplateMixture::uniform(vec![a], 0.0).is_err());
    }

    #[test]
    fn templates_are_deterministic_and_distinct() {
        let a = make_test_templates(TemplateKind::Blobs, 16, 3, 4, 9).unwrap();
        let b = make_test_templates(TemplateKind::Blobs, 16, 3, 4, 9).unwrap();
        assert_eq!(a, b);
        let one = make_test_templates(TemplateKind::Gradients, 16, 3, 1, 9).unwrap();
        assert_eq!(one.templates.len(), 1);
        assert_eq!(one.weights, vec![1.0]);

        let kinds = [
            TemplateKind::Stripes,
            TemplateKind::Blobs,
            TemplateKind::Gradients,
        ];
        let sets: Vec<_> = kinds
            .iter()
            .map(|&k| make_test_templates(k, 16, 3, 4, 9).unwrap())
            .collect();
        let mut min_dist = f64::INFINITY;
        for i in 0..3 {
            for j in (i + 1)..3 {
                for ta in &sets[i].templates {
                    for tb in &sets[j].templates {
                        min_dist = min_dist.min(ta.sub(tb).unwrap().mean_abs());
                    }
                }
            }
        }
        assert!(min_dist >= 0.1, "min cross-kind L1 {min_dist}");
        for set in &sets {
            for t in &set.templates {
                assert!(t.max_abs() <= 0.8);
            }
        }
    }
}

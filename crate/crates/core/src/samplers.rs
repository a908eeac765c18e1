//! Forward diffusion and reverse samplers driven by a black-box noise
//! predictor, with an optional per-step guidance hook.
//!
//! All steppers index the (possibly respaced) schedule they are given and
//! hand the denoiser the matching training timestep.

use crate::error::{FgdError, Result};
use crate::image::{ImageBuffer, Shape};
use crate::rng::{NoiseKey, NoisePurpose};
use crate::schedule::VarianceSchedule;

/// Black-box noise predictor `ε_θ(x_t, t)`.
///
/// `t` is a training timestep. Implementations must be deterministic and
/// return an image of the input's shape.
pub trait Denoiser: Send + Sync {
    fn predict_eps(&self, x_t: &ImageBuffer, t: usize) -> Result<ImageBuffer>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn predict_eps(&self, x_t: &ImageBuffer, t: usize) -> Result<ImageBuffer> {
        (**self).predict_eps(x_t, t)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Box<D> {
    fn predict_eps(&self, x_t: &ImageBuffer, t: usize) -> Result<ImageBuffer> {
        (**self).predict_eps(x_t, t)
    }
}

fn eps_at(
    d: &impl Denoiser,
    s: &VarianceSchedule,
    x_t: &ImageBuffer,
    t: usize,
) -> Result<ImageBuffer> {
    let eps = d.predict_eps(x_t, s.train_step(t))?;
    if eps.shape() != x_t.shape() {
        return Err(FgdError::Denoiser(format!(
            "denoiser returned {} for input {}",
            eps.shape(),
            x_t.shape()
        )));
    }
    Ok(eps)
}

/// What a guidance hook returns for one step.
#[derive(Debug, Clone)]
pub struct HookOutput {
    pub value: ImageBuffer,
    /// Mean absolute guidance error before adjustment (NaN when not measured).
    pub d_score: f64,
    pub lambda: f64,
}

/// Per-step adjustment of the sampler's mean (or clean estimate).
///
/// `signal_strength` is the factor the adaptive weight scales with: `√ᾱ_t`
/// when the hook sees a DDPM posterior mean, `1` when it sees a clean-image
/// estimate.
pub trait GuidanceHook {
    fn apply(&mut self, value: &ImageBuffer, t: usize, signal_strength: f64) -> Result<HookOutput>;

    /// Inclusive `(t_start, t_stop)` window, if the hook has one.
    fn window(&self) -> Option<(usize, usize)> {
        None
    }

    /// Guidance error of an arbitrary image, if the hook can measure one.
    fn measure(&self, _x: &ImageBuffer) -> Result<Option<f64>> {
        Ok(None)
    }
}

/// Returns its input unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityHook;

impl GuidanceHook for IdentityHook {
    fn apply(
        &mut self,
        value: &ImageBuffer,
        _t: usize,
        _signal_strength: f64,
    ) -> Result<HookOutput> {
        Ok(HookOutput {
            value: value.clone(),
            d_score: f64::NAN,
            lambda: 0.0,
        })
    }
}

fn run_hook(
    hook: &mut Option<&mut dyn GuidanceHook>,
    value: ImageBuffer,
    t: usize,
    signal_strength: f64,
) -> Result<HookOutput> {
    match hook {
        Some(h) => {
            let out = h.apply(&value, t, signal_strength)?;
            out.value.ensure_shape(value.shape())?;
            Ok(out)
        }
        None => Ok(HookOutput {
            value,
            d_score: f64::NAN,
            lambda: 0.0,
        }),
    }
}

/// Images captured at one reverse step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepImages {
    pub x_t: ImageBuffer,
    /// The value handed to the guidance hook: the posterior mean for DDPM,
    /// the clean-image estimate for DDIM and PLMS.
    pub mean: ImageBuffer,
    /// Clean-image estimate from the raw noise prediction.
    pub x0_hat: ImageBuffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub d_score: f64,
    pub lambda: f64,
    pub images: Option<StepImages>,
}

impl StepRecord {
    fn new(t: usize, out: &HookOutput, images: Option<StepImages>) -> Self {
        Self {
            t,
            d_score: out.d_score,
            lambda: out.lambda,
            images,
        }
    }
}

/// `√ᾱ_t·x₀ + √(1 − ᾱ_t)·z`.
pub fn forward_diffuse(
    s: &VarianceSchedule,
    x0: &ImageBuffer,
    t: usize,
    z: &ImageBuffer,
) -> Result<ImageBuffer> {
    let (sa, sn) = s.signal_noise_strength(t)?;
    x0.lincomb(sa, z, sn)
}

/// Clean-signal estimate `(x_t − √(1 − ᾱ_t)·ε) / √ᾱ_t`.
pub fn predict_x0(
    s: &VarianceSchedule,
    x_t: &ImageBuffer,
    eps: &ImageBuffer,
    t: usize,
) -> Result<ImageBuffer> {
    let (sa, sn) = s.signal_noise_strength(t)?;
    x_t.lincomb(1.0 / sa, eps, -sn / sa)
}

/// Reverse-step mean `(x_t − β_t/√(1 − ᾱ_t)·ε) / √α_t`.
pub fn posterior_mean(
    s: &VarianceSchedule,
    x_t: &ImageBuffer,
    eps: &ImageBuffer,
    t: usize,
) -> Result<ImageBuffer> {
    if t == 0 {
        return Err(FgdError::TimestepOutOfRange { t, max: s.steps() });
    }
    s.check_t(t)?;
    let inv_sqrt_alpha = 1.0 / s.alpha(t).sqrt();
    let coef = s.beta(t) / (1.0 - s.alpha_cum(t)).sqrt();
    x_t.lincomb(inv_sqrt_alpha, eps, -coef * inv_sqrt_alpha)
}

/// One ancestral step `t → t − 1` with reverse variance β̃_t.
///
/// The hook sees the posterior mean with signal strength `√ᾱ_t`; noise is
/// added afterwards from the `(seed, t)` stream, and not at all when `t = 1`.
pub fn ddpm_step(
    d: &impl Denoiser,
    s: &VarianceSchedule,
    x_t: &ImageBuffer,
    t: usize,
    seed: u64,
    mut hook: Option<&mut dyn GuidanceHook>,
    keep_images: bool,
) -> Result<(ImageBuffer, StepRecord)> {
    if t == 0 {
        return Err(FgdError::TimestepOutOfRange { t, max: s.steps() });
    }
    s.check_t(t)?;
    let eps = eps_at(d, s, x_t, t)?;
    let mu = posterior_mean(s, x_t, &eps, t)?;
    let images = keep_images.then(|| -> Result<StepImages> {
        Ok(StepImages {
            x_t: x_t.clone(),
            mean: mu.clone(),
            x0_hat: predict_x0(s, x_t, &eps, t)?,
        })
    });
    let images = images.transpose()?;
    let out = run_hook(&mut hook, mu, t, s.alpha_cum(t).sqrt())?;
    let next = if t == 1 {
        out.value.clone()
    } else {
        let sigma = s.posterior_variance(t).sqrt();
        let z = NoiseKey::new(seed, t, NoisePurpose::Step).normal_image(x_t.shape());
        out.value.lincomb(1.0, &z, sigma)?
    };
    Ok((next, StepRecord::new(t, &out, images)))
}

/// `σ = η·√((1 − ᾱ_prev)/(1 − ᾱ_t)·(1 − ᾱ_t/ᾱ_prev))`.
pub fn ddim_sigma(s: &VarianceSchedule, t: usize, t_prev: usize, eta: f64) -> f64 {
    let a_t = s.alpha_cum(t);
    let a_prev = s.alpha_cum(t_prev);
    eta * ((1.0 - a_prev) / (1.0 - a_t) * (1.0 - a_t / a_prev)).sqrt()
}

/// `√ᾱ_prev·x̂₀ + √(1 − ᾱ_prev − σ²)·ε + σ·z`.
fn ddim_transport(
    s: &VarianceSchedule,
    x0: &ImageBuffer,
    eps: &ImageBuffer,
    t_prev: usize,
    sigma: f64,
    noise: Option<&ImageBuffer>,
) -> Result<ImageBuffer> {
    let a_prev = s.alpha_cum(t_prev);
    let dir = (1.0 - a_prev - sigma * sigma).max(0.0).sqrt();
    let mut out = x0.lincomb(a_prev.sqrt(), eps, dir)?;
    if let Some(z) = noise {
        out = out.lincomb(1.0, z, sigma)?;
    }
    Ok(out)
}

fn check_descending(s: &VarianceSchedule, t: usize, t_prev: usize) -> Result<()> {
    s.check_t(t)?;
    if t == 0 || t_prev >= t {
        return Err(FgdError::InvalidParameter(format!(
            "reverse step needs t_prev < t, got t = {t}, t_prev = {t_prev}"
        )));
    }
    Ok(())
}

/// One DDIM step `t → t_prev`.
///
/// The hook sees the clean-image estimate with signal strength `1`; the
/// transport reuses the raw noise prediction.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step(
    d: &impl Denoiser,
    s: &VarianceSchedule,
    x_t: &ImageBuffer,
    t: usize,
    t_prev: usize,
    eta: f64,
    seed: u64,
    mut hook: Option<&mut dyn GuidanceHook>,
    keep_images: bool,
) -> Result<(ImageBuffer, StepRecord)> {
    check_descending(s, t, t_prev)?;
    let eps = eps_at(d, s, x_t, t)?;
    let x0 = predict_x0(s, x_t, &eps, t)?;
    let images = keep_images.then(|| StepImages {
        x_t: x_t.clone(),
        mean: x0.clone(),
        x0_hat: x0.clone(),
    });
    let out = run_hook(&mut hook, x0, t, 1.0)?;
    let sigma = ddim_sigma(s, t, t_prev, eta);
    let z =
        (sigma > 0.0).then(|| NoiseKey::new(seed, t, NoisePurpose::Step).normal_image(x_t.shape()));
    let next = ddim_transport(s, &out.value, &eps, t_prev, sigma, z.as_ref())?;
    Ok((next, StepRecord::new(t, &out, images)))
}

/// Runs the deterministic DDIM update upward for `steps` steps of `s`,
/// producing a latent whose η = 0 resampling approximately returns `x0`.
///
/// The step `t → t + 1` evaluates the denoiser on `x_t` at timestep `t + 1`.
pub fn ddim_invert(
    d: &impl Denoiser,
    s: &VarianceSchedule,
    x0: &ImageBuffer,
    steps: usize,
) -> Result<ImageBuffer> {
    s.check_t(steps)?;
    let mut x = x0.clone();
    for t in 0..steps {
        let t_next = t + 1;
        let eps = eps_at(d, s, &x, t_next)?;
        let clean = predict_x0(s, &x, &eps, t)?;
        x = ddim_transport(s, &clean, &eps, t_next, 0.0, None)?;
    }
    Ok(x)
}

/// Raw noise predictions of previous PLMS steps, most recent last.
#[derive(Debug, Clone, Default)]
pub struct PlmsHistory {
    eps: Vec<ImageBuffer>,
}

impl PlmsHistory {
    pub fn len(&self) -> usize {
        self.eps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eps.is_empty()
    }

    fn push(&mut self, e: ImageBuffer) {
        if self.eps.len() == 3 {
            self.eps.remove(0);
        }
        self.eps.push(e);
    }
}

/// `(55·e₀ − 59·e₋₁ + 37·e₋₂ − 9·e₋₃) / 24`.
pub fn multistep_eps(current: &ImageBuffer, history: &[ImageBuffer]) -> Result<ImageBuffer> {
    let [h3, h2, h1] = history else {
        return Err(FgdError::InvalidParameter(format!(
            "multistep combination needs 3 previous predictions, got {}",
            history.len()
        )));
    };
    let mut out = current.scale(55.0 / 24.0);
    for (h, k) in [(h1, -59.0), (h2, 37.0), (h3, -9.0)] {
        out = out.lincomb(1.0, h, k / 24.0)?;
    }
    Ok(out)
}

/// Warm-up predictor: plain η = 0 DDIM transport with the current estimate.
pub(crate) fn plms_predictor(
    s: &VarianceSchedule,
    x_t: &ImageBuffer,
    eps: &ImageBuffer,
    t: usize,
    t_prev: usize,
) -> Result<ImageBuffer> {
    let x0 = predict_x0(s, x_t, eps, t)?;
    ddim_transport(s, &x0, eps, t_prev, 0.0, None)
}

/// One pseudo linear multistep step `t → t_prev`.
///
/// Until three earlier predictions exist, the noise estimate is the average
/// of the current prediction and one taken at the DDIM-predicted `x_{t_prev}`
/// (skipped when `t_prev = 0`). After that the fourth-order multistep
/// combination is used. The history stores raw denoiser outputs only.
#[allow(clippy::too_many_arguments)]
pub fn plms_step(
    d: &impl Denoiser,
    s: &VarianceSchedule,
    x_t: &ImageBuffer,
    t: usize,
    t_prev: usize,
    history: &mut PlmsHistory,
    mut hook: Option<&mut dyn GuidanceHook>,
    keep_images: bool,
) -> Result<(ImageBuffer, StepRecord)> {
    check_descending(s, t, t_prev)?;
    let e_t = eps_at(d, s, x_t, t)?;
    let combined = if history.len() >= 3 {
        multistep_eps(&e_t, &history.eps)?
    } else if t_prev > 0 {
        let x_pred = plms_predictor(s, x_t, &e_t, t, t_prev)?;
        let e_next = eps_at(d, s, &x_pred, t_prev)?;
        e_t.lincomb(0.5, &e_next, 0.5)?
    } else {
        e_t.clone()
    };
    let x0 = predict_x0(s, x_t, &combined, t)?;
    let images = keep_images
        .then(|| -> Result<StepImages> {
            Ok(StepImages {
                x_t: x_t.clone(),
                mean: x0.clone(),
                x0_hat: predict_x0(s, x_t, &e_t, t)?,
            })
        })
        .transpose()?;
    history.push(e_t);
    let out = run_hook(&mut hook, x0, t, 1.0)?;
    let next = ddim_transport(s, &out.value, &combined, t_prev, 0.0, None)?;
    Ok((next, StepRecord::new(t, &out, images)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SamplerKind {
    Ddpm,
    Ddim,
    Plms,
}

impl std::str::FromStr for SamplerKind {
    type Err = FgdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(Self::Ddpm),
            "ddim" => Ok(Self::Ddim),
            "plms" => Ok(Self::Plms),
            other => Err(FgdError::InvalidConfig(format!(
                "unknown sampler {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Ddpm => "ddpm",
            Self::Ddim => "ddim",
            Self::Plms => "plms",
        })
    }
}

/// How the reverse chain is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitMode {
    /// `x_T ~ N(0, I)`.
    Noise,
    /// Forward-diffuse the guide to step `round(strength·T)` and start there.
    Sdedit { strength: f64 },
    /// Deterministically invert the guide to `x_T`.
    DdimInverted,
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// Inference schedule (typically respaced).
    pub schedule: VarianceSchedule,
    /// DDIM stochasticity; ignored by the other samplers.
    pub eta: f64,
    pub seed: u64,
    pub init: InitMode,
    pub shape: Shape,
    /// Keep per-step images in the trajectory.
    pub keep_images: bool,
}

impl SamplerConfig {
    pub fn new(kind: SamplerKind, schedule: VarianceSchedule, shape: Shape, seed: u64) -> Self {
        Self {
            kind,
            schedule,
            eta: 0.0,
            seed,
            init: InitMode::Noise,
            shape,
            keep_images: false,
        }
    }

    pub fn validate(&self, guide: Option<&ImageBuffer>) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(FgdError::InvalidConfig(format!(
                "eta must be in [0, 1], got {}",
                self.eta
            )));
        }
        if let InitMode::Sdedit { strength } = self.init {
            if !(strength > 0.0 && strength <= 1.0) {
                return Err(FgdError::InvalidConfig(format!(
                    "sdedit strength must be in (0, 1], got {strength}"
                )));
            }
        }
        match (self.init, guide) {
            (InitMode::Noise, _) => {}
            (_, None) => {
                return Err(FgdError::InvalidConfig(
                    "sdedit and inverted starts need a guide image".into(),
                ))
            }
            (_, Some(_)) => {}
        }
        if let Some(g) = guide {
            g.ensure_shape(self.shape)?;
        }
        Ok(())
    }

    /// Step the reverse chain starts from.
    pub fn start_step(&self) -> usize {
        let total = self.schedule.steps();
        match self.init {
            InitMode::Sdedit { strength } => {
                ((strength * total as f64).round() as usize).min(total)
            }
            _ => total,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Step the chain started from.
    pub start_step: usize,
    pub initial: ImageBuffer,
    /// Records in order of decreasing `t`.
    pub records: Vec<StepRecord>,
    pub final_sample: ImageBuffer,
    pub guidance_window: Option<(usize, usize)>,
    /// Guidance error of the final sample, when a hook measured it.
    pub final_d_score: Option<f64>,
}

/// Runs a full reverse chain.
pub fn run_sampler(
    d: &impl Denoiser,
    cfg: &SamplerConfig,
    mut hook: Option<&mut dyn GuidanceHook>,
    guide: Option<&ImageBuffer>,
) -> Result<Trajectory> {
    cfg.validate(guide)?;
    let s = &cfg.schedule;
    let start = cfg.start_step();
    let initial = match (cfg.init, guide) {
        (InitMode::Noise, _) => {
            NoiseKey::new(cfg.seed, start, NoisePurpose::Init).normal_image(cfg.shape)
        }
        (InitMode::Sdedit { .. }, Some(g)) => {
            let z = NoiseKey::new(cfg.seed, start, NoisePurpose::Forward).normal_image(cfg.shape);
            forward_diffuse(s, g, start, &z)?
        }
        (InitMode::DdimInverted, Some(g)) => ddim_invert(d, s, g, start)?,
        (_, None) => unreachable!("validated above"),
    };

    let mut x = initial.clone();
    let mut records = Vec::with_capacity(start);
    let mut history = PlmsHistory::default();
    for t in (1..=start).rev() {
        let h = hook.as_mut().map(|h| &mut **h as &mut dyn GuidanceHook);
        let (next, record) = match cfg.kind {
            SamplerKind::Ddpm => ddpm_step(d, s, &x, t, cfg.seed, h, cfg.keep_images)?,
            SamplerKind::Ddim => {
                ddim_step(d, s, &x, t, t - 1, cfg.eta, cfg.seed, h, cfg.keep_images)?
            }
            SamplerKind::Plms => plms_step(d, s, &x, t, t - 1, &mut history, h, cfg.keep_images)?,
        };
        x = next;
        records.push(record);
    }

    let (guidance_window, final_d_score) = match &hook {
        Some(h) => (h.window(), h.measure(&x)?),
        None => (None, None),
    };
    Ok(Trajectory {
        start_step: start,
        initial,
        records,
        final_sample: x,
        guidance_window,
        final_d_score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoisers::{AnalyticDenoiser, GaussianPrior};

    struct ConstantDenoiser(f64);

    impl Denoiser for ConstantDenoiser {
        fn predict_eps(&self, x_t: &ImageBuffer, _t: usize) -> Result<ImageBuffer> {
            ImageBuffer::filled(x_t.shape(), self.0)
        }
    }

    fn const_beta(b: f64, steps: usize) -> VarianceSchedule {
        VarianceSchedule::linear(steps, b, b).unwrap()
    }

    fn noise(seed: u64, shape: Shape) -> ImageBuffer {
        NoiseKey::new(seed, 0, NoisePurpose::Auxiliary).normal_image(shape)
    }

    #[test]
    fn forward_diffuse_examples() {
        let s = const_beta(0.19, 4);
        let shape = Shape::new(2, 3, 1);
        let x0 = noise(1, shape);
        let z = noise(2, shape);
        assert_eq!(forward_diffuse(&s, &x0, 0, &z).unwrap(), x0);
        let zero = ImageBuffer::zeros(shape).unwrap();
        let scaled = forward_diffuse(&s, &x0, 3, &zero).unwrap();
        assert!(
            scaled
                .max_abs_diff(&x0.scale(s.alpha_cum(3).sqrt()))
                .unwrap()
                < 1e-15
        );
        let ones = ImageBuffer::filled(shape, 1.0).unwrap();
        let v = forward_diffuse(&s, &ones, 2, &ones).unwrap();
        assert!(v
            .data()
            .iter()
            .all(|&p| (p - (0.81 + 0.3439f64.sqrt())).abs() < 1e-12));
        assert!(v.data().iter().all(|&p| (p - 1.396430).abs() < 1e-6));
        assert!(forward_diffuse(&s, &ones, 5, &ones).is_err());
        assert!(forward_diffuse(&s, &ones, 1, &noise(1, Shape::new(2, 3, 2))).is_err());
    }

    #[test]
    fn predict_x0_inverts_forward() {
        let s = VarianceSchedule::default_training().respace(50).unwrap();
        let shape = Shape::new(4, 4, 3);
        let x0 = noise(3, shape);
        let z = noise(4, shape);
        for t in [0, 1, 25, 50] {
            let x_t = forward_diffuse(&s, &x0, t, &z).unwrap();
            let back = predict_x0(&s, &x_t, &z, t).unwrap();
            assert!(back.max_abs_diff(&x0).unwrap() < 1e-9, "t={t}");
        }
        let zero = ImageBuffer::zeros(shape).unwrap();
        let x_t = noise(5, shape);
        let p = predict_x0(&s, &x_t, &zero, 10).unwrap();
        assert!(
            p.max_abs_diff(&x_t.scale(1.0 / s.alpha_cum(10).sqrt()))
                .unwrap()
                < 1e-12
        );
        assert!(predict_x0(&s, &x_t, &zero, 51).is_err());
    }

    #[test]
    fn predict_x0_equals_gaussian_posterior_mean() {
        let train = VarianceSchedule::default_training();
        let shape = Shape::new(3, 3, 2);
        let prior = GaussianPrior::new(noise(6, shape).scale(0.3), 0.7).unwrap();
        let d = AnalyticDenoiser::new(prior.clone(), train.clone());
        use crate::denoisers::Prior;
        for t in [1, 100, 999] {
            let x_t = noise(7 + t as u64, shape);
            let eps = d.predict_eps(&x_t, t).unwrap();
            let got = predict_x0(&train, &x_t, &eps, t).unwrap();
            let want = prior.posterior_mean(&x_t, train.alpha_cum(t)).unwrap();
            assert!(got.max_abs_diff(&want).unwrap() < 1e-9);
        }
    }

    #[test]
    fn posterior_mean_examples() {
        let s = const_beta(0.1, 5);
        let shape = Shape::new(2, 2, 1);
        let x_t = noise(8, shape);
        let zero = ImageBuffer::zeros(shape).unwrap();
        let mu = posterior_mean(&s, &x_t, &zero, 3).unwrap();
        assert!(mu.max_abs_diff(&x_t.scale(1.0 / 0.9f64.sqrt())).unwrap() < 1e-15);
        assert!(posterior_mean(&s, &x_t, &zero, 0).is_err());

        // at t = 1 the mean coincides with the clean estimate
        let one = const_beta(0.3, 1);
        let eps = noise(9, shape);
        let a = posterior_mean(&one, &x_t, &eps, 1).unwrap();
        let b = predict_x0(&one, &x_t, &eps, 1).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);

        // duplicate-formula oracle from the raw symbols
        for t in 1..=5 {
            let (beta, alpha) = (0.1, 0.9f64);
            let abar = alpha.powi(t as i32);
            let got = posterior_mean(&s, &x_t, &eps, t).unwrap();
            for i in 0..4 {
                let want =
                    (x_t.data()[i] - beta / (1.0 - abar).sqrt() * eps.data()[i]) / alpha.sqrt();
                assert!((got.data()[i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ddpm_identity_hook_and_last_step() {
        let train = VarianceSchedule::default_training();
        let s = train.respace(20).unwrap();
        let shape = Shape::new(4, 4, 1);
        let d = AnalyticDenoiser::new(
            GaussianPrior::new(ImageBuffer::zeros(shape).unwrap(), 1.0).unwrap(),
            train,
        );
        let x = noise(10, shape);
        let (a, _) = ddpm_step(&d, &s, &x, 7, 42, None, false).unwrap();
        let mut id = IdentityHook;
        let (b, rec) = ddpm_step(&d, &s, &x, 7, 42, Some(&mut id), true).unwrap();
        assert_eq!(a, b);
        assert_eq!(rec.lambda, 0.0);
        assert_eq!(rec.images.unwrap().x_t, x);

        let eps = d.predict_eps(&x, s.train_step(1)).unwrap();
        let mu = posterior_mean(&s, &x, &eps, 1).unwrap();
        let (last, _) = ddpm_step(&d, &s, &x, 1, 42, None, false).unwrap();
        assert_eq!(last, mu);
    }

    #[test]
    fn ddim_sigma_matches_posterior_variance_at_eta_one() {
        let s = VarianceSchedule::default_training().respace(50).unwrap();
        for t in 2..=50 {
            let sig = ddim_sigma(&s, t, t - 1, 1.0);
            assert!((sig * sig - s.posterior_variance(t)).abs() < 1e-15 * 10.0);
        }
        assert_eq!(ddim_sigma(&s, 10, 9, 0.0), 0.0);
    }

    #[test]
    fn ddim_point_mass_stays_on_trajectory() {
        let train = VarianceSchedule::default_training();
        let s = train.respace(50).unwrap();
        let shape = Shape::new(3, 3, 2);
        let template = noise(11, shape).scale(0.4);
        let d = AnalyticDenoiser::new(GaussianPrior::point_mass(template.clone()), train);
        let z = noise(12, shape);
        // x_t on the closed-form path √ᾱ·μ + √(1−ᾱ)·z moves to the same path at t_prev
        let x_t = forward_diffuse(&s, &template, 30, &z).unwrap();
        let (next, _) = ddim_step(&d, &s, &x_t, 30, 20, 0.0, 0, None, false).unwrap();
        let want = forward_diffuse(&s, &template, 20, &z).unwrap();
        assert!(next.max_abs_diff(&want).unwrap() < 1e-6);
        let (clean, _) = ddim_step(&d, &s, &x_t, 30, 0, 0.0, 0, None, false).unwrap();
        let eps = d.predict_eps(&x_t, s.train_step(30)).unwrap();
        assert_eq!(clean, predict_x0(&s, &x_t, &eps, 30).unwrap());
        assert!(ddim_step(&d, &s, &x_t, 30, 30, 0.0, 0, None, false).is_err());
    }

    #[test]
    fn plms_constant_denoiser() {
        let hist = vec![ImageBuffer::filled(Shape::new(1, 2, 1), 0.7).unwrap(); 3];
        let cur = ImageBuffer::filled(Shape::new(1, 2, 1), 0.7).unwrap();
        let e = multistep_eps(&cur, &hist).unwrap();
        assert!(e.max_abs_diff(&cur).unwrap() < 1e-15);
        assert!(multistep_eps(&cur, &hist[..2]).is_err());

        let s = VarianceSchedule::default_training().respace(10).unwrap();
        let d = ConstantDenoiser(0.3);
        let x = noise(13, Shape::new(2, 2, 1));
        let mut history = PlmsHistory::default();
        let mut xp = x.clone();
        for t in (1..=10).rev() {
            let (a, _) = plms_step(&d, &s, &xp, t, t - 1, &mut history, None, false).unwrap();
            let (b, _) = ddim_step(&d, &s, &xp, t, t - 1, 0.0, 0, None, false).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() < 1e-12, "t={t}");
            xp = a;
        }
        assert_eq!(history.len(), 3);
    }

    #[test]
    fn plms_first_substage_is_ddim() {
        let train = VarianceSchedule::default_training();
        let s = train.respace(50).unwrap();
        let shape = Shape::new(3, 3, 1);
        let d = AnalyticDenoiser::new(
            GaussianPrior::new(noise(14, shape).scale(0.2), 0.5).unwrap(),
            train,
        );
        let x = noise(15, shape);
        let eps = d.predict_eps(&x, s.train_step(50)).unwrap();
        let pred = plms_predictor(&s, &x, &eps, 50, 49).unwrap();
        let (ddim, _) = ddim_step(&d, &s, &x, 50, 49, 0.0, 0, None, false).unwrap();
        assert_eq!(pred, ddim);
    }

    #[test]
    fn inversion_with_zero_steps_is_identity() {
        let train = VarianceSchedule::default_training();
        let s = train.respace(10).unwrap();
        let shape = Shape::new(2, 2, 1);
        let d = AnalyticDenoiser::new(
            GaussianPrior::new(ImageBuffer::zeros(shape).unwrap(), 1.0).unwrap(),
            train,
        );
        let x = noise(16, shape);
        assert_eq!(ddim_invert(&d, &s, &x, 0).unwrap(), x);
    }

    #[test]
    fn config_validation() {
        let s = VarianceSchedule::default_training().respace(10).unwrap();
        let shape = Shape::new(2, 2, 1);
        let mut cfg = SamplerConfig::new(SamplerKind::Ddpm, s, shape, 0);
        assert!(cfg.validate(None).is_ok());
        cfg.init = InitMode::Sdedit { strength: 0.5 };
        assert!(cfg.validate(None).is_err());
        let g = ImageBuffer::zeros(shape).unwrap();
        assert!(cfg.validate(Some(&g)).is_ok());
        assert_eq!(cfg.start_step(), 5);
        cfg.init = InitMode::Sdedit { strength: 1.5 };
        assert!(cfg.validate(Some(&g)).is_err());
        cfg.init = InitMode::DdimInverted;
        assert!(cfg
            .validate(Some(&ImageBuffer::zeros(Shape::new(3, 2, 1)).unwrap()))
            .is_err());
        cfg.init = InitMode::Noise;
        cfg.eta = 2.0;
        assert!(cfg.validate(None).is_err());
    }

    #[test]
    fn sdedit_full_strength_has_negligible_signal() {
        let s = VarianceSchedule::default_training().respace(50).unwrap();
        let (signal, _) = s.signal_noise_strength(50).unwrap();
        assert!(signal < 1e-2);
    }

    #[test]
    fn steppers_do_not_modify_inputs() {
        let train = VarianceSchedule::default_training();
        let s = train.respace(10).unwrap();
        let shape = Shape::new(3, 3, 2);
        let d = AnalyticDenoiser::new(
            GaussianPrior::new(ImageBuffer::zeros(shape).unwrap(), 1.0).unwrap(),
            train,
        );
        let x = noise(17, shape);
        let copy = x.clone();
        ddpm_step(&d, &s, &x, 5, 1, None, true).unwrap();
        ddim_step(&d, &s, &x, 5, 4, 0.5, 1, None, true).unwrap();
        plms_step(&d, &s, &x, 5, 4, &mut PlmsHistory::default(), None, true).unwrap();
        ddim_invert(&d, &s, &x, 3).unwrap();
        assert_eq!(x, copy);
    }
}

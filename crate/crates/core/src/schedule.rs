//! Variance schedules shared by the forward process and every sampler.
//!
//! Timesteps run `1..=T`; index `0` is the clean-data boundary where the
//! cumulative signal fraction is exactly one.

use std::fmt::Write as _;

use crate::error::{FgdError, Result};

/// The β / α / ᾱ sequences of a discrete diffusion process.
///
/// A schedule may be a respaced view of a longer training schedule, in which
/// case [`VarianceSchedule::train_step`] maps each local index back to the
/// training timestep a black-box denoiser expects.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceSchedule {
    betas: Vec<f64>,
    alpha_cum: Vec<f64>,
    train_steps: Vec<usize>,
}

impl VarianceSchedule {
    /// Builds a schedule from per-step betas; ᾱ is the running product.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(FgdError::InvalidSchedule(
                "schedule needs at least one step".into(),
            ));
        }
        if let Some((i, b)) = betas
            .iter()
            .enumerate()
            .find(|(_, &b)| !(b > 0.0 && b < 1.0))
        {
            return Err(FgdError::InvalidSchedule(format!(
                "beta[{}] = {b} outside (0, 1)",
                i + 1
            )));
        }
        let mut alpha_cum = Vec::with_capacity(betas.len() + 1);
        alpha_cum.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_cum.push(acc);
        }
        let train_steps = (1..=betas.len()).collect();
        let schedule = Self {
            betas,
            alpha_cum,
            train_steps,
        };
        schedule.check_monotone()?;
        Ok(schedule)
    }

    /// Linearly spaced betas from `beta_start` at `t = 1` to `beta_end` at `t = T`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(FgdError::InvalidSchedule("T must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(FgdError::InvalidSchedule(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            let span = (beta_end - beta_start) / (steps - 1) as f64;
            (0..steps).map(|i| beta_start + span * i as f64).collect()
        };
        Self::from_betas(betas)
    }

    /// Linear 1e-4 → 0.02 over 1000 training steps.
    pub fn default_training() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }

    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// ᾱ_t, with ᾱ_0 = 1.
    pub fn alpha_cum(&self, t: usize) -> f64 {
        self.alpha_cum[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// ᾱ_0 ..= ᾱ_T.
    pub fn alpha_cums(&self) -> &[f64] {
        &self.alpha_cum
    }

    /// Training timestep corresponding to local step `t` (`0` maps to `0`).
    pub fn train_step(&self, t: usize) -> usize {
        if t == 0 {
            0
        } else {
            self.train_steps[t - 1]
        }
    }

    /// Training timesteps retained by this schedule, ascending.
    pub fn train_steps(&self) -> &[usize] {
        &self.train_steps
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(FgdError::TimestepOutOfRange {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    /// `(√ᾱ_t, √(1 − ᾱ_t))`: signal and noise strength at step `t`.
    pub fn signal_noise_strength(&self, t: usize) -> Result<(f64, f64)> {
        self.check_t(t)?;
        let a = self.alpha_cum[t];
        Ok((a.sqrt(), (1.0 - a).sqrt()))
    }

    /// Posterior variance β̃_t = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_cum[t - 1]) / (1.0 - self.alpha_cum[t]) * self.betas[t - 1]
    }

    /// Keeps `count` evenly spaced steps (always including `T`) and derives
    /// effective betas so ᾱ is preserved exactly at the retained steps.
    pub fn respace(&self, count: usize) -> Result<Self> {
        let total = self.steps();
        if count == 0 || count > total {
            return Err(FgdError::InvalidSchedule(format!(
                "cannot respace {total} steps to {count}"
            )));
        }
        self.select(&respaced_indices(total, count))
    }

    /// Keeps the given local steps (strictly increasing, within `1..=T`).
    pub fn select(&self, keep: &[usize]) -> Result<Self> {
        if keep.is_empty() {
            return Err(FgdError::InvalidSchedule("empty step selection".into()));
        }
        if keep.windows(2).any(|w| w[0] >= w[1])
            || keep[0] == 0
            || keep[keep.len() - 1] > self.steps()
        {
            return Err(FgdError::InvalidSchedule(format!(
                "step selection must be strictly increasing within 1..={}",
                self.steps()
            )));
        }
        let mut betas = Vec::with_capacity(keep.len());
        let mut alpha_cum = Vec::with_capacity(keep.len() + 1);
        alpha_cum.push(1.0);
        let mut prev = 1.0;
        for &t in keep {
            let a = self.alpha_cum[t];
            betas.push(1.0 - a / prev);
            alpha_cum.push(a);
            prev = a;
        }
        let train_steps = keep.iter().map(|&t| self.train_steps[t - 1]).collect();
        let schedule = Self {
            betas,
            alpha_cum,
            train_steps,
        };
        schedule.check_monotone()?;
        Ok(schedule)
    }

    fn check_monotone(&self) -> Result<()> {
        let ok = self.alpha_cum.windows(2).all(|w| w[1] < w[0])
            && self.alpha_cum.iter().all(|&a| a > 0.0 && a <= 1.0);
        if ok {
            Ok(())
        } else {
            Err(FgdError::InvalidSchedule(
                "cumulative alpha must decrease strictly and stay in (0, 1]".into(),
            ))
        }
    }
}

/// Evenly spaced indices `round_half_up(k·T/K)` for `k = 1..=K`.
fn respaced_indices(total: usize, count: usize) -> Vec<usize> {
    (1..=count)
        .map(|k| (2 * k * total + count) / (2 * count))
        .collect()
}

/// Serializable description of a linear training schedule plus the retained
/// inference steps.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSpec {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Retained training steps; empty keeps all of them.
    pub steps: Vec<usize>,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02)
            .respaced(50)
            .expect("50 of 1000 steps")
    }
}

impl ScheduleSpec {
    pub fn linear(train_steps: usize, beta_start: f64, beta_end: f64) -> Self {
        Self {
            train_steps,
            beta_start,
            beta_end,
            steps: Vec::new(),
        }
    }

    pub fn respaced(mut self, count: usize) -> Result<Self> {
        if count == 0 || count > self.train_steps {
            return Err(FgdError::InvalidSchedule(format!(
                "cannot respace {} steps to {count}",
                self.train_steps
            )));
        }
        self.steps = respaced_indices(self.train_steps, count);
        Ok(self)
    }

    /// The full training schedule.
    pub fn training(&self) -> Result<VarianceSchedule> {
        VarianceSchedule::linear(self.train_steps, self.beta_start, self.beta_end)
    }

    /// The (possibly respaced) inference schedule.
    pub fn build(&self) -> Result<VarianceSchedule> {
        let base = self.training()?;
        if self.steps.is_empty() {
            Ok(base)
        } else {
            base.select(&self.steps)
        }
    }

    /// Plain-text `key=value` block.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "T={}", self.train_steps);
        let _ = writeln!(out, "beta_start={}", self.beta_start);
        let _ = writeln!(out, "beta_end={}", self.beta_end);
        let steps: Vec<String> = self.steps.iter().map(|s| s.to_string()).collect();
        let _ = writeln!(out, "steps={}", steps.join(","));
        out
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut train_steps = None;
        let mut beta_start = None;
        let mut beta_end = None;
        let mut steps = Vec::new();
        for line in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            let (key, value) = line.split_once('=').ok_or_else(|| {
                FgdError::InvalidConfig(format!("expected key=value, got {line:?}"))
            })?;
            let value = value.trim();
            let bad = |what: &str| FgdError::InvalidConfig(format!("bad {what}: {value:?}"));
            match key.trim() {
                "T" => train_steps = Some(value.parse::<usize>().map_err(|_| bad("T"))?),
                "beta_start" => {
                    beta_start = Some(value.parse::<f64>().map_err(|_| bad("beta_start"))?)
                }
                "beta_end" => beta_end = Some(value.parse::<f64>().map_err(|_| bad("beta_end"))?),
                "steps" => {
                    steps = value
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(|s| s.trim().parse::<usize>().map_err(|_| bad("steps")))
                        .collect::<Result<_>>()?
                }
                other => {
                    return Err(FgdError::InvalidConfig(format!(
                        "unknown schedule key {other:?}"
                    )))
                }
            }
        }
        let missing = |k: &str| FgdError::InvalidConfig(format!("schedule block missing {k}"));
        Ok(Self {
            train_steps: train_steps.ok_or_else(|| missing("T"))?,
            beta_start: beta_start.ok_or_else(|| missing("beta_start"))?,
            beta_end: beta_end.ok_or_else(|| missing("beta_end"))?,
            steps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn product_oracle(t: usize, total: usize, b0: f64, b1: f64) -> f64 {
        let mut acc = 1.0;
        for i in 1..=t {
            let beta = b0 + (b1 - b0) * (i - 1) as f64 / (total - 1) as f64;
            acc *= 1.0 - beta;
        }
        acc
    }

    #[test]
    fn single_step() {
        let s = VarianceSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.betas(), &[0.5]);
        assert_eq!(s.alpha_cum(1), 0.5);
    }

    #[test]
    fn constant_beta_closed_form() {
        let b = 0.1;
        let s = VarianceSchedule::linear(3, b, b).unwrap();
        assert!((s.alpha_cum(3) - (1.0 - b).powi(3)).abs() < 1e-15);
    }

    #[test]
    fn default_terminal_alpha_cum_matches_product() {
        let s = VarianceSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let oracle = product_oracle(1000, 1000, 1e-4, 0.02);
        assert!(oracle < 5e-5);
        assert!((s.alpha_cum(1000) - oracle).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(VarianceSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(VarianceSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(VarianceSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(VarianceSchedule::linear(10, 1e-4, 1.0).is_err());
        assert!(VarianceSchedule::from_betas(vec![0.1, 1.2]).is_err());
    }

    #[test]
    fn signal_noise_examples() {
        let s = VarianceSchedule::linear(4, 0.19, 0.19).unwrap();
        assert_eq!(s.signal_noise_strength(0).unwrap(), (1.0, 0.0));
        let (a, b) = s.signal_noise_strength(2).unwrap();
        assert!((a - 0.81).abs() < 1e-12);
        assert!((b - 0.3439f64.sqrt()).abs() < 1e-12);
        assert!((b - 0.586_430).abs() < 1e-6);
        assert!(matches!(
            s.signal_noise_strength(5),
            Err(FgdError::TimestepOutOfRange { t: 5, max: 4 })
        ));

        let long = VarianceSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let (a, _) = long.signal_noise_strength(500).unwrap();
        assert!((a - product_oracle(500, 1000, 1e-4, 0.02).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn respace_identity_and_single() {
        let s = VarianceSchedule::linear(20, 1e-3, 0.2).unwrap();
        let same = s.respace(20).unwrap();
        for t in 0..=20 {
            assert!((same.alpha_cum(t) - s.alpha_cum(t)).abs() < 1e-15);
        }
        for t in 1..=20 {
            assert!((same.beta(t) - s.beta(t)).abs() < 1e-14);
        }
        let one = s.respace(1).unwrap();
        assert_eq!(one.steps(), 1);
        assert!((one.beta(1) - (1.0 - s.alpha_cum(20))).abs() < 1e-15);
        assert_eq!(one.train_step(1), 20);
        assert!(s.respace(0).is_err());
        assert!(s.respace(21).is_err());
    }

    #[test]
    fn respace_50_of_1000() {
        let s = VarianceSchedule::default_training();
        let r = s.respace(50).unwrap();
        assert_eq!(r.steps(), 50);
        assert_eq!(r.train_step(50), 1000);
        assert_eq!(r.train_step(1), 20);
        // re-multiplying the effective alphas reproduces the originals
        let mut acc = 1.0;
        for k in 1..=50 {
            acc *= r.alpha(k);
            let orig = s.alpha_cum(r.train_step(k));
            assert!((acc - orig).abs() < 1e-12);
            assert_eq!(r.alpha_cum(k), orig);
        }
    }

    #[test]
    fn respace_prefers_larger_t_on_ties() {
        // 3 of 10: 3.33 -> 3, 6.67 -> 7, 10; 4 of 10: 2.5 -> 3, 5, 7.5 -> 8, 10
        assert_eq!(respaced_indices(10, 3), vec![3, 7, 10]);
        assert_eq!(respaced_indices(10, 4), vec![3, 5, 8, 10]);
    }

    #[test]
    fn kv_round_trip() {
        let spec = ScheduleSpec::linear(1000, 1e-4, 0.02).respaced(50).unwrap();
        let text = spec.to_kv();
        assert!(text.starts_with("T=1000\n"));
        let back = ScheduleSpec::from_kv(&text).unwrap();
        assert_eq!(back, spec);
        assert_eq!(back.build().unwrap(), spec.build().unwrap());
        assert!(ScheduleSpec::from_kv("T=10\nbeta_end=0.1").is_err());
    }

    proptest! {
        #[test]
        fn signal_noise_identity(steps in 1usize..400, b0 in 1e-5f64..0.05, extra in 0.0f64..0.2, frac in 0.0f64..=1.0) {
            let s = VarianceSchedule::linear(steps, b0, b0 + extra).unwrap();
            let t = ((steps as f64) * frac).round() as usize;
            let (a, b) = s.signal_noise_strength(t).unwrap();
            prop_assert!((a * a + b * b - 1.0).abs() < 1e-12);
            prop_assert!(s.alpha_cums().windows(2).all(|w| w[1] < w[0]));
        }

        #[test]
        fn respace_preserves_alpha_cum(steps in 1usize..400, b0 in 1e-5f64..0.05, extra in 0.0f64..0.2, keep in 1usize..400) {
            let keep = keep.min(steps);
            let s = VarianceSchedule::linear(steps, b0, b0 + extra).unwrap();
            let r = s.respace(keep).unwrap();
            prop_assert_eq!(r.train_step(keep), steps);
            for k in 0..=keep {
                prop_assert_eq!(r.alpha_cum(k), s.alpha_cum(r.train_step(k)));
            }
        }
    }
}

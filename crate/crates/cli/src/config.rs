//! Run configuration: preset defaults, overridden by a TOML file, overridden
//! by command-line flags.

use std::path::{Path, PathBuf};

use fgd::denoisers::TemplateKind;
use fgd::guidance::{preset, Preset, PRESETS};
use fgd::samplers::{InitMode, SamplerKind};
use fgd::schedule::ScheduleSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const DEFAULT_PRESET: &str = "sd-ddim";

/// Fully resolved settings of one sampling run. Written to `manifest.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub sampler: String,
    pub steps: usize,
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub eta: f64,
    pub seed: u64,
    /// `noise`, `sdedit` or `ddim-inverted`.
    pub init: String,
    pub strength: f64,
    pub t_start: usize,
    pub t_stop: usize,
    pub delta: f64,
    pub sigma_spatial: f64,
    pub sigma_value: f64,
    /// `bilateral`, `ilvr-N` or `none`.
    pub filter: String,
    /// `synthetic`, `templates` or `gaussian`.
    pub prior: String,
    pub template_kind: String,
    pub template_count: usize,
    pub template_std: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub templates: Option<PathBuf>,
    pub prior_std: f64,
    pub size: usize,
    pub channels: usize,
    /// Image path, or `synthetic:<kind>`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub guide: Option<String>,
    pub save_steps: bool,
}

/// Any subset of [`RunConfig`], as read from a file or from flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartialRun {
    pub preset: Option<String>,
    pub sampler: Option<String>,
    pub steps: Option<usize>,
    pub train_steps: Option<usize>,
    pub beta_start: Option<f64>,
    pub beta_end: Option<f64>,
    pub eta: Option<f64>,
    pub seed: Option<u64>,
    pub init: Option<String>,
    pub strength: Option<f64>,
    pub t_start: Option<usize>,
    pub t_stop: Option<usize>,
    pub delta: Option<f64>,
    pub sigma_spatial: Option<f64>,
    pub sigma_value: Option<f64>,
    pub filter: Option<String>,
    pub prior: Option<String>,
    pub template_kind: Option<String>,
    pub template_count: Option<usize>,
    pub template_std: Option<f64>,
    pub templates: Option<PathBuf>,
    pub prior_std: Option<f64>,
    pub size: Option<usize>,
    pub channels: Option<usize>,
    pub guide: Option<String>,
    pub save_steps: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartialSweep {
    pub deltas: Option<Vec<f64>>,
    pub seeds: Option<Vec<u64>>,
    pub contact_sheet: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartialAblate {
    pub sigma_spatial: Option<Vec<f64>>,
    pub sigma_value: Option<Vec<f64>>,
    pub ilvr: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartialBench {
    pub reps: Option<usize>,
}

/// Layout of a config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(flatten)]
    pub run: PartialRun,
    pub sweep: PartialSweep,
    pub ablate: PartialAblate,
    pub bench: PartialBench,
}

impl ConfigFile {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let mut file: Self = toml::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        // relative paths in a file are relative to the file
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(t) = &file.run.templates {
            file.run.templates = Some(base.join(t));
        }
        if let Some(g) = &file.run.guide {
            if !g.starts_with("synthetic:") {
                file.run.guide = Some(base.join(g).to_string_lossy().into_owned());
            }
        }
        Ok(file)
    }
}

macro_rules! overlay {
    ($dst:expr, $src:expr, $($field:ident),*) => {
        $( if $src.$field.is_some() { $dst.$field = $src.$field.clone(); } )*
    };
}

impl PartialRun {
    /// Fields set in `other` replace those in `self`.
    pub fn overlay(&mut self, other: &PartialRun) {
        overlay!(
            self,
            other,
            preset,
            sampler,
            steps,
            train_steps,
            beta_start,
            beta_end,
            eta,
            seed,
            init,
            strength,
            t_start,
            t_stop,
            delta,
            sigma_spatial,
            sigma_value,
            filter,
            prior,
            template_kind,
            template_count,
            template_std,
            templates,
            prior_std,
            size,
            channels,
            guide,
            save_steps
        );
    }
}

fn init_name(init: InitMode) -> (&'static str, Option<f64>) {
    match init {
        InitMode::Noise => ("noise", None),
        InitMode::Sdedit { strength } => ("sdedit", Some(strength)),
        InitMode::DdimInverted => ("ddim-inverted", None),
    }
}

fn preset_defaults(p: &Preset) -> RunConfig {
    let (init, strength) = init_name(p.init);
    let schedule = ScheduleSpec::default();
    RunConfig {
        preset: p.name.to_string(),
        sampler: p.sampler.to_string(),
        steps: p.steps,
        train_steps: schedule.train_steps,
        beta_start: schedule.beta_start,
        beta_end: schedule.beta_end,
        eta: 0.0,
        seed: 0,
        init: init.to_string(),
        strength: strength.unwrap_or(0.6),
        t_start: p.t_start,
        t_stop: p.t_stop,
        delta: p.delta,
        sigma_spatial: p.sigma_spatial,
        sigma_value: p.sigma_value,
        filter: "bilateral".into(),
        prior: "synthetic".into(),
        template_kind: TemplateKind::Blobs.to_string(),
        template_count: 4,
        template_std: fgd::denoisers::DEFAULT_TEMPLATE_STD,
        templates: None,
        prior_std: 1.0,
        size: 32,
        channels: 3,
        guide: None,
        save_steps: false,
    }
}

/// Guide filter choice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FilterKind {
    Bilateral,
    Ilvr(usize),
    None,
}

impl std::str::FromStr for FilterKind {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "bilateral" => Ok(Self::Bilateral),
            "none" => Ok(Self::None),
            _ => s
                .strip_prefix("ilvr-")
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&n| n >= 1)
                .map(Self::Ilvr)
                .ok_or_else(|| {
                    CliError::config(format!("unknown filter '{s}' (bilateral, ilvr-N, none)"))
                }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorKind {
    Synthetic,
    Templates,
    Gaussian,
}

impl std::str::FromStr for PriorKind {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "synthetic" => Ok(Self::Synthetic),
            "templates" => Ok(Self::Templates),
            "gaussian" => Ok(Self::Gaussian),
            _ => Err(CliError::config(format!(
                "unknown prior '{s}' (synthetic, templates, gaussian)"
            ))),
        }
    }
}

/// Guide source named by the `guide` field.
#[derive(Debug, Clone, PartialEq)]
pub enum GuideSource {
    File(PathBuf),
    Synthetic(TemplateKind),
}

impl RunConfig {
    /// Applies preset defaults, then `layers` in order, and validates.
    pub fn resolve(layers: &[&PartialRun]) -> CliResult<Self> {
        let mut merged = PartialRun::default();
        for l in layers {
            merged.overlay(l);
        }
        let name = merged
            .preset
            .clone()
            .unwrap_or_else(|| DEFAULT_PRESET.to_string());
        let p = preset(&name).ok_or_else(|| {
            let names: Vec<&str> = PRESETS.iter().map(|p| p.name).collect();
            CliError::config(format!("unknown preset '{name}' ({})", names.join(", ")))
        })?;
        let mut c = preset_defaults(p);
        macro_rules! take {
            ($($field:ident),*) => { $( if let Some(v) = merged.$field.clone() { c.$field = v; } )* };
        }
        take!(
            sampler,
            steps,
            train_steps,
            beta_start,
            beta_end,
            eta,
            seed,
            init,
            strength,
            t_start,
            t_stop,
            delta,
            sigma_spatial,
            sigma_value,
            filter,
            prior,
            template_kind,
            template_count,
            template_std,
            prior_std,
            size,
            channels,
            save_steps
        );
        c.templates = merged.templates.clone();
        if c.templates.is_some() && merged.prior.is_none() {
            c.prior = "templates".into();
        }
        c.guide = merged.guide.clone();
        // a respaced schedule keeps the preset window at the same relative depth
        if c.steps != p.steps {
            let scale = |t: usize| ((t * c.steps) as f64 / p.steps as f64).round() as usize;
            if merged.t_start.is_none() {
                c.t_start = scale(c.t_start).clamp(1, c.steps.max(1));
            }
            if merged.t_stop.is_none() {
                c.t_stop = scale(c.t_stop).clamp(1, c.t_start.max(1));
            }
        }
        c.canonicalize_paths()?;
        c.validate()?;
        Ok(c)
    }

    fn canonicalize_paths(&mut self) -> CliResult<()> {
        if let Some(t) = &self.templates {
            let p = t.canonicalize().map_err(|e| {
                CliError::config(format!("templates directory {}: {e}", t.display()))
            })?;
            self.templates = Some(p);
        }
        if let Some(GuideSource::File(path)) = self.guide_source()? {
            let p = path
                .canonicalize()
                .map_err(|e| CliError::config(format!("guide image {}: {e}", path.display())))?;
            self.guide = Some(p.to_string_lossy().into_owned());
        }
        Ok(())
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |msg: String| Err(CliError::config(msg));
        self.sampler_kind()?;
        self.init_mode()?;
        let filter = self.filter_kind()?;
        let prior = self.prior_kind()?;
        self.template_kind()?;
        if self.steps == 0 || self.steps > self.train_steps {
            return bad(format!(
                "steps must be in 1..={}, got {}",
                self.train_steps, self.steps
            ));
        }
        if self.t_stop > self.t_start || self.t_start > self.steps {
            return bad(format!(
                "need t_stop <= t_start <= steps, got {} / {} / {}",
                self.t_stop, self.t_start, self.steps
            ));
        }
        if !(self.delta > 0.0) {
            return bad(format!("delta must be positive, got {}", self.delta));
        }
        for (name, v) in [
            ("sigma_spatial", self.sigma_spatial),
            ("sigma_value", self.sigma_value),
            ("template_std", self.template_std),
            ("prior_std", self.prior_std),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(1..=4).contains(&self.channels) {
            return bad(format!("channels must be 1 to 4, got {}", self.channels));
        }
        if self.size == 0 {
            return bad("size must be positive".into());
        }
        if self.template_count == 0 {
            return bad("template_count must be positive".into());
        }
        if prior == PriorKind::Templates && self.templates.is_none() {
            return bad("prior 'templates' needs a templates directory".into());
        }
        let needs_guide = filter != FilterKind::None || self.init != "noise";
        if needs_guide && self.guide.is_none() {
            return bad(format!(
                "filter '{}' with init '{}' needs a guide image",
                self.filter, self.init
            ));
        }
        self.schedule_spec()?;
        Ok(())
    }

    pub fn sampler_kind(&self) -> CliResult<SamplerKind> {
        self.sampler
            .parse()
            .map_err(|e: fgd::FgdError| CliError::config(e.to_string()))
    }

    pub fn init_mode(&self) -> CliResult<InitMode> {
        match self.init.as_str() {
            "noise" => Ok(InitMode::Noise),
            "sdedit" => {
                if !(self.strength > 0.0 && self.strength <= 1.0) {
                    return Err(CliError::config(format!(
                        "strength must be in (0, 1], got {}",
                        self.strength
                    )));
                }
                Ok(InitMode::Sdedit {
                    strength: self.strength,
                })
            }
            "ddim-inverted" => Ok(InitMode::DdimInverted),
            other => Err(CliError::config(format!(
                "unknown init '{other}' (noise, sdedit, ddim-inverted)"
            ))),
        }
    }

    pub fn filter_kind(&self) -> CliResult<FilterKind> {
        self.filter.parse()
    }

    pub fn prior_kind(&self) -> CliResult<PriorKind> {
        self.prior.parse()
    }

    pub fn template_kind(&self) -> CliResult<TemplateKind> {
        self.template_kind
            .parse()
            .map_err(|e: fgd::FgdError| CliError::config(e.to_string()))
    }

    pub fn guide_source(&self) -> CliResult<Option<GuideSource>> {
        let Some(g) = &self.guide else {
            return Ok(None);
        };
        match g.strip_prefix("synthetic:") {
            Some(kind) => kind
                .parse()
                .map(|k| Some(GuideSource::Synthetic(k)))
                .map_err(|e: fgd::FgdError| CliError::config(e.to_string())),
            None => Ok(Some(GuideSource::File(PathBuf::from(g)))),
        }
    }

    pub fn schedule_spec(&self) -> CliResult<ScheduleSpec> {
        let spec = ScheduleSpec::linear(self.train_steps, self.beta_start, self.beta_end)
            .respaced(self.steps)?;
        spec.build()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form.
    pub fn id(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        format!("{digest:x}")[..16].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_is_flags_over_file_over_preset() {
        let file = PartialRun {
            preset: Some("sd-ddpm".into()),
            delta: Some(0.3),
            seed: Some(4),
            filter: Some("none".into()),
            ..Default::default()
        };
        let flags = PartialRun {
            seed: Some(9),
            ..Default::default()
        };
        let c = RunConfig::resolve(&[&file, &flags]).unwrap();
        assert_eq!(c.sampler, "ddpm");
        assert_eq!(c.t_stop, 25);
        assert_eq!(c.delta, 0.3);
        assert_eq!(c.seed, 9);
    }

    #[test]
    fn rejects_inconsistent_settings() {
        let none = PartialRun {
            filter: Some("none".into()),
            ..Default::default()
        };
        let mut bad = none.clone();
        bad.t_stop = Some(60);
        assert!(matches!(
            RunConfig::resolve(&[&bad]),
            Err(CliError::Config(_))
        ));
        let needs_guide = PartialRun::default();
        assert!(RunConfig::resolve(&[&needs_guide]).is_err());
        let mut unknown = none.clone();
        unknown.filter = Some("ilvr-0".into());
        assert!(RunConfig::resolve(&[&unknown]).is_err());
        let mut zero = none;
        zero.delta = Some(0.0);
        assert!(RunConfig::resolve(&[&zero]).is_err());
    }

    #[test]
    fn toml_round_trip_and_id() {
        let flags = PartialRun {
            filter: Some("ilvr-8".into()),
            guide: Some("synthetic:stripes".into()),
            delta: Some(f64::INFINITY),
            ..Default::default()
        };
        let c = RunConfig::resolve(&[&flags]).unwrap();
        let text = c.to_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.id(), c.id());
        assert_eq!(c.id().len(), 16);
        let mut other = c.clone();
        other.seed += 1;
        assert_ne!(other.id(), c.id());
        assert_eq!(c.filter_kind().unwrap(), FilterKind::Ilvr(8));
    }

    #[test]
    fn shorter_schedule_pulls_window_in() {
        let flags = PartialRun {
            steps: Some(20),
            filter: Some("none".into()),
            ..Default::default()
        };
        let c = RunConfig::resolve(&[&flags]).unwrap();
        assert_eq!((c.t_start, c.t_stop), (20, 4));
    }
}

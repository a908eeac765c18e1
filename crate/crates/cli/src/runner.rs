//! Executes one resolved [`RunConfig`] and writes its run directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use fgd::analysis::structure_distance;
use fgd::denoisers::{synth_template, AnalyticDenoiser, GaussianPrior, Prior, TemplateMixture};
use fgd::filters::{
    build_bilateral_tensor, BilateralParams, FilterTensor, GuideFilter, LowpassFilter, Upsample,
};
use fgd::guidance::GuidanceState;
use fgd::samplers::{run_sampler, GuidanceHook, SamplerConfig, Trajectory};
use fgd::schedule::VarianceSchedule;
use fgd::{ImageBuffer, Shape};

use crate::config::{FilterKind, GuideSource, PriorKind, RunConfig};
use crate::error::{io_error, CliError, CliResult};
use crate::imageio::{read_image, write_image};

pub const TRACE_HEADER: &str = "# fgd-trace v1";

/// Reference filter for structure distances, so runs with different guide
/// filters are scored on the same scale.
pub const REFERENCE_SIGMA_SPATIAL: f64 = 5.0;
pub const REFERENCE_SIGMA_VALUE: f64 = 0.35;

/// A boxed prior so every prior kind yields the same denoiser type.
pub struct AnyPrior(Box<dyn Prior>);

impl Prior for AnyPrior {
    fn shape(&self) -> Shape {
        self.0.shape()
    }

    fn posterior_mean(&self, x_t: &ImageBuffer, alpha_cum: f64) -> fgd::Result<ImageBuffer> {
        self.0.posterior_mean(x_t, alpha_cum)
    }
}

pub type RunDenoiser = AnalyticDenoiser<AnyPrior>;

/// Everything a run needs, loaded and checked.
pub struct Prepared {
    pub config: RunConfig,
    pub shape: Shape,
    pub denoiser: RunDenoiser,
    pub schedule: VarianceSchedule,
    pub guide: Option<ImageBuffer>,
    pub filter: Option<GuideFilter>,
}

/// Image files in `dir`, sorted by name.
fn image_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries =
        fs::read_dir(dir).map_err(|e| CliError::config(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(str::to_ascii_lowercase)
                    .as_deref(),
                Some("png" | "pgm" | "ppm")
            )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::config(format!(
            "{}: no png/pgm/ppm templates",
            dir.display()
        )));
    }
    Ok(files)
}

pub fn load_templates(dir: &Path) -> CliResult<Vec<ImageBuffer>> {
    let templates = image_files(dir)?
        .iter()
        .map(|p| read_image(p))
        .collect::<CliResult<Vec<_>>>()?;
    let shape = templates[0].shape();
    if let Some(bad) = templates.iter().find(|t| t.shape() != shape) {
        return Err(CliError::config(format!(
            "{}: templates differ in shape ({} vs {})",
            dir.display(),
            shape,
            bad.shape()
        )));
    }
    Ok(templates)
}

fn build_prior(c: &RunConfig) -> CliResult<AnyPrior> {
    let shape = Shape::new(c.size, c.size, c.channels);
    let prior: Box<dyn Prior> = match c.prior_kind()? {
        PriorKind::Gaussian => {
            Box::new(GaussianPrior::new(ImageBuffer::zeros(shape)?, c.prior_std)?)
        }
        PriorKind::Synthetic => {
            let kind = c.template_kind()?;
            let templates = (0..c.template_count)
                .map(|i| synth_template(kind, c.size, c.channels, 0, i))
                .collect();
            Box::new(TemplateMixture::uniform(templates, c.template_std)?)
        }
        PriorKind::Templates => {
            let dir = c.templates.as_deref().expect("validated");
            Box::new(TemplateMixture::uniform(
                load_templates(dir)?,
                c.template_std,
            )?)
        }
    };
    Ok(AnyPrior(prior))
}

pub fn load_guide(c: &RunConfig, shape: Shape) -> CliResult<Option<ImageBuffer>> {
    let guide = match c.guide_source()? {
        None => return Ok(None),
        Some(GuideSource::Synthetic(kind)) => {
            return Ok(Some(
                synth_template(kind, shape.height.max(shape.width), shape.channels, 1, 0)
                    .resize_bilinear(shape.height, shape.width)?,
            ))
        }
        Some(GuideSource::File(path)) => read_image(&path)?,
    };
    if guide.channels() != shape.channels {
        return Err(CliError::config(format!(
            "guide has {} channels, the prior has {}",
            guide.channels(),
            shape.channels
        )));
    }
    if !guide.shape().same_plane(&shape) {
        eprintln!(
            "warning: resampling guide from {}x{} to {}x{}",
            guide.height(),
            guide.width(),
            shape.height,
            shape.width
        );
        return Ok(Some(guide.resize_bilinear(shape.height, shape.width)?));
    }
    Ok(Some(guide))
}

pub fn build_filter(
    kind: FilterKind,
    guide: &ImageBuffer,
    sigma_spatial: f64,
    sigma_value: f64,
) -> CliResult<Option<GuideFilter>> {
    Ok(match kind {
        FilterKind::None => None,
        FilterKind::Bilateral => Some(bilateral(guide, sigma_spatial, sigma_value)?.into()),
        FilterKind::Ilvr(n) => Some(LowpassFilter::new(n, Upsample::Bilinear)?.into()),
    })
}

pub fn bilateral(
    guide: &ImageBuffer,
    sigma_spatial: f64,
    sigma_value: f64,
) -> CliResult<FilterTensor> {
    Ok(build_bilateral_tensor(
        guide,
        &BilateralParams::new(sigma_spatial, sigma_value)?,
    )?)
}

impl Prepared {
    pub fn new(config: RunConfig) -> CliResult<Self> {
        let prior = build_prior(&config)?;
        let shape = prior.shape();
        let spec = config.schedule_spec()?;
        let denoiser = AnalyticDenoiser::new(prior, spec.training()?);
        let schedule = spec.build()?;
        let guide = load_guide(&config, shape)?;
        let filter = match &guide {
            Some(g) => build_filter(
                config.filter_kind()?,
                g,
                config.sigma_spatial,
                config.sigma_value,
            )?,
            None => None,
        };
        Ok(Self {
            config,
            shape,
            denoiser,
            schedule,
            guide,
            filter,
        })
    }

    pub fn sampler_config(&self) -> CliResult<SamplerConfig> {
        let c = &self.config;
        let mut cfg =
            SamplerConfig::new(c.sampler_kind()?, self.schedule.clone(), self.shape, c.seed);
        cfg.eta = c.eta;
        cfg.init = c.init_mode()?;
        cfg.keep_images = self.filter.is_some() || c.save_steps;
        Ok(cfg)
    }

    pub fn guidance(&self) -> CliResult<Option<GuidanceState>> {
        match (&self.filter, &self.guide) {
            (Some(f), Some(g)) => Ok(Some(GuidanceState::new(
                f.clone(),
                g,
                self.config.delta,
                self.config.t_start,
                self.config.t_stop,
            )?)),
            _ => Ok(None),
        }
    }

    /// Samples without writing anything.
    pub fn sample(&self) -> CliResult<(Trajectory, Option<GuidanceState>)> {
        let cfg = self.sampler_config()?;
        let mut state = self.guidance()?;
        let hook = state.as_mut().map(|s| s as &mut dyn GuidanceHook);
        let traj = run_sampler(&self.denoiser, &cfg, hook, self.guide.as_ref())
            .map_err(|e| CliError::runtime(format!("sampling failed: {e}")))?;
        Ok((traj, state))
    }
}

/// What a finished run reports.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub id: String,
    pub final_sample: ImageBuffer,
    pub final_d_score: Option<f64>,
    /// Against the guide under the reference bilateral filter.
    pub structure_distance: Option<f64>,
}

fn fmt_opt(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

fn write_trace(path: &Path, traj: &Trajectory, state: Option<&GuidanceState>) -> CliResult<()> {
    let mut file = fs::File::create(path).map_err(|e| io_error(path, e))?;
    writeln!(file, "{TRACE_HEADER}").map_err(|e| io_error(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["t", "d_score", "lambda", "l1_to_guide_filtered"])
        .map_err(|e| io_error(path, e))?;
    for r in &traj.records {
        let l1 = match (state, &r.images) {
            (Some(s), Some(img)) => s.structure_error(&img.x0_hat)?,
            _ => f64::NAN,
        };
        w.write_record([
            r.t.to_string(),
            fmt_opt(r.d_score),
            r.lambda.to_string(),
            fmt_opt(l1),
        ])
        .map_err(|e| io_error(path, e))?;
    }
    w.flush().map_err(|e| io_error(path, e))
}

fn write_outputs(
    dir: &Path,
    p: &Prepared,
    traj: &Trajectory,
    state: Option<&GuidanceState>,
) -> CliResult<()> {
    write_image(&dir.join("final.png"), &traj.final_sample)?;
    write_trace(&dir.join("trace.csv"), traj, state)?;
    if p.config.save_steps {
        let steps = dir.join("steps");
        fs::create_dir_all(&steps).map_err(|e| io_error(&steps, e))?;
        for r in &traj.records {
            if let Some(img) = &r.images {
                write_image(
                    &steps.join(format!("x0_{:04}.png", r.t)),
                    &img.x0_hat.map(|v| v.clamp(-1.0, 1.0)),
                )?;
            }
        }
    }
    let manifest = dir.join("manifest.toml");
    let text = format!(
        "# fgd run manifest v1, fgd {}\n{}",
        env!("CARGO_PKG_VERSION"),
        p.config.to_toml()
    );
    fs::write(&manifest, text).map_err(|e| io_error(&manifest, e))
}

/// Runs `config` and writes `<root>/<id>/`. Outputs are assembled in a
/// scratch directory and moved into place only when complete.
pub fn execute(config: RunConfig, root: &Path) -> CliResult<RunOutcome> {
    let id = config.id();
    let prepared = Prepared::new(config)?;
    let (traj, state) = prepared.sample()?;

    fs::create_dir_all(root).map_err(|e| io_error(root, e))?;
    let dir = root.join(&id);
    let scratch = root.join(format!(".{id}.partial"));
    let _ = fs::remove_dir_all(&scratch);
    fs::create_dir_all(&scratch).map_err(|e| io_error(&scratch, e))?;
    let written = write_outputs(&scratch, &prepared, &traj, state.as_ref()).and_then(|_| {
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
        }
        fs::rename(&scratch, &dir).map_err(|e| io_error(&dir, e))
    });
    if let Err(e) = written {
        let _ = fs::remove_dir_all(&scratch);
        return Err(e);
    }

    let structure_distance = match &prepared.guide {
        Some(g) => {
            let reference = bilateral(g, REFERENCE_SIGMA_SPATIAL, REFERENCE_SIGMA_VALUE)?;
            Some(structure_distance(&traj.final_sample, g, &reference)?)
        }
        None => None,
    };
    Ok(RunOutcome {
        dir,
        id,
        final_sample: traj.final_sample,
        final_d_score: traj.final_d_score,
        structure_distance,
    })
}

//! Timing of filter construction, filter application and full runs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fgd::filters::{build_bilateral_tensor, BilateralParams, LinearFilter};
use fgd::guidance::GuidanceState;
use fgd::rng::{NoiseKey, NoisePurpose};
use fgd::samplers::{run_sampler, GuidanceHook};

use crate::config::RunConfig;
use crate::error::{io_error, CliError, CliResult};
use crate::runner::Prepared;

pub const BENCH_HEADER: &str = "# fgd-bench v1";
pub const MIN_REPS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Timing {
    pub name: &'static str,
    pub mean_ms: f64,
    pub std_ms: f64,
}

fn summarize(name: &'static str, samples: &[f64]) -> Timing {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = if samples.len() > 1 {
        samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Timing {
        name,
        mean_ms: mean * 1e3,
        std_ms: var.sqrt() * 1e3,
    }
}

fn seconds<T>(f: impl FnOnce() -> CliResult<T>) -> CliResult<f64> {
    let start = Instant::now();
    f()?;
    Ok(start.elapsed().as_secs_f64())
}

/// Times the bilateral filter of `config` and the run with and without it.
/// The guide defaults to a synthetic stripe image.
pub fn bench(mut config: RunConfig, reps: usize) -> CliResult<Vec<Timing>> {
    if reps < MIN_REPS {
        return Err(CliError::config(format!(
            "bench needs at least {MIN_REPS} repetitions, got {reps}"
        )));
    }
    if config.guide.is_none() {
        config.guide = Some("synthetic:stripes".into());
    }
    config.filter = "bilateral".into();
    config.save_steps = false;
    let prepared = Prepared::new(config)?;
    let guide = prepared.guide.clone().expect("guide set above");
    let params = BilateralParams::new(prepared.config.sigma_spatial, prepared.config.sigma_value)?;
    let mut cfg = prepared.sampler_config()?;
    cfg.keep_images = false;
    let x = NoiseKey::new(0, 0, NoisePurpose::Auxiliary).normal_image(prepared.shape);

    let (mut build, mut apply, mut plain, mut guided, mut overhead) =
        (vec![], vec![], vec![], vec![], vec![]);
    for _ in 0..reps {
        let mut tensor = None;
        build.push(seconds(|| {
            tensor = Some(build_bilateral_tensor(&guide, &params)?);
            Ok(())
        })?);
        let tensor = tensor.expect("built above");
        apply.push(seconds(|| Ok(tensor.apply(&x)?))?);
        let unguided = seconds(|| Ok(run_sampler(&prepared.denoiser, &cfg, None, Some(&guide))?))?;
        let mut state = GuidanceState::new(
            tensor.into(),
            &guide,
            prepared.config.delta,
            prepared.config.t_start,
            prepared.config.t_stop,
        )?;
        let with = seconds(|| {
            Ok(run_sampler(
                &prepared.denoiser,
                &cfg,
                Some(&mut state as &mut dyn GuidanceHook),
                Some(&guide),
            )?)
        })?;
        plain.push(unguided);
        guided.push(with);
        overhead.push((with - unguided) / prepared.config.steps as f64);
    }
    Ok(vec![
        summarize("filter_build", &build),
        summarize("filter_apply", &apply),
        summarize("run_unguided", &plain),
        summarize("run_guided", &guided),
        summarize("step_overhead", &overhead),
    ])
}

pub fn write_bench(
    path: &Path,
    config: &RunConfig,
    reps: usize,
    timings: &[Timing],
) -> CliResult<()> {
    let mut file = fs::File::create(path).map_err(|e| io_error(path, e))?;
    writeln!(file, "{BENCH_HEADER}").map_err(|e| io_error(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record([
        "measurement",
        "size",
        "channels",
        "steps",
        "reps",
        "mean_ms",
        "std_ms",
    ])
    .map_err(|e| io_error(path, e))?;
    for t in timings {
        w.write_record([
            t.name.to_string(),
            config.size.to_string(),
            config.channels.to_string(),
            config.steps.to_string(),
            reps.to_string(),
            format!("{:.4}", t.mean_ms),
            format!("{:.4}", t.std_ms),
        ])
        .map_err(|e| io_error(path, e))?;
    }
    w.flush().map_err(|e| io_error(path, e))
}

pub fn cmd_bench(config: RunConfig, reps: usize, root: &Path) -> CliResult<(PathBuf, Vec<Timing>)> {
    let timings = bench(config.clone(), reps)?;
    let dir = root.join(format!("bench-{}", config.id()));
    fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    let path = dir.join("bench.csv");
    write_bench(&path, &config, reps, &timings)?;
    Ok((path, timings))
}

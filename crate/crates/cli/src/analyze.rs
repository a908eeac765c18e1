//! Spectra, per-frequency SNR and trace summaries written as CSV.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use fgd::analysis::{
    radial_amplitude_spectrum, snr_per_frequency, summarize_series, synth_one_over_f, TraceSummary,
};
use fgd::schedule::ScheduleSpec;
use fgd::ImageBuffer;

use crate::config::RunConfig;
use crate::error::{io_error, CliError, CliResult};
use crate::runner::TRACE_HEADER;

pub const SPECTRUM_HEADER: &str = "# fgd-spectrum v1 (mean DFT amplitude per radial bin)";
pub const SNR_HEADER: &str =
    "# fgd-snr v1 (amplitude ratio sqrt(abar)*A_x0 / (sqrt(1-abar)*A_noise))";
pub const SUMMARY_HEADER: &str = "# fgd-trace-summary v1";

fn csv_writer(path: &Path, header: &str) -> CliResult<csv::Writer<fs::File>> {
    let mut file = fs::File::create(path).map_err(|e| io_error(path, e))?;
    writeln!(file, "{header}").map_err(|e| io_error(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

/// Writes `spectrum.csv` and `snr.csv` for `x0` under a linear schedule
/// respaced to `steps`. Returns the log-log slope of the spectrum.
pub fn spectra(x0: &ImageBuffer, steps: usize, dir: &Path) -> CliResult<Option<f64>> {
    let spectrum = radial_amplitude_spectrum(x0);
    let path = dir.join("spectrum.csv");
    let mut w = csv_writer(&path, SPECTRUM_HEADER)?;
    w.write_record(["radius", "amplitude"])
        .map_err(|e| io_error(&path, e))?;
    for (r, a) in spectrum.radii().zip(spectrum.values()) {
        w.write_record([r.to_string(), a.to_string()])
            .map_err(|e| io_error(&path, e))?;
    }
    w.flush().map_err(|e| io_error(&path, e))?;

    let s = ScheduleSpec::default().respaced(steps)?.build()?;
    let path = dir.join("snr.csv");
    let mut w = csv_writer(&path, SNR_HEADER)?;
    w.write_record(["t", "radius", "snr"])
        .map_err(|e| io_error(&path, e))?;
    for t in 1..=s.steps() {
        let snr = snr_per_frequency(x0, &s, t)?;
        for (r, v) in snr.spectrum.radii().zip(snr.spectrum.values()) {
            if r > 0.0 {
                w.write_record([t.to_string(), r.to_string(), v.to_string()])
                    .map_err(|e| io_error(&path, e))?;
            }
        }
    }
    w.flush().map_err(|e| io_error(&path, e))?;
    let max_r = (x0.height().min(x0.width()) / 2) as f64;
    Ok(spectrum.log_log_slope(max_r))
}

pub fn one_over_f(size: usize, seed: u64) -> CliResult<ImageBuffer> {
    if size < 2 {
        return Err(CliError::config("1/f stimulus needs size >= 2"));
    }
    Ok(synth_one_over_f(size, seed)?)
}

fn parse_field(v: &str) -> CliResult<f64> {
    if v.is_empty() {
        return Ok(f64::NAN);
    }
    v.parse()
        .map_err(|_| CliError::runtime(format!("bad number '{v}' in trace")))
}

/// Reads `trace.csv` and `manifest.toml` from a run directory.
pub fn read_run_trace(run: &Path) -> CliResult<TraceSummary> {
    let manifest = run.join("manifest.toml");
    let text = fs::read_to_string(&manifest)
        .map_err(|e| CliError::config(format!("{}: {e}", manifest.display())))?;
    let config: RunConfig = toml::from_str(&text)
        .map_err(|e| CliError::config(format!("{}: {e}", manifest.display())))?;
    let path = run.join("trace.csv");
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let body = text.strip_prefix(TRACE_HEADER).ok_or_else(|| {
        CliError::runtime(format!(
            "{}: missing '{TRACE_HEADER}' header",
            path.display()
        ))
    })?;
    let mut r = csv::Reader::from_reader(body.trim_start().as_bytes());
    let (mut d, mut l) = (Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec.map_err(|e| io_error(&path, e))?;
        let t: usize = rec[0].parse().map_err(|_| {
            CliError::runtime(format!("{}: bad step '{}'", path.display(), &rec[0]))
        })?;
        d.push((t, parse_field(&rec[1])?));
        l.push((t, parse_field(&rec[2])?));
    }
    let window = (config.filter != "none").then_some((config.t_start, config.t_stop));
    Ok(summarize_series(d, l, window, None, 0.05))
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_summary(path: &Path, s: &TraceSummary) -> CliResult<()> {
    let mut w = csv_writer(path, SUMMARY_HEADER)?;
    w.write_record([
        "median_change_during",
        "median_change_after",
        "decreased_during_guidance",
        "flattens",
    ])
    .map_err(|e| io_error(path, e))?;
    let flag = |b: Option<bool>| b.map(|b| b.to_string()).unwrap_or_default();
    w.write_record([
        opt(s.median_change_during),
        opt(s.median_change_after),
        flag(s.decreased_during_guidance),
        flag(s.flattens),
    ])
    .map_err(|e| io_error(path, e))?;
    w.flush().map_err(|e| io_error(path, e))
}

pub struct AnalyzeRequest {
    pub image: Option<ImageBuffer>,
    pub run: Option<PathBuf>,
    pub steps: usize,
}

pub fn cmd_analyze(req: AnalyzeRequest, out: &Path) -> CliResult<()> {
    if req.image.is_none() && req.run.is_none() {
        return Err(CliError::config(
            "analyze needs --image, --one-over-f or --run",
        ));
    }
    fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    if let Some(x) = &req.image {
        let slope = spectra(x, req.steps, out)?;
        match slope {
            Some(s) => println!("spectrum log-log slope {s:.3}"),
            None => println!("spectrum too small for a slope fit"),
        }
    }
    if let Some(run) = &req.run {
        let s = read_run_trace(run)?;
        write_summary(&out.join("trace_summary.csv"), &s)?;
        println!(
            "d-score change per step: during guidance {}, after {}; decreased during guidance: {}",
            s.median_change_during
                .map(|v| format!("{v:.3e}"))
                .unwrap_or_else(|| "n/a".into()),
            s.median_change_after
                .map(|v| format!("{v:.3e}"))
                .unwrap_or_else(|| "n/a".into()),
            s.decreased_during_guidance
                .map(|b| b.to_string())
                .unwrap_or_else(|| "n/a".into())
        );
    }
    Ok(())
}

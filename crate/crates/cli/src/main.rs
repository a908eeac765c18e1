use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod analyze;
mod bench;
mod config;
mod error;
mod grid;
mod imageio;
mod plot;
mod runner;

use config::{ConfigFile, PartialRun, RunConfig};
use error::CliResult;

/// Filter-guided diffusion experiments with closed-form denoisers.
#[derive(Debug, Parser)]
#[command(name = "fgd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample once and write final.png, trace.csv and manifest.toml.
    Run(RunArgs),
    /// Run a delta x seed grid and aggregate structure distances.
    Sweep(SweepArgs),
    /// Compare bilateral sigma settings against ILVR low-pass factors.
    Ablate(AblateArgs),
    /// Time filter construction, application and full runs.
    Bench(BenchArgs),
    /// Radial spectra, per-frequency SNR and trace summaries.
    Analyze(AnalyzeArgs),
    /// Render a CSV written by the other commands as an SVG line chart.
    Plot(PlotArgs),
}

/// Flags shared by everything that samples; each overrides the config file.
#[derive(Debug, Args)]
struct RunFlags {
    /// TOML config file; flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root directory for outputs.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[arg(long)]
    preset: Option<String>,
    /// ddpm, ddim or plms.
    #[arg(long)]
    sampler: Option<String>,
    /// Respaced inference steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    train_steps: Option<usize>,
    #[arg(long)]
    beta_start: Option<f64>,
    #[arg(long)]
    beta_end: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// noise, sdedit or ddim-inverted.
    #[arg(long)]
    init: Option<String>,
    /// SDEdit start depth in (0, 1].
    #[arg(long)]
    strength: Option<f64>,
    #[arg(long)]
    t_start: Option<usize>,
    #[arg(long)]
    t_stop: Option<usize>,
    /// Detail parameter; `inf` disables the adjustment.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    sigma_spatial: Option<f64>,
    #[arg(long)]
    sigma_value: Option<f64>,
    /// bilateral, ilvr-N or none.
    #[arg(long)]
    filter: Option<String>,
    /// synthetic, templates or gaussian.
    #[arg(long)]
    prior: Option<String>,
    /// stripes, blobs or gradients (synthetic prior).
    #[arg(long)]
    template_kind: Option<String>,
    #[arg(long)]
    template_count: Option<usize>,
    #[arg(long)]
    template_std: Option<f64>,
    /// Directory of template images; implies the templates prior.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Standard deviation of the gaussian prior.
    #[arg(long)]
    prior_std: Option<f64>,
    /// Image side for synthetic and gaussian priors.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    /// Guide image path, or synthetic:<kind>.
    #[arg(long)]
    guide: Option<String>,
    /// Also write the clean estimate of every step.
    #[arg(long)]
    save_steps: bool,
}

impl RunFlags {
    fn partial(&self) -> PartialRun {
        PartialRun {
            preset: self.preset.clone(),
            sampler: self.sampler.clone(),
            steps: self.steps,
            train_steps: self.train_steps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            eta: self.eta,
            seed: self.seed,
            init: self.init.clone(),
            strength: self.strength,
            t_start: self.t_start,
            t_stop: self.t_stop,
            delta: self.delta,
            sigma_spatial: self.sigma_spatial,
            sigma_value: self.sigma_value,
            filter: self.filter.clone(),
            prior: self.prior.clone(),
            template_kind: self.template_kind.clone(),
            template_count: self.template_count,
            template_std: self.template_std,
            templates: self.templates.clone(),
            prior_std: self.prior_std,
            size: self.size,
            channels: self.channels,
            guide: self.guide.clone(),
            save_steps: self.save_steps.then_some(true),
        }
    }

    fn load(&self) -> CliResult<(ConfigFile, RunConfig)> {
        let file = match &self.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        let config = RunConfig::resolve(&[&file.run, &self.partial()])?;
        Ok((file, config))
    }
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    flags: RunFlags,
}

#[derive(Debug, Args)]
struct GridFlags {
    /// Detail values, comma separated.
    #[arg(long, value_delimiter = ',')]
    deltas: Option<Vec<f64>>,
    /// Seeds, comma separated.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Also write sheet.png with every final sample.
    #[arg(long)]
    contact_sheet: bool,
    /// Concurrent runs.
    #[arg(long, env = "FGD_JOBS")]
    jobs: Option<usize>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    flags: RunFlags,
    #[command(flatten)]
    grid: GridFlags,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    flags: RunFlags,
    #[command(flatten)]
    grid: GridFlags,
    /// Bilateral spatial sigmas to compare.
    #[arg(long, value_delimiter = ',')]
    ablate_sigma_spatial: Option<Vec<f64>>,
    /// Bilateral value sigmas to compare.
    #[arg(long, value_delimiter = ',')]
    ablate_sigma_value: Option<Vec<f64>>,
    /// ILVR down-sampling factors to compare.
    #[arg(long, value_delimiter = ',')]
    ilvr: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    flags: RunFlags,
    /// Repetitions per measurement.
    #[arg(long)]
    reps: Option<usize>,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    /// Image whose spectrum and SNR to report.
    #[arg(long, conflicts_with = "one_over_f")]
    image: Option<PathBuf>,
    /// Analyze a synthetic 1/f image of this size instead.
    #[arg(long)]
    one_over_f: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Respaced steps for the SNR table.
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// Run directory whose trace to summarize.
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long, default_value = "analysis")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PlotArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    x: String,
    /// One or more columns, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    y: Vec<String>,
    /// Column whose values split the rows into separate lines.
    #[arg(long)]
    group: Option<String>,
    #[arg(long)]
    log_x: bool,
    #[arg(long)]
    log_y: bool,
    #[arg(long)]
    title: Option<String>,
}

fn cmd_run(args: RunArgs) -> CliResult<()> {
    let (_, config) = args.flags.load()?;
    let out = runner::execute(config, &args.flags.out)?;
    println!("{}", out.dir.display());
    if let Some(d) = out.final_d_score {
        println!("final d-score {d:.6}");
    }
    Ok(())
}

fn grid_lists(file: &ConfigFile, grid: &GridFlags, default_delta: &[f64]) -> (Vec<f64>, Vec<u64>) {
    let deltas = grid
        .deltas
        .clone()
        .or_else(|| file.sweep.deltas.clone())
        .unwrap_or_else(|| default_delta.to_vec());
    let seeds = grid
        .seeds
        .clone()
        .or_else(|| file.sweep.seeds.clone())
        .unwrap_or_else(|| vec![0]);
    (deltas, seeds)
}

fn finish_grid(dir: &Path) {
    println!("{}", dir.join("aggregate.csv").display());
}

fn cmd_sweep(args: SweepArgs) -> CliResult<()> {
    let (file, config) = args.flags.load()?;
    let (deltas, seeds) = grid_lists(&file, &args.grid, &[0.05, 0.2, 0.5]);
    let cells = grid::sweep_cells(&config, &deltas, &seeds)?;
    let sheet = args.grid.contact_sheet || file.sweep.contact_sheet.unwrap_or(false);
    let dir = grid::run_grid("sweep", cells, &args.flags.out, args.grid.jobs, sheet)?;
    finish_grid(&dir);
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> CliResult<()> {
    let (file, config) = args.flags.load()?;
    let (deltas, seeds) = grid_lists(&file, &args.grid, &[config.delta]);
    let pick = |flag: &Option<Vec<f64>>, file: &Option<Vec<f64>>, default: &[f64]| {
        flag.clone()
            .or_else(|| file.clone())
            .unwrap_or_else(|| default.to_vec())
    };
    let ss = pick(
        &args.ablate_sigma_spatial,
        &file.ablate.sigma_spatial,
        &[3.0, 5.0, 11.0],
    );
    let sv = pick(
        &args.ablate_sigma_value,
        &file.ablate.sigma_value,
        &[0.1, 0.35, 0.5],
    );
    let ilvr = args
        .ilvr
        .clone()
        .or_else(|| file.ablate.ilvr.clone())
        .unwrap_or_else(|| vec![4, 8, 16, 32]);
    let cells = grid::ablate_cells(&config, &ss, &sv, &ilvr, &deltas, &seeds)?;
    let sheet = args.grid.contact_sheet || file.sweep.contact_sheet.unwrap_or(false);
    let dir = grid::run_grid("ablate", cells, &args.flags.out, args.grid.jobs, sheet)?;
    finish_grid(&dir);
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> CliResult<()> {
    let (file, config) = args.flags.load_for_bench()?;
    let reps = args.reps.or(file.bench.reps).unwrap_or(bench::MIN_REPS);
    let (path, timings) = bench::cmd_bench(config, reps, &args.flags.out)?;
    println!("{}", path.display());
    for t in &timings {
        println!("{:<14} {:>10.3} ms ± {:.3}", t.name, t.mean_ms, t.std_ms);
    }
    Ok(())
}

impl RunFlags {
    /// Like [`RunFlags::load`], but a missing guide falls back to a
    /// synthetic one since only timings are reported.
    fn load_for_bench(&self) -> CliResult<(ConfigFile, RunConfig)> {
        let file = match &self.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        let mut flags = self.partial();
        if flags.guide.is_none() && file.run.guide.is_none() {
            flags.guide = Some("synthetic:stripes".into());
        }
        let config = RunConfig::resolve(&[&file.run, &flags])?;
        Ok((file, config))
    }
}

fn cmd_analyze(args: AnalyzeArgs) -> CliResult<()> {
    let image = match (&args.image, args.one_over_f) {
        (Some(p), _) => Some(imageio::read_image(p)?),
        (None, Some(size)) => Some(analyze::one_over_f(size, args.seed)?),
        (None, None) => None,
    };
    analyze::cmd_analyze(
        analyze::AnalyzeRequest {
            image,
            run: args.run,
            steps: args.steps,
        },
        &args.out,
    )?;
    println!("{}", args.out.display());
    Ok(())
}

fn cmd_plot(args: PlotArgs) -> CliResult<()> {
    let opts = plot::PlotOptions {
        x: args.x,
        y: args.y,
        group: args.group,
        log_x: args.log_x,
        log_y: args.log_y,
        title: args.title,
    };
    plot::cmd_plot(&args.input, &args.output, &opts)?;
    println!("{}", args.output.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Plot(a) => cmd_plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

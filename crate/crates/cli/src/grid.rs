//! Sweeps and ablations: grids of runs sharing one aggregate CSV.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{io_error, CliError, CliResult};
use crate::imageio::{contact_sheet, write_image};
use crate::runner::{execute, RunOutcome};

pub const AGGREGATE_HEADER: &str = "# fgd-sweep v1";
pub const AGGREGATE_COLUMNS: [&str; 6] = [
    "filter",
    "delta",
    "seed",
    "structure_distance",
    "final_d_score",
    "run",
];

/// One grid cell: a row label for the contact sheet plus its config.
#[derive(Debug, Clone)]
pub struct Cell {
    pub row: String,
    pub config: RunConfig,
}

pub fn thread_pool(jobs: Option<usize>) -> CliResult<rayon::ThreadPool> {
    let jobs = match jobs {
        Some(0) => return Err(CliError::config("--jobs must be at least 1")),
        Some(n) => n,
        None => std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::runtime(e.to_string()))
}

/// Short label of a cell's guide filter for the aggregate CSV.
pub fn filter_label(c: &RunConfig) -> String {
    if c.filter == "bilateral" {
        format!("bilateral-{}-{}", c.sigma_spatial, c.sigma_value)
    } else {
        c.filter.clone()
    }
}

fn grid_id(kind: &str, cells: &[Cell]) -> String {
    let mut h = Sha256::new();
    h.update(kind.as_bytes());
    for c in cells {
        h.update(c.config.id().as_bytes());
    }
    format!("{kind}-{}", &format!("{:x}", h.finalize())[..16])
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn write_aggregate(path: &Path, cells: &[Cell], outcomes: &[RunOutcome]) -> CliResult<()> {
    let mut file = fs::File::create(path).map_err(|e| io_error(path, e))?;
    writeln!(file, "{AGGREGATE_HEADER}").map_err(|e| io_error(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(AGGREGATE_COLUMNS)
        .map_err(|e| io_error(path, e))?;
    for (cell, out) in cells.iter().zip(outcomes) {
        let c = &cell.config;
        w.write_record([
            filter_label(c),
            c.delta.to_string(),
            c.seed.to_string(),
            fmt_opt(out.structure_distance),
            fmt_opt(out.final_d_score),
            out.id.clone(),
        ])
        .map_err(|e| io_error(path, e))?;
    }
    w.flush().map_err(|e| io_error(path, e))
}

/// Runs every cell and writes `<root>/<kind>-<id>/` with `aggregate.csv`,
/// the cell runs under `runs/`, and optionally `sheet.png` (one row per
/// distinct row label, cells in order).
pub fn run_grid(
    kind: &str,
    cells: Vec<Cell>,
    root: &Path,
    jobs: Option<usize>,
    sheet: bool,
) -> CliResult<PathBuf> {
    if cells.is_empty() {
        return Err(CliError::config(format!("{kind} grid is empty")));
    }
    let dir = root.join(grid_id(kind, &cells));
    let runs = dir.join("runs");
    fs::create_dir_all(&runs).map_err(|e| io_error(&runs, e))?;
    let pool = thread_pool(jobs)?;
    let outcomes: CliResult<Vec<RunOutcome>> = pool.install(|| {
        cells
            .par_iter()
            .map(|c| execute(c.config.clone(), &runs))
            .collect()
    });
    let outcomes = match outcomes {
        Ok(o) => o,
        Err(e) => {
            let _ = fs::remove_dir_all(&dir);
            return Err(e);
        }
    };
    write_aggregate(&dir.join("aggregate.csv"), &cells, &outcomes)?;
    if sheet {
        let mut rows: Vec<(String, Vec<fgd::ImageBuffer>)> = Vec::new();
        for (cell, out) in cells.iter().zip(&outcomes) {
            match rows.iter_mut().find(|(label, _)| *label == cell.row) {
                Some((_, imgs)) => imgs.push(out.final_sample.clone()),
                None => rows.push((cell.row.clone(), vec![out.final_sample.clone()])),
            }
        }
        let grid: Vec<Vec<fgd::ImageBuffer>> = rows.into_iter().map(|r| r.1).collect();
        write_image(&dir.join("sheet.png"), &contact_sheet(&grid)?)?;
    }
    Ok(dir)
}

/// δ × seed cells around `base`.
pub fn sweep_cells(base: &RunConfig, deltas: &[f64], seeds: &[u64]) -> CliResult<Vec<Cell>> {
    if deltas.is_empty() || seeds.is_empty() {
        return Err(CliError::config(
            "sweep needs at least one delta and one seed",
        ));
    }
    let mut cells = Vec::new();
    for &delta in deltas {
        for &seed in seeds {
            let mut c = base.clone();
            c.delta = delta;
            c.seed = seed;
            c.validate()?;
            cells.push(Cell {
                row: format!("delta={delta}"),
                config: c,
            });
        }
    }
    Ok(cells)
}

/// Bilateral σ grid and ILVR factors, each crossed with δ and seeds.
pub fn ablate_cells(
    base: &RunConfig,
    sigma_spatial: &[f64],
    sigma_value: &[f64],
    ilvr: &[usize],
    deltas: &[f64],
    seeds: &[u64],
) -> CliResult<Vec<Cell>> {
    if sigma_spatial.is_empty() != sigma_value.is_empty() {
        return Err(CliError::config(
            "bilateral grid needs both sigma_spatial and sigma_value values",
        ));
    }
    let mut filters: Vec<RunConfig> = Vec::new();
    for &ss in sigma_spatial {
        for &sv in sigma_value {
            let mut c = base.clone();
            c.filter = "bilateral".into();
            c.sigma_spatial = ss;
            c.sigma_value = sv;
            filters.push(c);
        }
    }
    for &n in ilvr {
        let mut c = base.clone();
        c.filter = format!("ilvr-{n}");
        filters.push(c);
    }
    if filters.is_empty() {
        return Err(CliError::config("ablation grid is empty"));
    }
    let mut cells = Vec::new();
    for f in filters {
        for cell in sweep_cells(&f, deltas, seeds)? {
            cells.push(Cell {
                row: filter_label(&f),
                config: cell.config,
            });
        }
    }
    Ok(cells)
}

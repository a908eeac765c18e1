//! Minimal SVG line charts from the CSV files the other subcommands write.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{io_error, CliError, CliResult};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

#[derive(Debug, Clone)]
pub struct PlotOptions {
    pub x: String,
    pub y: Vec<String>,
    pub group: Option<String>,
    pub log_x: bool,
    pub log_y: bool,
    pub title: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Parses a CSV body, skipping leading `#` lines.
pub fn read_table(text: &str) -> CliResult<(Vec<String>, Vec<Vec<String>>)> {
    let body: String = text
        .lines()
        .skip_while(|l| l.starts_with('#'))
        .collect::<Vec<_>>()
        .join("\n");
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let headers = r
        .headers()
        .map_err(|e| CliError::config(format!("bad csv: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::config(format!("bad csv: {e}")))?;
    Ok((headers, rows))
}

pub fn build_series(
    headers: &[String],
    rows: &[Vec<String>],
    opts: &PlotOptions,
) -> CliResult<Vec<Series>> {
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            CliError::config(format!("no column '{name}' (have {})", headers.join(", ")))
        })
    };
    let xi = col(&opts.x)?;
    let gi = opts.group.as_deref().map(col).transpose()?;
    let mut out: BTreeMap<(usize, String), Series> = BTreeMap::new();
    for (k, y) in opts.y.iter().enumerate() {
        let yi = col(y)?;
        for row in rows {
            let (Ok(x), Ok(v)) = (row[xi].parse::<f64>(), row[yi].parse::<f64>()) else {
                continue;
            };
            if !(x.is_finite() && v.is_finite())
                || (opts.log_x && x <= 0.0)
                || (opts.log_y && v <= 0.0)
            {
                continue;
            }
            let group = gi.map(|g| row[g].clone()).unwrap_or_default();
            let label = match (opts.y.len(), group.is_empty()) {
                (1, false) => format!("{} = {group}", opts.group.as_deref().unwrap_or("")),
                (_, false) => format!("{y}, {group}"),
                _ => y.clone(),
            };
            out.entry((k, group))
                .or_insert_with(|| Series {
                    label,
                    points: Vec::new(),
                })
                .points
                .push((x, v));
        }
    }
    Ok(out.into_values().filter(|s| !s.points.is_empty()).collect())
}

fn nice_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let span = (hi - lo).max(f64::EPSILON);
    let raw = span / n as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= n as f64)
        .unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut ticks = Vec::new();
    while t <= hi + step * 1e-9 {
        ticks.push(t);
        t += step;
    }
    ticks
}

pub fn render_svg(series: &[Series], opts: &PlotOptions) -> CliResult<String> {
    if series.is_empty() {
        return Err(CliError::config("nothing to plot"));
    }
    let tx = |v: f64| if opts.log_x { v.log10() } else { v };
    let ty = |v: f64| if opts.log_y { v.log10() } else { v };
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in pts {
        x0 = x0.min(tx(x));
        x1 = x1.max(tx(x));
        y0 = y0.min(ty(y));
        y1 = y1.max(ty(y));
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let (pw, ph) = (WIDTH - 2.0 * MARGIN, HEIGHT - 2.0 * MARGIN);
    let px = |x: f64| MARGIN + (tx(x) - x0) / (x1 - x0) * pw;
    let py = |y: f64| HEIGHT - MARGIN - (ty(y) - y0) / (y1 - y0) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    if let Some(t) = &opts.title {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
            WIDTH / 2.0,
            escape(t)
        );
    }
    let _ = writeln!(
        svg,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for t in nice_ticks(x0, x1, 6) {
        let x = MARGIN + (t - x0) / (x1 - x0) * pw;
        let label = if opts.log_x {
            format!("1e{t}")
        } else {
            format!("{t}")
        };
        let _ = writeln!(
            svg,
            r#"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="black"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{label}</text>"#,
            HEIGHT - MARGIN,
            HEIGHT - MARGIN + 4.0,
            HEIGHT - MARGIN + 16.0
        );
    }
    for t in nice_ticks(y0, y1, 5) {
        let y = HEIGHT - MARGIN - (t - y0) / (y1 - y0) * ph;
        let label = if opts.log_y {
            format!("1e{t}")
        } else {
            format!("{t}")
        };
        let _ = writeln!(
            svg,
            r#"<line x1="{:.1}" y1="{y:.1}" x2="{MARGIN}" y2="{y:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" text-anchor="end">{label}</text>"#,
            MARGIN - 4.0,
            MARGIN - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0,
        escape(&opts.x)
    );
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            path.join(" ")
        );
        let ly = MARGIN + 14.0 * (i as f64 + 1.0);
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{ly:.1}" fill="{color}" text-anchor="end">{}</text>"#,
            WIDTH - MARGIN - 6.0,
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

pub fn cmd_plot(input: &Path, output: &Path, opts: &PlotOptions) -> CliResult<()> {
    let text = std::fs::read_to_string(input)
        .map_err(|e| CliError::config(format!("{}: {e}", input.display())))?;
    let (headers, rows) = read_table(&text)?;
    let series = build_series(&headers, &rows, opts)?;
    let svg = render_svg(&series, opts)?;
    std::fs::write(output, svg).map_err(|e| io_error(output, e))
}

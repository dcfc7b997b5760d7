//! CSV tables, static SVG charts and run manifests. Every file is written
//! to a temporary sibling and renamed into place.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::experiments::{median, BoundsOutput, SpectrumRow, TraceRow};

pub const NA: &str = "NA";

/// Shortest round-trip decimal; non-finite values become `NA`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:?}")
    } else {
        NA.into()
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| NA.into(), fmt_f64)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(Error::LengthMismatch {
                a: self.header.len(),
                b: row.len(),
            });
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingKey(name.into()))
    }

    pub fn column(&self, name: &str) -> Result<Vec<&str>> {
        let i = self.column_index(name)?;
        Ok(self.rows.iter().map(|r| r[i].as_str()).collect())
    }

    /// Numeric column; `NA` and unparsable cells become `None`.
    pub fn column_f64(&self, name: &str) -> Result<Vec<Option<f64>>> {
        Ok(self.column(name)?.into_iter().map(|c| c.parse().ok()).collect())
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Io {
            path: PathBuf::from("<csv>"),
            source: std::io::Error::other(e),
        };
        w.write_record(&self.header).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record(r).map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| Error::Io {
            path: PathBuf::from("<csv>"),
            source: e.into_error(),
        })
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
        let parse_err = |e: csv::Error| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::Parse {
                line,
                column: 0,
                message: e.to_string(),
            }
        };
        let header = r.headers().map_err(parse_err)?.iter().map(String::from).collect();
        let mut t = Table {
            header,
            rows: Vec::new(),
        };
        for rec in r.records() {
            let rec = rec.map_err(parse_err)?;
            t.push(rec.iter().map(String::from).collect())?;
        }
        Ok(t)
    }
}

pub fn emit_csv(table: &Table, path: &Path) -> Result<String> {
    let bytes = table.to_csv()?;
    atomic_write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn read_csv(path: &Path) -> Result<Table> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Table::from_csv(&bytes)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Write through a temporary file in the target directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn trace_table(rows: &[TraceRow]) -> Table {
    let mut t = Table::new(&TraceRow::HEADER);
    for r in rows {
        t.rows.push(vec![
            r.step.to_string(),
            r.sample.map_or_else(|| "all".into(), |s| s.to_string()),
            fmt_f64(r.loss),
            fmt_f64(r.std_risk),
            fmt_opt(r.log2_std_risk),
            fmt_f64(r.grad_energy),
            fmt_opt(r.log2_grad_energy),
            fmt_opt(r.log2_lambda_min),
            fmt_opt(r.log2_lambda_max),
            fmt_opt(r.ub),
            fmt_opt(r.lb),
            fmt_opt(r.cor_lb),
            fmt_opt(r.cor_ub),
            fmt_opt(r.ent_lower),
            fmt_opt(r.gamma),
            fmt_opt(r.pearson_std_ub),
            fmt_opt(r.pearson_std_lb),
            fmt_opt(r.pearson_std_ge),
            fmt_opt(r.pearson_risk_std),
            r.degenerate.to_string(),
        ]);
    }
    t
}

pub fn spectrum_table(rows: &[SpectrumRow]) -> Table {
    let mut t = Table::new(&SpectrumRow::HEADER);
    for r in rows {
        t.rows.push(vec![
            r.depth.to_string(),
            r.width.to_string(),
            r.skip.to_string(),
            r.seed.to_string(),
            fmt_opt(r.log2_lambda_min),
            fmt_opt(r.log2_lambda_max),
            fmt_opt(r.log2_frob),
            fmt_opt(r.log2_diag_norm),
            fmt_opt(r.gap),
        ]);
    }
    t
}

/// Two-column `(name, value)` table.
pub fn key_value_table(pairs: &[(String, Option<f64>)]) -> Table {
    let mut t = Table::new(&["quantity", "value"]);
    for (k, v) in pairs {
        t.rows.push(vec![k.clone(), fmt_opt(*v)]);
    }
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    /// `None` breaks the line.
    pub points: Vec<(f64, Option<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_y: bool,
    pub series: Vec<Series>,
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
const W: f64 = 720.0;
const H: f64 = 420.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn tick_label(v: f64, log: bool) -> String {
    if log {
        format!("{:.1e}", 10f64.powf(v))
    } else if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn span(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        (lo, hi)
    } else {
        let pad = if lo == 0.0 { 1.0 } else { 0.5 * lo.abs() };
        (lo - pad, hi + pad)
    }
}

impl Chart {
    fn transformed(&self, y: Option<f64>) -> Option<f64> {
        let y = y.filter(|v| v.is_finite())?;
        if self.log_y {
            (y > 0.0).then(|| y.log10())
        } else {
            Some(y)
        }
    }

    /// Static SVG; identical inputs give identical bytes.
    pub fn render(&self) -> Result<String> {
        let pts: Vec<(f64, f64)> = self
            .series
            .iter()
            .flat_map(|s| s.points.iter())
            .filter(|(x, _)| x.is_finite())
            .filter_map(|&(x, y)| self.transformed(y).map(|t| (x, t)))
            .collect();
        if pts.is_empty() {
            return Err(Error::EmptySeries);
        }
        let fold = |f: fn(&(f64, f64)) -> f64| {
            pts.iter()
                .map(f)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        };
        let (x0, x1) = {
            let (a, b) = fold(|p| p.0);
            span(a, b)
        };
        let (y0, y1) = {
            let (a, b) = fold(|p| p.1);
            span(a, b)
        };
        let pw = W - LEFT - RIGHT;
        let ph = H - TOP - BOTTOM;
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            LEFT + pw / 2.0,
            xml_escape(&self.title)
        );
        let _ = writeln!(
            s,
            r#"<path d="M{LEFT:.2} {TOP:.2} V{:.2} H{:.2}" fill="none" stroke="black"/>"#,
            TOP + ph,
            LEFT + pw
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
            let (px, py) = (sx(xv), sy(yv));
            let _ = writeln!(
                s,
                r#"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="black"/><text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                TOP + ph,
                TOP + ph + 5.0,
                TOP + ph + 18.0,
                tick_label(xv, false)
            );
            let _ = writeln!(
                s,
                r#"<line x1="{:.2}" y1="{py:.2}" x2="{LEFT:.2}" y2="{py:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
                LEFT - 5.0,
                LEFT - 8.0,
                py + 4.0,
                tick_label(yv, self.log_y)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            H - 14.0,
            xml_escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">{}{}</text>"#,
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            xml_escape(&self.y_label),
            if self.log_y { " (log scale)" } else { "" }
        );
        for (k, series) in self.series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            let mut runs: Vec<Vec<(f64, f64)>> = vec![Vec::new()];
            for &(x, y) in &series.points {
                match self.transformed(y).filter(|_| x.is_finite()) {
                    Some(t) => runs.last_mut().expect("nonempty").push((sx(x), sy(t))),
                    None => runs.push(Vec::new()),
                }
            }
            for run in runs.iter().filter(|r| !r.is_empty()) {
                if run.len() == 1 {
                    let _ = writeln!(
                        s,
                        r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{color}"/>"#,
                        run[0].0, run[0].1
                    );
                } else {
                    let pts: Vec<String> = run.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
                    let _ = writeln!(
                        s,
                        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                        pts.join(" ")
                    );
                }
            }
            let ly = TOP + 12.0 + 18.0 * k as f64;
            let lx = W - RIGHT + 16.0;
            let _ = writeln!(
                s,
                r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
                lx + 20.0,
                lx + 26.0,
                ly + 4.0,
                xml_escape(&series.name)
            );
        }
        s.push_str("</svg>\n");
        Ok(s)
    }
}

pub fn emit_svg(chart: &Chart, path: &Path) -> Result<String> {
    let svg = chart.render()?;
    atomic_write(path, svg.as_bytes())?;
    Ok(sha256_hex(svg.as_bytes()))
}

fn parse_f64(cells: &[&str]) -> Vec<Option<f64>> {
    cells.iter().map(|c| c.parse().ok()).collect()
}

/// Charts for a bound-tracking table: one sandwich chart per tracked sample
/// and for the whole set, plus the dataset-level correlations.
pub fn trace_charts(t: &Table) -> Result<Vec<(String, Chart)>> {
    let step = parse_f64(&t.column("step")?);
    let sample = t.column("sample")?;
    let mut keys: Vec<&str> = Vec::new();
    for s in &sample {
        if !keys.contains(s) {
            keys.push(s);
        }
    }
    let cols = |names: &[&str], key: &str| -> Result<Vec<Series>> {
        names
            .iter()
            .map(|n| {
                let v = t.column_f64(n)?;
                Ok(Series {
                    name: n.to_string(),
                    points: (0..t.rows.len())
                        .filter(|&i| sample[i] == key)
                        .map(|i| (step[i].unwrap_or(f64::NAN), v[i]))
                        .collect(),
                })
            })
            .collect()
    };
    let mut out = Vec::new();
    for key in &keys {
        let label = if *key == "all" {
            "all samples".to_string()
        } else {
            format!("sample {key}")
        };
        out.push((
            format!("sandwich_{key}"),
            Chart {
                title: format!("Standardized risk and its bounds, {label}"),
                x_label: "step".into(),
                y_label: "log2".into(),
                log_y: false,
                series: cols(&["log2_std_risk", "ub", "lb"], key)?,
            },
        ));
    }
    out.push((
        "pearson_all".into(),
        Chart {
            title: "Rolling Pearson correlations, all samples".into(),
            x_label: "step".into(),
            y_label: "correlation".into(),
            log_y: false,
            series: cols(
                &["pearson_std_ub", "pearson_std_lb", "pearson_std_ge", "pearson_risk_std"],
                "all",
            )?,
        },
    ));
    out.push((
        "risk_all".into(),
        Chart {
            title: "Risk and fitting bounds, all samples".into(),
            x_label: "step".into(),
            y_label: "risk".into(),
            log_y: true,
            series: cols(&["loss", "std_risk", "gamma", "cor_lb", "cor_ub"], "all")?,
        },
    ));
    Ok(out)
}

/// Seed-median spectrum curves against depth and against width, split by skip.
pub fn spectrum_charts(t: &Table) -> Result<Vec<(String, Chart)>> {
    let depth = parse_f64(&t.column("depth")?);
    let width = parse_f64(&t.column("width")?);
    let skip = t.column("skip")?;
    let mut out = Vec::new();
    for (axis, values, other) in [("depth", &depth, &width), ("width", &width, &depth)] {
        let mut xs: Vec<f64> = values.iter().flatten().copied().collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        if xs.len() < 2 {
            continue;
        }
        let mut series = Vec::new();
        for metric in ["log2_lambda_max", "log2_lambda_min", "gap"] {
            let m = t.column_f64(metric)?;
            for sk in ["false", "true"] {
                let mut others: Vec<f64> = (0..t.rows.len())
                    .filter(|&i| skip[i] == sk)
                    .filter_map(|i| other[i])
                    .collect();
                others.sort_by(f64::total_cmp);
                others.dedup();
                for o in others {
                    let points: Vec<(f64, Option<f64>)> = xs
                        .iter()
                        .map(|&x| {
                            let vals: Vec<f64> = (0..t.rows.len())
                                .filter(|&i| skip[i] == sk && values[i] == Some(x) && other[i] == Some(o))
                                .filter_map(|i| m[i])
                                .collect();
                            (x, median(&vals))
                        })
                        .collect();
                    if points.iter().any(|p| p.1.is_some()) {
                        let other_name = if axis == "depth" { "width" } else { "depth" };
                        series.push(Series {
                            name: format!("{metric} skip={sk} {other_name}={o}"),
                            points,
                        });
                    }
                }
            }
        }
        if !series.is_empty() {
            out.push((
                format!("spectrum_by_{axis}"),
                Chart {
                    title: format!("Structure-matrix spectrum at init vs {axis} (seed median)"),
                    x_label: axis.into(),
                    y_label: "log2".into(),
                    log_y: false,
                    series,
                },
            ));
        }
    }
    Ok(out)
}

/// Tables of a bounds report, keyed by file stem.
pub fn bounds_tables(b: &BoundsOutput) -> Result<Vec<(String, Table)>> {
    let mut summary = b.summary.clone();
    let d = &b.det;
    summary.extend([
        ("gen".to_string(), Some(d.gen)),
        ("gen_risk_true".to_string(), Some(d.risk_true)),
        ("gen_risk_emp".to_string(), Some(d.risk_emp)),
        ("gen_gamma".to_string(), Some(d.gamma)),
        ("gen_bound_population_above".to_string(), Some(d.bound_case1)),
        ("gen_bound_empirical_above".to_string(), Some(d.bound_case2)),
    ]);
    let mut out = vec![("bounds_summary".to_string(), key_value_table(&summary))];
    if !b.radius_curve.is_empty() {
        let mut t = Table::new(&["radius", "gamma"]);
        for &(r, g) in &b.radius_curve {
            t.push(vec![fmt_f64(r), fmt_f64(g)])?;
        }
        out.push(("radius_curve".into(), t));
    }
    let mut t = Table::new(&["eps", "empirical", "analytic"]);
    for r in &b.prob {
        t.push(vec![fmt_f64(r.eps), fmt_f64(r.empirical), fmt_f64(r.analytic)])?;
    }
    out.push(("gen_probability".into(), t));
    Ok(out)
}

fn xy_chart(t: &Table, x: &str, ys: &[&str], title: &str, y_label: &str, log_y: bool) -> Result<Chart> {
    let xs = t.column_f64(x)?;
    let series = ys
        .iter()
        .map(|y| {
            let v = t.column_f64(y)?;
            Ok(Series {
                name: y.to_string(),
                points: xs.iter().zip(v).map(|(a, b)| (a.unwrap_or(f64::NAN), b)).collect(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(Chart {
        title: title.into(),
        x_label: x.into(),
        y_label: y_label.into(),
        log_y,
        series,
    })
}

/// Charts derived from a stored table, chosen by its file stem. Tables
/// without charts give an empty list.
pub fn charts_for(stem: &str, t: &Table) -> Result<Vec<(String, Chart)>> {
    match stem {
        "trace" => trace_charts(t),
        "spectrum" => spectrum_charts(t),
        "radius_curve" => Ok(vec![(
            "radius_curve".into(),
            xy_chart(
                t,
                "radius",
                &["gamma"],
                "Worst-case loss against parameter radius",
                "gamma",
                false,
            )?,
        )]),
        "gen_probability" => Ok(vec![(
            "gen_probability".into(),
            xy_chart(
                t,
                "eps",
                &["empirical", "analytic"],
                "Pr(|gen| >= eps): Monte Carlo and bound",
                "probability",
                true,
            )?,
        )]),
        _ => Ok(Vec::new()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_snapshot: String,
    pub seeds: Vec<u64>,
    pub artifact_version: String,
    pub outputs: Vec<OutputEntry>,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Io {
            path: path.into(),
            source: std::io::Error::other(e),
        })?;
        atomic_write(path, format!("{json}\n").as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }
}

/// First 12 hex digits of the config's SHA-256.
pub fn config_hash12(config_text: &str) -> String {
    sha256_hex(config_text.as_bytes())[..12].to_string()
}

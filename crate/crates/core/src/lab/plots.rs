//! SVG and CSV views of a finished run: a scatter of final samples per
//! (method, N), trajectory polylines per N coloured by method, and IFC
//! against the number of steps.
//!
//! Everything is rendered in memory first, so a failure leaves no partial
//! output behind.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

const SIZE: f64 = 480.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// A final sample with its cell.
#[derive(Clone, Debug, PartialEq)]
pub struct FinalPoint {
    pub method: String,
    pub n_steps: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct SweepRow {
    #[serde(rename = "N_steps")]
    pub n_steps: usize,
    pub method: String,
    pub ifc: f64,
    pub ood_rate: f64,
    pub fidelity: f64,
}

/// Clean-estimate path of one chain, first step to final sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Polyline {
    pub method: String,
    pub n_steps: usize,
    pub points: Vec<(f64, f64)>,
}

/// Axis-aligned data window mapped onto the square canvas.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Frame {
    /// Smallest window holding every point, padded by 5% per side.
    pub fn covering(points: impl IntoIterator<Item = (f64, f64)>) -> Result<Frame> {
        let mut f = Frame {
            x_min: f64::INFINITY,
            x_max: f64::NEG_INFINITY,
            y_min: f64::INFINITY,
            y_max: f64::NEG_INFINITY,
        };
        for (x, y) in points {
            f.x_min = f.x_min.min(x);
            f.x_max = f.x_max.max(x);
            f.y_min = f.y_min.min(y);
            f.y_max = f.y_max.max(y);
        }
        if !f.x_min.is_finite() {
            return Err(Error::Contract("nothing to plot".into()));
        }
        let pad = |lo: f64, hi: f64| {
            let p = ((hi - lo) * 0.05).max(1e-3);
            (lo - p, hi + p)
        };
        (f.x_min, f.x_max) = pad(f.x_min, f.x_max);
        (f.y_min, f.y_max) = pad(f.y_min, f.y_max);
        Ok(f)
    }

    /// Canvas coordinates of a data point.
    pub fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let inner = SIZE - 2.0 * MARGIN;
        (
            MARGIN + (x - self.x_min) / (self.x_max - self.x_min) * inner,
            SIZE - MARGIN - (y - self.y_min) / (self.y_max - self.y_min) * inner,
        )
    }
}

fn svg_open(title: &str, frame: &Frame, x_label: &str, y_label: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{SIZE}" height="{SIZE}" fill="white"/>"#);
    let inner = SIZE - 2.0 * MARGIN;
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{inner}" height="{inner}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{title}</text>"#, SIZE / 2.0);
    let bottom = SIZE - MARGIN;
    let _ = writeln!(s, r#"<text x="{MARGIN}" y="{}">{:.3}</text>"#, bottom + 14.0, frame.x_min);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#,
        SIZE - MARGIN,
        bottom + 14.0,
        frame.x_max
    );
    let _ = writeln!(s, r#"<text x="{}" y="{bottom}" text-anchor="end">{:.3}</text>"#, MARGIN - 4.0, frame.y_min);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#, MARGIN - 4.0, MARGIN + 10.0, frame.y_max);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, SIZE / 2.0, SIZE - 12.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{y_label}</text>"#,
        SIZE / 2.0,
        SIZE / 2.0
    );
    s
}

fn legend(s: &mut String, names: &[&String]) {
    for (i, name) in names.iter().enumerate() {
        let y = MARGIN + 14.0 + 14.0 * i as f64;
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(s, r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/>"#, MARGIN + 6.0, y - 9.0);
        let _ = writeln!(s, r#"<text x="{}" y="{y}">{name}</text>"#, MARGIN + 20.0);
    }
}

pub fn scatter_svg(title: &str, points: &[(f64, f64)]) -> Result<String> {
    let frame = Frame::covering(points.iter().copied())?;
    let mut s = svg_open(title, &frame, "x_0", "x_1");
    for &(x, y) in points {
        let (cx, cy) = frame.map(x, y);
        let _ = writeln!(s, r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="1.6" fill="{}" fill-opacity="0.6"/>"#, PALETTE[0]);
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn trajectories_svg(title: &str, lines: &[&Polyline]) -> Result<String> {
    let frame = Frame::covering(lines.iter().flat_map(|l| l.points.iter().copied()))?;
    let mut names: Vec<&String> = lines.iter().map(|l| &l.method).collect();
    names.sort();
    names.dedup();
    let mut s = svg_open(title, &frame, "x_0", "x_1");
    for line in lines {
        let idx = names.iter().position(|n| **n == line.method).expect("listed");
        let pts: Vec<String> = line
            .points
            .iter()
            .map(|&(x, y)| {
                let (px, py) = frame.map(x, y);
                format!("{px:.2},{py:.2}")
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-opacity="0.5" stroke-width="1"/>"#,
            pts.join(" "),
            PALETTE[idx % PALETTE.len()]
        );
    }
    legend(&mut s, &names);
    s.push_str("</svg>\n");
    Ok(s)
}

/// IFC against step count, one line per method.
pub fn ifc_svg(rows: &[SweepRow]) -> Result<String> {
    let frame = Frame::covering(rows.iter().map(|r| (r.n_steps as f64, r.ifc)))?;
    let mut by_method: BTreeMap<&String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        by_method.entry(&r.method).or_default().push((r.n_steps as f64, r.ifc));
    }
    let mut s = svg_open("IFC vs steps", &frame, "N", "IFC (dB)");
    for (i, pts) in by_method.values_mut().enumerate() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let color = PALETTE[i % PALETTE.len()];
        let mapped: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| frame.map(x, y)).collect();
        let joined: Vec<String> = mapped.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, joined.join(" "));
        for (x, y) in mapped {
            let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{color}"/>"#);
        }
    }
    let names: Vec<&String> = by_method.keys().copied().collect();
    legend(&mut s, &names);
    s.push_str("</svg>\n");
    Ok(s)
}

/// Renders every plot; returns `(file name, contents)` pairs.
pub fn render(finals: &[FinalPoint], sweep: &[SweepRow], lines: &[Polyline]) -> Result<Vec<(String, String)>> {
    if finals.is_empty() {
        return Err(Error::Contract("no final samples to plot".into()));
    }
    let mut files = Vec::new();
    let mut cells: BTreeMap<(&String, usize), Vec<(f64, f64)>> = BTreeMap::new();
    for p in finals {
        cells.entry((&p.method, p.n_steps)).or_default().push((p.x, p.y));
    }
    for ((method, n), pts) in &cells {
        files.push((
            format!("scatter_{method}_N{n}.svg"),
            scatter_svg(&format!("{method}, N = {n}"), pts)?,
        ));
    }
    let mut by_n: BTreeMap<usize, Vec<&Polyline>> = BTreeMap::new();
    for l in lines {
        by_n.entry(l.n_steps).or_default().push(l);
    }
    for (n, group) in &by_n {
        files.push((format!("trajectories_N{n}.svg"), trajectories_svg(&format!("trajectories, N = {n}"), group)?));
    }
    if !sweep.is_empty() {
        files.push(("ifc_vs_steps.svg".into(), ifc_svg(sweep)?));
        let mut csv = String::from("method,N_steps,ifc\n");
        for r in sweep {
            let _ = writeln!(csv, "{},{},{}", r.method, r.n_steps, r.ifc);
        }
        files.push(("ifc_vs_steps.csv".into(), csv));
    }
    Ok(files)
}

fn open_csv(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Reader::from_reader(file))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

fn read_finals(path: &Path) -> Result<Vec<FinalPoint>> {
    let mut out = Vec::new();
    for rec in open_csv(path)?.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize| -> Result<f64> {
            field(i)
                .parse()
                .map_err(|_| Error::Config(format!("{}: bad number {:?}", path.display(), field(i))))
        };
        out.push(FinalPoint {
            method: field(0).to_string(),
            n_steps: num(1)? as usize,
            x: num(3)?,
            y: num(4)?,
        });
    }
    Ok(out)
}

fn read_sweep(path: &Path) -> Result<Vec<SweepRow>> {
    open_csv(path)?
        .deserialize()
        .map(|r| r.map_err(|e| csv_error(path, e)))
        .collect()
}

/// Parses `trajectories/<method>_N<n>.csv` files into polylines of the
/// clean estimates.
fn read_polylines(dir: &Path) -> Result<Vec<Polyline>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    for path in paths {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let Some((method, n)) = stem.rsplit_once("_N") else { continue };
        let Ok(n_steps) = n.parse::<usize>() else { continue };
        let mut reader = open_csv(&path)?;
        let headers = reader.headers().map_err(|e| csv_error(&path, e))?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let (Some(cx), Some(cy)) = (col("x0_pred_0"), col("x0_pred_1")) else { continue };
        let mut chains: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| csv_error(&path, e))?;
            let parse = |i: usize| rec.get(i).and_then(|v| v.parse::<f64>().ok());
            if let (Some(chain), Some(x), Some(y)) = (rec.get(0).and_then(|c| c.parse().ok()), parse(cx), parse(cy)) {
                chains.entry(chain).or_default().push((x, y));
            }
        }
        out.extend(chains.into_values().map(|points| Polyline {
            method: method.to_string(),
            n_steps,
            points,
        }));
    }
    Ok(out)
}

/// Reads a run directory and writes the plots into `<run>/plots/`.
/// Returns the written paths.
pub fn export_plots(run: &Path) -> Result<Vec<std::path::PathBuf>> {
    let finals = read_finals(&run.join("finals.csv"))?;
    let sweep_path = run.join("sweep.csv");
    let sweep = if sweep_path.exists() { read_sweep(&sweep_path)? } else { Vec::new() };
    let lines = read_polylines(&run.join("trajectories"))?;
    let files = render(&finals, &sweep, &lines)?;
    let out_dir = run.join("plots");
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let mut written = Vec::with_capacity(files.len());
    for (name, body) in files {
        let path = out_dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

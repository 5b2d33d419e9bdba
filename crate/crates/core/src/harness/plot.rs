//! SVG comparison plots, each written next to a CSV of the plotted data.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::matrix::RunRecord;
use super::table::{emit_table, method_order, Spread};
use crate::error::{Error, Result};
use crate::metrics::{histogram, unit_edges};
use crate::train::Method;

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Plot frame with linear axes.
struct Frame {
    svg: String,
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(title: &str, x: (f64, f64), y: (f64, f64), x_label: &str, y_label: &str) -> Self {
        let mut svg = String::new();
        let _ = write!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = write!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = write!(svg, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, esc(title));
        let (x0, y0, x1, y1) = (LEFT, H - BOTTOM, W - RIGHT, TOP);
        let _ = write!(svg, r#"<path d="M{x0},{y1} L{x0},{y0} L{x1},{y0}" stroke="black" fill="none"/>"#);
        let _ = write!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            (x0 + x1) / 2.0,
            H - 15.0,
            esc(x_label)
        );
        let _ = write!(
            svg,
            r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            esc(y_label)
        );
        let mut f = Self { svg, x, y };
        for i in 0..=5 {
            let v = y.0 + (y.1 - y.0) * i as f64 / 5.0;
            let py = f.py(v);
            let _ = write!(f.svg, r#"<line x1="{}" y1="{py}" x2="{x0}" y2="{py}" stroke="black"/>"#, x0 - 4.0);
            let _ = write!(f.svg, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, x0 - 6.0, py + 4.0, fmt_tick(v));
        }
        f
    }

    fn px(&self, v: f64) -> f64 {
        let span = (self.x.1 - self.x.0).max(f64::EPSILON);
        LEFT + (v - self.x.0) / span * (W - LEFT - RIGHT)
    }

    fn py(&self, v: f64) -> f64 {
        let span = (self.y.1 - self.y.0).max(f64::EPSILON);
        H - BOTTOM - (v - self.y.0) / span * (H - TOP - BOTTOM)
    }

    fn x_tick(&mut self, v: f64, label: &str) {
        let px = self.px(v);
        let y0 = H - BOTTOM;
        let _ = write!(self.svg, r#"<line x1="{px}" y1="{y0}" x2="{px}" y2="{}" stroke="black"/>"#, y0 + 4.0);
        let _ = write!(self.svg, r#"<text x="{px}" y="{}" text-anchor="middle">{}</text>"#, y0 + 18.0, esc(label));
    }

    fn linear_x_ticks(&mut self) {
        for i in 0..=5 {
            let v = self.x.0 + (self.x.1 - self.x.0) * i as f64 / 5.0;
            self.x_tick(v, &fmt_tick(v));
        }
    }

    fn legend(&mut self, entries: &[(String, &str)]) {
        for (i, (name, color)) in entries.iter().enumerate() {
            let y = TOP + 8.0 + 16.0 * i as f64;
            let x = W - RIGHT - 150.0;
            let _ = write!(self.svg, r#"<rect x="{x}" y="{}" width="10" height="10" fill="{color}"/>"#, y - 9.0);
            let _ = write!(self.svg, r#"<text x="{}" y="{y}">{}</text>"#, x + 15.0, esc(name));
        }
    }

    fn finish(mut self) -> String {
        self.svg.push_str("</svg>\n");
        self.svg
    }
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 || (v.abs() >= 0.01 && v.abs() < 1e4) {
        format!("{:.3}", v).trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.2e}")
    }
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.1).max(hi.abs() * 0.05).max(1e-6);
    (lo - pad, hi + pad)
}

/// Names and paths of what [`emit_plots`] produced.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct PlotFiles {
    pub written: Vec<(String, PathBuf, PathBuf)>,
    pub skipped: Vec<String>,
}

fn save(dir: &Path, name: &str, svg: String, csv: String, files: &mut PlotFiles) -> Result<()> {
    let svg_path = dir.join(format!("{name}.svg"));
    let csv_path = dir.join(format!("{name}.csv"));
    fs::write(&svg_path, svg).map_err(|e| Error::io(&svg_path, e))?;
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    files.written.push((name.to_string(), svg_path, csv_path));
    Ok(())
}

/// FLOPs against mIOU, one bubble per method, radius proportional to HP-Acc.
fn bubble(records: &[RunRecord]) -> Result<Option<(String, String)>> {
    let rows = emit_table(records)?.rows;
    if rows.iter().any(|r| !r.gflops.mean.is_finite()) {
        return Ok(None);
    }
    let mut csv = String::from("method,gflops,miou,hp_acc,radius\n");
    let radius = |hp: f64| 4.0 + 26.0 * hp;
    let (gx0, gx1) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, r| (a.0.min(r.gflops.mean), a.1.max(r.gflops.mean)));
    let (my0, my1) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, r| (a.0.min(r.miou.mean), a.1.max(r.miou.mean)));
    let mut f = Frame::new("Accuracy against compute (bubble radius: HP-Acc)", padded(gx0, gx1), padded(my0, my1), "GFLOPs", "mIOU");
    f.linear_x_ticks();
    let mut legend = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let rad = radius(r.hp_acc.mean);
        let _ = writeln!(csv, "{},{},{},{},{}", r.method, r.gflops.mean, r.miou.mean, r.hp_acc.mean, rad);
        let _ = write!(
            f.svg,
            r#"<circle cx="{}" cy="{}" r="{rad}" fill="{color}" fill-opacity="0.45" stroke="{color}"/>"#,
            f.px(r.gflops.mean),
            f.py(r.miou.mean)
        );
        legend.push((r.method.to_string(), color));
    }
    f.legend(&legend);
    Ok(Some((f.finish(), csv)))
}

/// Per-image mIOU distribution of each method, pooled over seeds.
fn result_histogram(records: &[RunRecord]) -> Result<Option<(String, String)>> {
    let mut methods: Vec<Method> = Vec::new();
    for r in records {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    methods.sort_by(|a, b| method_order(*a, *b));
    let edges = unit_edges(10);
    let mut series = Vec::new();
    for &m in &methods {
        let values: Vec<f64> = records
            .iter()
            .filter(|r| r.method == m)
            .flat_map(|r| r.report.per_image_miou.iter().copied())
            .collect();
        series.push((m, histogram(&values, &edges)?.counts));
    }
    let mut csv = String::from("bin_lo,bin_hi");
    for (m, _) in &series {
        let _ = write!(csv, ",{m}");
    }
    csv.push('\n');
    for b in 0..edges.len() - 1 {
        let _ = write!(csv, "{},{}", edges[b], edges[b + 1]);
        for (_, c) in &series {
            let _ = write!(csv, ",{}", c[b]);
        }
        csv.push('\n');
    }
    let peak = series.iter().flat_map(|(_, c)| c.iter().copied()).max().unwrap_or(0).max(1) as f64;
    let mut f = Frame::new("Distribution of per-image mIOU", (0.0, 1.0), (0.0, peak * 1.1), "per-image mIOU", "images");
    f.linear_x_ticks();
    let mut legend = Vec::new();
    let bin_w = f.px(edges[1]) - f.px(edges[0]);
    for (i, (m, counts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for (b, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let x = f.px(edges[b]);
            let y = f.py(c as f64);
            let _ = write!(
                f.svg,
                r#"<rect x="{x}" y="{y}" width="{bin_w}" height="{}" fill="{color}" fill-opacity="0.3" stroke="{color}"/>"#,
                f.py(0.0) - y
            );
        }
        legend.push((m.to_string(), color));
    }
    f.legend(&legend);
    Ok(Some((f.finish(), csv)))
}

/// HP-Acc and mIOU of the ESD runs against r. The x axis is categorical
/// with one tick per r value.
fn r_sweep(records: &[RunRecord]) -> Result<Option<(String, String)>> {
    let mut rs: Vec<f64> = records.iter().filter_map(|r| r.method.ratio()).collect();
    rs.sort_by(f64::total_cmp);
    rs.dedup();
    if rs.is_empty() {
        return Ok(None);
    }
    let mut csv = String::from("r,miou,hp_acc\n");
    let mut points = Vec::new();
    for &r in &rs {
        let group: Vec<&RunRecord> = records.iter().filter(|x| x.method.ratio() == Some(r)).collect();
        let miou = Spread::of(&group.iter().map(|x| x.report.miou).collect::<Vec<_>>()).mean;
        let hp = Spread::of(&group.iter().map(|x| x.report.hp_acc).collect::<Vec<_>>()).mean;
        let _ = writeln!(csv, "{r},{miou},{hp}");
        points.push((miou, hp));
    }
    let n = rs.len();
    let mut f = Frame::new("HP-Acc and mIOU across r", (-0.5, n as f64 - 0.5), (0.0, 1.0), "r", "score");
    for (i, r) in rs.iter().enumerate() {
        f.x_tick(i as f64, &fmt_tick(*r));
    }
    for (k, (name, color)) in [("mIOU", PALETTE[0]), ("HP-Acc", PALETTE[1])].iter().enumerate() {
        let pts: Vec<String> = points
            .iter()
            .enumerate()
            .map(|(i, p)| format!("{},{}", f.px(i as f64), f.py(if k == 0 { p.0 } else { p.1 })))
            .collect();
        let _ = write!(f.svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" "));
        for p in &pts {
            let (x, y) = p.split_once(',').expect("formatted pair");
            let _ = write!(f.svg, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
        }
        let _ = name;
    }
    f.legend(&[("mIOU".into(), PALETTE[0]), ("HP-Acc".into(), PALETTE[1])]);
    Ok(Some((f.finish(), csv)))
}

/// HP-Acc bar per method annotated with the variance of per-image mIOU.
fn hp_var_bars(records: &[RunRecord]) -> Result<Option<(String, String)>> {
    let rows = emit_table(records)?.rows;
    let mut csv = String::from("method,hp_acc,var\n");
    let n = rows.len();
    let mut f = Frame::new("HP-Acc with variance of mIOU", (-0.5, n as f64 - 0.5), (0.0, 1.0), "method", "HP-Acc");
    let bar_w = (W - LEFT - RIGHT) / n as f64 * 0.6;
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(csv, "{},{},{}", r.method, r.hp_acc.mean, r.var.mean);
        f.x_tick(i as f64, &r.method.to_string());
        let x = f.px(i as f64) - bar_w / 2.0;
        let y = f.py(r.hp_acc.mean);
        let _ = write!(
            f.svg,
            r#"<rect x="{x}" y="{y}" width="{bar_w}" height="{}" fill="{}"/>"#,
            f.py(0.0) - y,
            PALETTE[i % PALETTE.len()]
        );
        let _ = write!(
            f.svg,
            r#"<text x="{}" y="{}" text-anchor="middle">var {:.2}e-3</text>"#,
            f.px(i as f64),
            y - 5.0,
            r.var.mean * 1e3
        );
    }
    Ok(Some((f.finish(), csv)))
}

pub const PLOT_NAMES: [&str; 4] = ["bubble", "histogram", "r_sweep", "hp_var"];

/// Writes the four comparison plots into `dir`. A plot whose data is
/// missing (for example the r sweep without ESD runs) is skipped with a
/// warning.
pub fn emit_plots(records: &[RunRecord], dir: &Path) -> Result<PlotFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = PlotFiles::default();
    type Builder = fn(&[RunRecord]) -> Result<Option<(String, String)>>;
    let builders: [Builder; 4] = [bubble, result_histogram, r_sweep, hp_var_bars];
    for (name, build) in PLOT_NAMES.iter().zip(builders) {
        match build(records)? {
            Some((svg, csv)) => save(dir, name, svg, csv, &mut files)?,
            None => {
                log::warn!("plot `{name}` skipped: records lack the data it needs");
                files.skipped.push(name.to_string());
            }
        }
    }
    Ok(files)
}

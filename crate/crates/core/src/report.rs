//! Diff-stable CSV and SVG output.
//!
//! Numbers are written with 9 significant digits, non-finite values as
//! `nan`, `inf` or `-inf`, and missing values as empty fields. Every CSV
//! carries a header row, also when empty. SVGs use fixed geometry, fonts
//! and palette, so identical inputs give byte-identical files; empty inputs
//! give no SVG.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{MatchingRow, NUM_HEADS, NUM_LAYERS};
use crate::interventions::InterventionOutcome;
use crate::probing::ProbeEvalRow;
use crate::robustness::{OcclusionSceneRow, PatchHeads, StudyKind, StudyReport};
use crate::tensor_io::{atomic_write, Result, TensorIoError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Svg,
    #[default]
    Both,
}

impl OutputFormat {
    pub fn csv(self) -> bool {
        self != Self::Svg
    }

    pub fn svg(self) -> bool {
        self != Self::Csv
    }
}

impl FromStr for OutputFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "csv" => Ok(Self::Csv),
            "svg" => Ok(Self::Svg),
            "both" => Ok(Self::Both),
            other => Err(format!(
                "unknown format {other:?}; expected csv, svg or both"
            )),
        }
    }
}

/// `v` with 9 significant digits: fixed notation for exponents in
/// `-5..9`, scientific otherwise, trailing zeros dropped.
pub fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{v:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_num).unwrap_or_default()
}

fn csv_table(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

pub fn matching_csv(rows: &[MatchingRow]) -> String {
    csv_table(
        &["layer", "head", "direction", "accuracy", "n_pairs"],
        rows.iter().map(|r| {
            vec![
                r.layer.to_string(),
                r.head.to_string(),
                r.direction.label().into(),
                fmt_num(r.accuracy),
                r.n_pairs.to_string(),
            ]
        }),
    )
}

/// A 24 × 16 matrix as `layer,h0,…,h15`.
pub fn matrix_csv(matrix: &[Vec<f64>]) -> String {
    let mut header = vec!["layer".to_string()];
    header.extend((0..NUM_HEADS).map(|h| format!("h{h}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    csv_table(
        &header,
        matrix.iter().enumerate().map(|(l, row)| {
            std::iter::once(l.to_string())
                .chain(row.iter().map(|&v| fmt_num(v)))
                .collect()
        }),
    )
}

pub fn heads_matched_csv(rows: &[PatchHeads]) -> String {
    csv_table(
        &["scene", "patch", "clean", "occluded", "delta"],
        rows.iter().map(|r| {
            let c = &r.comparison;
            vec![
                r.scene.clone(),
                c.patch.to_string(),
                c.clean.to_string(),
                c.occluded.to_string(),
                c.delta().to_string(),
            ]
        }),
    )
}

pub fn probe_csv(rows: &[ProbeEvalRow]) -> String {
    csv_table(
        &[
            "layer",
            "split",
            "root_sampson_px",
            "singular_ratio",
            "rank2",
        ],
        rows.iter().map(|r| {
            vec![
                r.layer.to_string(),
                r.split.clone(),
                fmt_num(r.root_sampson_px),
                fmt_num(r.singular_ratio),
                crate::geometry::is_effectively_rank2(r.singular_ratio).to_string(),
            ]
        }),
    )
}

pub fn intervention_csv(rows: &[InterventionOutcome]) -> String {
    csv_table(
        &["label", "baseline_px", "intervened_px", "delta"],
        rows.iter().map(|r| {
            vec![
                r.label.clone(),
                fmt_num(r.baseline_px),
                fmt_num(r.intervened_px),
                fmt_num(r.delta),
            ]
        }),
    )
}

pub fn study_csv(report: &StudyReport) -> String {
    csv_table(
        &[
            "condition",
            "mode",
            "focal_mm",
            "method",
            "n",
            "failures",
            "failure_rate",
            "median_root_sampson_px",
        ],
        report.rows.iter().map(|r| {
            vec![
                r.condition.clone(),
                r.mode.clone().unwrap_or_default(),
                fmt_opt(r.focal_mm),
                r.method.name().into(),
                r.n.to_string(),
                r.failures.to_string(),
                fmt_num(r.failure_rate),
                fmt_opt(r.median_root_sampson_px),
            ]
        }),
    )
}

pub fn occlusion_scenes_csv(rows: &[OcclusionSceneRow]) -> String {
    csv_table(
        &["scene", "method", "clean_px", "occluded_px", "delta"],
        rows.iter().map(|r| {
            vec![
                r.scene.clone(),
                r.method.name().into(),
                fmt_opt(r.clean_px),
                fmt_opt(r.occluded_px),
                fmt_opt(r.delta()),
            ]
        }),
    )
}

/// Parses [`matrix_csv`] output back into rows of values.
pub fn parse_matrix_csv(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| TensorIoError::Parse {
            line: i as u64 + 2,
            message: e.to_string(),
        })?;
        let row: std::result::Result<Vec<f64>, _> =
            rec.iter().skip(1).map(str::parse::<f64>).collect();
        out.push(row.map_err(|e| TensorIoError::Parse {
            line: i as u64 + 2,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// A report as saved next to its CSV/SVG, for re-rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "data", rename_all = "snake_case")]
pub enum SavedReport {
    Matching(Vec<MatchingRow>),
    Probe(Vec<ProbeEvalRow>),
    Intervention(Vec<InterventionOutcome>),
    Study(StudyReport),
}

/// One output file pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub stem: String,
    pub csv: String,
    pub svg: Option<String>,
}

impl SavedReport {
    pub fn render(&self) -> Vec<Rendered> {
        let one = |stem: &str, csv: String, svg: Option<String>| Rendered {
            stem: stem.into(),
            csv,
            svg,
        };
        match self {
            Self::Matching(rows) => {
                let mut out = vec![one("matching", matching_csv(rows), None)];
                for dir in crate::scene::Direction::BOTH {
                    if rows.iter().any(|r| r.direction == dir) {
                        let m = crate::attention::accuracy_matrix(rows, dir);
                        let stem = format!("matching_{}", dir.label().replace("->", "to"));
                        out.push(Rendered {
                            svg: matching_svg(&m, dir.label()),
                            csv: matrix_csv(&m),
                            stem,
                        });
                    }
                }
                out
            }
            Self::Probe(rows) => vec![one("probe", probe_csv(rows), probe_svg(rows))],
            Self::Intervention(rows) => vec![one(
                "intervention",
                intervention_csv(rows),
                intervention_svg(rows),
            )],
            Self::Study(report) => {
                let mut out = vec![one("study", study_csv(report), study_svg(report))];
                if let Some(occ) = &report.occlusion {
                    out.push(one(
                        "occlusion_scenes",
                        occlusion_scenes_csv(&occ.per_scene),
                        None,
                    ));
                    let patches = occ
                        .heads
                        .as_ref()
                        .map(|h| h.per_patch.as_slice())
                        .unwrap_or_default();
                    out.push(one("heads_matched", heads_matched_csv(patches), None));
                }
                out
            }
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| TensorIoError::Invalid(format!("report: {e}")))
    }
}

/// Writes every rendered file plus `<stem>.json` of the first output.
pub fn write_report(
    dir: &Path,
    report: &SavedReport,
    format: OutputFormat,
) -> Result<Vec<PathBuf>> {
    let rendered = report.render();
    let mut out = Vec::new();
    for r in &rendered {
        out.extend(write_outputs(
            dir,
            &r.stem,
            &r.csv,
            r.svg.as_deref(),
            format,
        )?);
    }
    let p = dir.join(format!("{}.json", rendered[0].stem));
    atomic_write(&p, report.to_json().as_bytes())?;
    out.push(p);
    Ok(out)
}

const FONT: &str = "DejaVu Sans, Arial, sans-serif";
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#7f7f7f",
];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Coordinate with two decimals.
fn c(v: f64) -> String {
    format!("{v:.2}")
}

/// Short axis label with 3 significant digits.
fn tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let e = v.abs().log10().floor() as i32;
    if (-3..5).contains(&e) {
        trim_zeros(format!("{v:.*}", (2 - e).max(0) as usize))
    } else {
        let s = format!("{v:.2e}");
        let (m, x) = s.split_once('e').expect("scientific format");
        format!("{}e{x}", trim_zeros(m.to_string()))
    }
}

fn svg_open(w: f64, h: f64, title: &str) -> String {
    let mut s = String::new();
    writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\" font-family=\"{FONT}\" font-size=\"11\">",
        c(w),
        c(h),
        c(w),
        c(h)
    )
    .unwrap();
    writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>").unwrap();
    writeln!(
        s,
        "<text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
        c(w / 2.0),
        esc(title)
    )
    .unwrap();
    s
}

/// Accuracy-style heatmap of a layers × heads matrix on [0, 1]; NaN cells
/// are grey.
pub fn heatmap_svg(matrix: &[Vec<f64>], title: &str) -> Option<String> {
    if matrix.is_empty() || matrix.iter().all(|r| r.iter().all(|v| v.is_nan())) {
        return None;
    }
    let (cw, ch, left, top) = (26.0, 16.0, 56.0, 40.0);
    let cols = matrix.iter().map(Vec::len).max().unwrap_or(0);
    let (w, h) = (
        left + cw * cols as f64 + 90.0,
        top + ch * matrix.len() as f64 + 40.0,
    );
    let mut s = svg_open(w, h, title);
    for (l, row) in matrix.iter().enumerate() {
        let y = top + ch * l as f64;
        writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{l}</text>",
            c(left - 6.0),
            c(y + ch * 0.75)
        )
        .unwrap();
        for (hd, &v) in row.iter().enumerate() {
            let fill = if v.is_nan() {
                "#cccccc".to_string()
            } else {
                let a = v.clamp(0.0, 1.0);
                let ch = |lo: f64, hi: f64| (lo + (hi - lo) * a).round() as u8;
                format!(
                    "#{:02x}{:02x}{:02x}",
                    ch(247.0, 8.0),
                    ch(251.0, 48.0),
                    ch(255.0, 107.0)
                )
            };
            writeln!(
                s,
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{fill}\"><title>layer {l} head {hd}: {}</title></rect>",
                c(left + cw * hd as f64),
                c(y),
                c(cw),
                c(ch),
                fmt_num(v)
            )
            .unwrap();
        }
    }
    let bottom = top + ch * matrix.len() as f64;
    for hd in 0..cols {
        writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{hd}</text>",
            c(left + cw * (hd as f64 + 0.5)),
            c(bottom + 14.0)
        )
        .unwrap();
    }
    writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">head</text>",
        c(left + cw * cols as f64 / 2.0),
        c(bottom + 30.0)
    )
    .unwrap();
    writeln!(s, "<text x=\"14\" y=\"{}\" transform=\"rotate(-90 14 {})\" text-anchor=\"middle\">layer</text>", c(top + (bottom - top) / 2.0), c(top + (bottom - top) / 2.0)).unwrap();
    let lx = left + cw * cols as f64 + 20.0;
    for (i, (label, fill)) in [("1", "#08306b"), ("0", "#f7fbff")].iter().enumerate() {
        let y = top + 24.0 * i as f64;
        writeln!(s, "<rect x=\"{}\" y=\"{}\" width=\"14\" height=\"14\" fill=\"{fill}\" stroke=\"#999999\"/>", c(lx), c(y)).unwrap();
        writeln!(
            s,
            "<text x=\"{}\" y=\"{}\">{label}</text>",
            c(lx + 20.0),
            c(y + 11.0)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    Some(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Line plot, one polyline per series in the given order. Non-finite
/// points are skipped; `log_y` plots log10 of positive values.
pub fn line_svg(
    series: &[Series],
    title: &str,
    x_label: &str,
    y_label: &str,
    log_y: bool,
) -> Option<String> {
    let tf = |y: f64| if log_y { y.log10() } else { y };
    let usable = |&(x, y): &(f64, f64)| x.is_finite() && y.is_finite() && (!log_y || y > 0.0);
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied().filter(usable))
        .map(|(x, y)| (x, tf(y)))
        .collect();
    if pts.is_empty() {
        return None;
    }
    let (mut x0, mut x1) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
            (a.min(p.0), b.max(p.0))
        });
    let (mut y0, mut y1) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
            (a.min(p.1), b.max(p.1))
        });
    if x1 == x0 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 == y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let (left, top, pw, ph) = (70.0, 36.0, 480.0, 280.0);
    let (w, h) = (left + pw + 200.0, top + ph + 50.0);
    let px = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;
    let mut s = svg_open(w, h, title);
    writeln!(
        s,
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#333333\"/>",
        c(left),
        c(top),
        c(pw),
        c(ph)
    )
    .unwrap();
    for i in 0..=4 {
        let yv = y0 + (y1 - y0) * f64::from(i) / 4.0;
        let label = if log_y {
            tick(10f64.powf(yv))
        } else {
            tick(yv)
        };
        writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
            c(left - 6.0),
            c(py(yv) + 4.0),
            esc(&label)
        )
        .unwrap();
        let xv = x0 + (x1 - x0) * f64::from(i) / 4.0;
        writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            c(px(xv)),
            c(top + ph + 16.0),
            esc(&tick(xv))
        )
        .unwrap();
    }
    writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        c(left + pw / 2.0),
        c(top + ph + 36.0),
        esc(x_label)
    )
    .unwrap();
    let ym = top + ph / 2.0;
    let y_text = if log_y {
        format!("{y_label} (log)")
    } else {
        y_label.to_string()
    };
    writeln!(
        s,
        "<text x=\"16\" y=\"{}\" transform=\"rotate(-90 16 {})\" text-anchor=\"middle\">{}</text>",
        c(ym),
        c(ym),
        esc(&y_text)
    )
    .unwrap();
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = ser
            .points
            .iter()
            .copied()
            .filter(usable)
            .map(|(x, y)| format!("{},{}", c(px(x)), c(py(tf(y)))))
            .collect();
        if !coords.is_empty() {
            writeln!(
                s,
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
                coords.join(" ")
            )
            .unwrap();
        }
        let ly = top + 14.0 + 18.0 * i as f64;
        writeln!(
            s,
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{color}\" stroke-width=\"2\"/>",
            c(left + pw + 16.0),
            c(ly - 4.0),
            c(left + pw + 36.0),
            c(ly - 4.0)
        )
        .unwrap();
        writeln!(
            s,
            "<text x=\"{}\" y=\"{}\">{}</text>",
            c(left + pw + 42.0),
            c(ly),
            esc(&ser.name)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    Some(s)
}

/// Vertical bars around a zero line; non-finite values get an empty bar
/// labeled with their value.
pub fn bar_svg(bars: &[(String, f64)], title: &str, y_label: &str) -> Option<String> {
    if bars.is_empty() {
        return None;
    }
    let finite: Vec<f64> = bars.iter().map(|b| b.1).filter(|v| v.is_finite()).collect();
    let hi = finite.iter().copied().fold(0.0f64, f64::max);
    let lo = finite.iter().copied().fold(0.0f64, f64::min);
    let (lo, hi) = if hi == lo { (lo, lo + 1.0) } else { (lo, hi) };
    let (left, top, ph, bw) = (70.0, 36.0, 260.0, 36.0);
    let pw = bw * bars.len() as f64 * 1.5;
    let (w, h) = (left + pw + 30.0, top + ph + 150.0);
    let py = |y: f64| top + ph - (y - lo) / (hi - lo) * ph;
    let mut s = svg_open(w, h, title);
    writeln!(
        s,
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#333333\"/>",
        c(left),
        c(py(0.0)),
        c(left + pw),
        c(py(0.0))
    )
    .unwrap();
    for i in 0..=4 {
        let yv = lo + (hi - lo) * f64::from(i) / 4.0;
        writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
            c(left - 6.0),
            c(py(yv) + 4.0),
            esc(&tick(yv))
        )
        .unwrap();
    }
    let ym = top + ph / 2.0;
    writeln!(
        s,
        "<text x=\"16\" y=\"{}\" transform=\"rotate(-90 16 {})\" text-anchor=\"middle\">{}</text>",
        c(ym),
        c(ym),
        esc(y_label)
    )
    .unwrap();
    for (i, (label, v)) in bars.iter().enumerate() {
        let x = left + bw * (0.25 + 1.5 * i as f64);
        let color = PALETTE[0];
        if v.is_finite() {
            let (a, b) = (py(*v).min(py(0.0)), py(*v).max(py(0.0)));
            writeln!(s, "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{color}\"><title>{}: {}</title></rect>", c(x), c(a), c(bw), c(b - a), esc(label), fmt_num(*v)).unwrap();
        } else {
            writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
                c(x + bw / 2.0),
                c(top + 12.0),
                fmt_num(*v)
            )
            .unwrap();
        }
        let lx = x + bw / 2.0;
        let ly = top + ph + 12.0;
        writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" transform=\"rotate(45 {} {})\">{}</text>",
            c(lx),
            c(ly),
            c(lx),
            c(ly),
            esc(label)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    Some(s)
}

/// Root Sampson against layer, one polyline per split.
pub fn probe_svg(rows: &[ProbeEvalRow]) -> Option<String> {
    let mut splits: Vec<&str> = Vec::new();
    for r in rows {
        if !splits.contains(&r.split.as_str()) {
            splits.push(&r.split);
        }
    }
    let series: Vec<Series> = splits
        .iter()
        .map(|&sp| Series {
            name: sp.to_string(),
            points: rows
                .iter()
                .filter(|r| r.split == sp)
                .map(|r| (f64::from(r.layer), r.root_sampson_px))
                .collect(),
        })
        .collect();
    if rows.is_empty() {
        return None;
    }
    line_svg(
        &series,
        "Probe root Sampson error by layer",
        "layer",
        "root Sampson (px)",
        true,
    )
}

pub fn intervention_svg(rows: &[InterventionOutcome]) -> Option<String> {
    let bars: Vec<(String, f64)> = rows.iter().map(|r| (r.label.clone(), r.delta)).collect();
    bar_svg(
        &bars,
        "Change in median root Sampson under knockout",
        "delta (px)",
    )
}

/// Focal sweeps as failure rate against focal length, one line per mode
/// and method; other studies as bars per condition and method.
pub fn study_svg(report: &StudyReport) -> Option<String> {
    if report.rows.is_empty() {
        return None;
    }
    if report.study == StudyKind::FocalSweep {
        let mut series: Vec<Series> = Vec::new();
        for r in &report.rows {
            let name = format!("{} {}", r.mode.as_deref().unwrap_or(""), r.method.name());
            let point = (r.focal_mm.unwrap_or(f64::NAN), r.failure_rate);
            match series.iter_mut().find(|s| s.name == name) {
                Some(s) => s.points.push(point),
                None => series.push(Series {
                    name,
                    points: vec![point],
                }),
            }
        }
        return line_svg(
            &series,
            &format!("{}: failure rate", report.label),
            "focal length (mm)",
            "failure rate",
            false,
        );
    }
    let bars: Vec<(String, f64)> = report
        .rows
        .iter()
        .map(|r| {
            (
                format!("{} {}", r.condition, r.method.name()),
                r.failure_rate,
            )
        })
        .collect();
    bar_svg(
        &bars,
        &format!("{}: failure rate", report.label),
        "failure rate",
    )
}

pub fn matching_svg(matrix: &[Vec<f64>], direction_label: &str) -> Option<String> {
    debug_assert!(matrix.len() <= NUM_LAYERS as usize);
    heatmap_svg(
        matrix,
        &format!("Correspondence matching accuracy ({direction_label})"),
    )
}

/// Writes `<dir>/<stem>.csv` and, when present, `<dir>/<stem>.svg` as the
/// format allows. Returns the files written.
pub fn write_outputs(
    dir: &Path,
    stem: &str,
    csv: &str,
    svg: Option<&str>,
    format: OutputFormat,
) -> Result<Vec<PathBuf>> {
    if stem.is_empty() || stem.contains(['/', '\\']) {
        return Err(TensorIoError::Invalid(format!("bad report name {stem:?}")));
    }
    let mut out = Vec::new();
    if format.csv() {
        let p = dir.join(format!("{stem}.csv"));
        atomic_write(&p, csv.as_bytes())?;
        out.push(p);
    }
    if let (true, Some(svg)) = (format.svg(), svg) {
        let p = dir.join(format!("{stem}.svg"));
        atomic_write(&p, svg.as_bytes())?;
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::robustness::{ConditionRow, Method};
    use crate::scene::Direction;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(fmt_num(1.0), "1");
        assert_eq!(fmt_num(0.1 + 0.2), "0.3");
        assert_eq!(fmt_num(std::f64::consts::PI), "3.14159265");
        assert_eq!(fmt_num(-2.5e-7), "-2.5e-7");
        assert_eq!(fmt_num(123456789.4), "123456789");
        assert_eq!(fmt_num(1.234567891e12), "1.23456789e12");
        assert_eq!(fmt_num(9.9999999999), "10");
        assert_eq!(fmt_num(-0.0), "0");
        assert_eq!(fmt_num(f64::NAN), "nan");
        assert_eq!(fmt_num(f64::NEG_INFINITY), "-inf");
        assert_eq!(fmt_num(0.000123), "0.000123");
    }

    #[test]
    fn nine_digits_round_trip_within_half_ulp_of_the_ninth_digit() {
        for &v in &[1.0 / 3.0, 2.0f64.sqrt() * 1e-9, 6.02214076e23, 1e-300, 0.5] {
            let back: f64 = fmt_num(v).parse().unwrap();
            assert!(((back - v) / v).abs() <= 5e-9, "{v} -> {}", fmt_num(v));
        }
    }

    #[test]
    fn empty_reports_have_headers_and_no_svg() {
        assert_eq!(
            probe_csv(&[]),
            "layer,split,root_sampson_px,singular_ratio,rank2\n"
        );
        assert_eq!(
            intervention_csv(&[]),
            "label,baseline_px,intervened_px,delta\n"
        );
        assert_eq!(matching_csv(&[]), "layer,head,direction,accuracy,n_pairs\n");
        assert!(probe_svg(&[]).is_none());
        assert!(intervention_svg(&[]).is_none());
        let dir = tempfile::tempdir().unwrap();
        let written = write_outputs(
            dir.path(),
            "probe",
            &probe_csv(&[]),
            probe_svg(&[]).as_deref(),
            OutputFormat::Both,
        )
        .unwrap();
        assert_eq!(written, vec![dir.path().join("probe.csv")]);
    }

    fn probe_rows() -> Vec<ProbeEvalRow> {
        let mut rows = Vec::new();
        for split in ["train", "test"] {
            for layer in 0..24 {
                rows.push(ProbeEvalRow {
                    layer,
                    split: split.into(),
                    root_sampson_px: 100.0 / f64::from(layer + 1),
                    singular_ratio: 0.01,
                    n_scenes: 3,
                    n_excluded: 0,
                });
            }
        }
        rows
    }

    #[test]
    fn sweep_plots_one_polyline_per_split() {
        let svg = probe_svg(&probe_rows()).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg, probe_svg(&probe_rows()).unwrap());
        let csv = probe_csv(&probe_rows());
        assert_eq!(csv.lines().count(), 49);
        assert_eq!(csv.lines().nth(2).unwrap(), "1,train,50,0.01,false");
        let mut flagged = probe_rows();
        flagged[0].singular_ratio = 9.99e-4;
        assert!(probe_csv(&flagged)
            .lines()
            .nth(1)
            .unwrap()
            .ends_with(",0.000999,true"));
    }

    #[test]
    fn heatmap_has_a_cell_per_entry() {
        let mut m = vec![vec![0.5; 16]; 24];
        m[3][4] = f64::NAN;
        let svg = heatmap_svg(&m, "t").unwrap();
        assert_eq!(svg.matches("<title>layer").count(), 24 * 16);
        assert!(svg.contains("#cccccc"));
        assert!(heatmap_svg(&vec![vec![f64::NAN; 16]; 24], "t").is_none());
        let csv = matrix_csv(&m);
        assert!(csv.starts_with("layer,h0,h1,"));
        assert_eq!(csv.lines().count(), 25);
        assert!(csv.contains("3,0.5,0.5,0.5,0.5,nan,"));
    }

    #[test]
    fn matrices_and_saved_reports_round_trip() {
        let mut m = vec![vec![0.125; 16]; 24];
        m[0][0] = f64::NAN;
        let back = parse_matrix_csv(&matrix_csv(&m)).unwrap();
        assert!(back[0][0].is_nan());
        assert_eq!(back[23][15], 0.125);
        let saved = SavedReport::Probe(probe_rows());
        assert_eq!(SavedReport::from_json(&saved.to_json()).unwrap(), saved);
        let dir = tempfile::tempdir().unwrap();
        let files = write_report(dir.path(), &saved, OutputFormat::Both).unwrap();
        let names: Vec<String> = files
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, ["probe.csv", "probe.svg", "probe.json"]);
    }

    #[test]
    fn csv_quotes_labels_with_commas() {
        let rows = vec![InterventionOutcome {
            label: "mid, k=4".into(),
            baseline_px: 1.0,
            intervened_px: f64::INFINITY,
            delta: f64::INFINITY,
            per_scene: Vec::new(),
        }];
        assert_eq!(
            intervention_csv(&rows).lines().nth(1).unwrap(),
            "\"mid, k=4\",1,inf,inf"
        );
        let svg = intervention_svg(&rows).unwrap();
        assert!(svg.contains(">inf</text>"));
        let m = vec![MatchingRow {
            layer: 2,
            head: 3,
            direction: Direction::TwoToOne,
            accuracy: 0.25,
            n_pairs: 8,
        }];
        assert_eq!(matching_csv(&m).lines().nth(1).unwrap(), "2,3,2->1,0.25,8");
    }

    #[test]
    fn study_outputs() {
        let row = |focal: f64, rate: f64| ConditionRow {
            condition: format!("small/{focal}mm"),
            mode: Some("small".into()),
            focal_mm: Some(focal),
            method: Method::EightPointOnFile,
            n: 4,
            failures: (rate * 4.0) as usize,
            failure_rate: rate,
            median_root_sampson_px: None,
        };
        let report = StudyReport {
            study: StudyKind::FocalSweep,
            label: "sweep".into(),
            rows: vec![row(24.0, 0.0), row(100.0, 0.5)],
            occlusion: None,
            incomplete: Vec::new(),
        };
        let csv = study_csv(&report);
        assert_eq!(
            csv.lines().nth(2).unwrap(),
            "small/100mm,small,100,eight_point_on_file,4,2,0.5,"
        );
        assert_eq!(study_svg(&report).unwrap().matches("<polyline").count(), 1);
        let bars = StudyReport {
            study: StudyKind::Ambiguity,
            ..report
        };
        assert!(study_svg(&bars).unwrap().contains("<rect x="));
    }
}

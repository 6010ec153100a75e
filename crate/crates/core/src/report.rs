//! Report emission from the JSON-lines record store: summary CSV, SVG
//! figures and the MSE table.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::training::experiments::median;
use crate::training::records::{summary_rows, ExperimentRecord, SUMMARY_COLUMNS};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no records for report kind `{0}`")]
    Empty(&'static str),
    #[error("missing records: {}", .0.join("; "))]
    Missing(Vec<String>),
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, ReportError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    /// Error against head width.
    Sweep,
    /// Attention-graph heatmaps.
    Gravity,
    /// The 2x2x2 MSE grid.
    Table1,
}

impl ReportKind {
    pub fn name(self) -> &'static str {
        match self {
            ReportKind::Sweep => "sweep",
            ReportKind::Gravity => "gravity",
            ReportKind::Table1 => "table1",
        }
    }
}

impl std::str::FromStr for ReportKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sweep" => Ok(ReportKind::Sweep),
            "gravity" => Ok(ReportKind::Gravity),
            "table1" => Ok(ReportKind::Table1),
            _ => Err(format!("unknown report kind `{s}` (sweep, gravity, table1)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportFile {
    pub name: String,
    pub contents: String,
}

fn label<'a>(r: &'a ExperimentRecord, key: &str) -> Result<&'a str> {
    r.get(key)
        .ok_or_else(|| ReportError::Malformed(format!("{} record lacks label `{key}`", r.metric)))
}

fn parse<T: std::str::FromStr>(r: &ExperimentRecord, key: &str) -> Result<T> {
    label(r, key)?
        .parse()
        .map_err(|_| ReportError::Malformed(format!("label `{key}` of {} is not numeric", r.metric)))
}

fn summary_csv(records: &[ExperimentRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SUMMARY_COLUMNS)?;
    for row in summary_rows(records) {
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| ReportError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Builds every file of a report in memory.
pub fn build_report(records: &[ExperimentRecord], kind: ReportKind) -> Result<Vec<ReportFile>> {
    let own: Vec<ExperimentRecord> = records.iter().filter(|r| r.experiment == kind.name()).cloned().collect();
    if own.is_empty() {
        return Err(ReportError::Empty(kind.name()));
    }
    let mut files = vec![ReportFile {
        name: format!("{}_summary.csv", kind.name()),
        contents: summary_csv(&own)?,
    }];
    match kind {
        ReportKind::Sweep => {
            let panels = sweep_panels(&own)?;
            files.push(ReportFile {
                name: "sweep.svg".into(),
                contents: sweep_svg(&panels),
            });
        }
        ReportKind::Gravity => files.push(ReportFile {
            name: "gravity.svg".into(),
            contents: gravity_svg(&own)?,
        }),
        ReportKind::Table1 => files.push(ReportFile {
            name: "table1.txt".into(),
            contents: table1_text(&own)?,
        }),
    }
    Ok(files)
}

/// Writes a report into `dir`. Nothing is written unless every file could
/// be built.
pub fn emit_report(records: &[ExperimentRecord], kind: ReportKind, dir: &Path) -> Result<Vec<PathBuf>> {
    let files = build_report(records, kind)?;
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for f in files {
        let p = dir.join(&f.name);
        std::fs::write(&p, f.contents)?;
        paths.push(p);
    }
    Ok(paths)
}

// ---------------------------------------------------------------------------
// Sweep figure

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    /// `(m_h, error)` pairs in increasing `m_h`.
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPanel {
    pub alpha: String,
    pub series: Vec<Series>,
    /// `c * m^(1 - 2 alpha)` anchored at the first point of the
    /// infinite-rank curve (or the first curve when absent).
    pub reference: Series,
}

fn rank_order(r: &str) -> (u8, usize) {
    r.parse().map(|v| (0, v)).unwrap_or((1, 0))
}

/// Seed-median train error per `(alpha, r, m_h)`, checking that every cell
/// of the observed grid is present.
pub fn sweep_panels(records: &[ExperimentRecord]) -> Result<Vec<SweepPanel>> {
    let mut cells: BTreeMap<(String, String, usize), BTreeMap<u64, f64>> = BTreeMap::new();
    let (mut alphas, mut ranks, mut widths, mut seeds) = (BTreeSet::new(), BTreeSet::new(), BTreeSet::new(), BTreeSet::new());
    for r in records.iter().filter(|r| r.metric == "train_mse") {
        let alpha = label(r, "alpha")?.to_string();
        let rank = label(r, "r")?.to_string();
        let m_h: usize = parse(r, "m_h")?;
        let seed = r.seed.ok_or_else(|| ReportError::Malformed("sweep record without seed".into()))?;
        alphas.insert(alpha.clone());
        ranks.insert(rank.clone());
        widths.insert(m_h);
        seeds.insert(seed);
        cells.entry((alpha, rank, m_h)).or_default().insert(seed, r.value);
    }
    if cells.is_empty() {
        return Err(ReportError::Empty("sweep"));
    }
    let mut missing = Vec::new();
    for a in &alphas {
        for r in &ranks {
            for &m in &widths {
                for &s in &seeds {
                    let have = cells.get(&(a.clone(), r.clone(), m)).is_some_and(|c| c.contains_key(&s));
                    if !have {
                        missing.push(format!("alpha={a} r={r} m_h={m} seed={s}"));
                    }
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(ReportError::Missing(missing));
    }
    let mut ranks: Vec<String> = ranks.into_iter().collect();
    ranks.sort_by_key(|r| rank_order(r));
    let mut panels = Vec::new();
    for a in alphas {
        let alpha: f64 = a
            .parse()
            .map_err(|_| ReportError::Malformed(format!("alpha label `{a}` is not numeric")))?;
        let series: Vec<Series> = ranks
            .iter()
            .map(|r| Series {
                label: format!("r = {r}"),
                points: widths
                    .iter()
                    .map(|&m| {
                        let vals: Vec<f64> = cells[&(a.clone(), r.clone(), m)].values().copied().collect();
                        (m as f64, median(&vals))
                    })
                    .collect(),
            })
            .collect();
        let anchor_series = ranks.iter().position(|r| r == "inf").unwrap_or(0);
        let (m0, e0) = series[anchor_series].points[0];
        let slope = 1.0 - 2.0 * alpha;
        let reference = Series {
            label: format!("k^(1-2*{a})"),
            points: widths.iter().map(|&m| (m as f64, e0 * (m as f64 / m0).powf(slope))).collect(),
        };
        panels.push(SweepPanel { alpha: a, series, reference });
    }
    Ok(panels)
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn sweep_svg(panels: &[SweepPanel]) -> String {
    let (pw, ph, margin) = (360.0, 280.0, 50.0);
    let width = pw * panels.len() as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{ph}" font-family="sans-serif" font-size="11">"#
    );
    for (pi, panel) in panels.iter().enumerate() {
        let x0 = pw * pi as f64;
        let all: Vec<(f64, f64)> = panel
            .series
            .iter()
            .chain(std::iter::once(&panel.reference))
            .flat_map(|s| s.points.iter().copied())
            .filter(|p| p.0 > 0.0 && p.1 > 0.0)
            .collect();
        let lx: Vec<f64> = all.iter().map(|p| p.0.log10()).collect();
        let ly: Vec<f64> = all.iter().map(|p| p.1.log10()).collect();
        let (xmin, xmax) = bounds(&lx);
        let (ymin, ymax) = (bounds(&ly).0.floor(), bounds(&ly).1.ceil());
        let sx = |v: f64| x0 + margin + (v.log10() - xmin) / (xmax - xmin).max(1e-9) * (pw - 1.5 * margin);
        let sy = |v: f64| ph - margin - (v.log10() - ymin) / (ymax - ymin).max(1e-9) * (ph - 1.6 * margin);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="16" text-anchor="middle">alpha = {}</text>"#,
            x0 + pw / 2.0,
            panel.alpha
        );
        let _ = writeln!(
            s,
            r##"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="#444"/>"##,
            x0 + margin,
            0.6 * margin,
            pw - 1.5 * margin,
            ph - 1.6 * margin
        );
        for p in &panel.series[0].points {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
                sx(p.0),
                ph - margin + 14.0,
                p.0
            );
        }
        let mut e = ymin;
        while e <= ymax {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{:.2}" text-anchor="end">1e{}</text>"#,
                x0 + margin - 4.0,
                sy(10f64.powf(e)) + 4.0,
                e
            );
            e += 1.0;
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">m_h</text>"#,
            x0 + pw / 2.0,
            ph - 8.0
        );
        let mut line = |series: &Series, color: &str, dash: &str| {
            let pts: Vec<String> = series
                .points
                .iter()
                .filter(|p| p.0 > 0.0 && p.1 > 0.0)
                .map(|p| format!("{:.3},{:.3}", sx(p.0), sy(p.1)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{}"><title>{}</title></polyline>"#,
                pts.join(" "),
                series.label
            );
        };
        line(&panel.reference, "#999999", r#" stroke-dasharray="4 3""#);
        for (i, ser) in panel.series.iter().enumerate() {
            line(ser, COLORS[i % COLORS.len()], "");
        }
        for (i, ser) in panel.series.iter().chain(std::iter::once(&panel.reference)).enumerate() {
            let color = if i < panel.series.len() { COLORS[i % COLORS.len()] } else { "#999999" };
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
                x0 + pw - 0.5 * margin - 90.0,
                0.6 * margin + 14.0 * (i + 1) as f64,
                ser.label
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn bounds(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo.is_finite() && hi.is_finite() {
        (lo, hi)
    } else {
        (0.0, 1.0)
    }
}

// ---------------------------------------------------------------------------
// Gravity heatmaps

type Graphs = BTreeMap<usize, BTreeMap<(usize, usize), f64>>;

fn collect_graph(records: &[ExperimentRecord], metric: &str) -> Result<Graphs> {
    let mut out: Graphs = BTreeMap::new();
    for r in records.iter().filter(|r| r.metric == metric) {
        let sample = parse(r, "sample")?;
        out.entry(sample)
            .or_default()
            .insert((parse(r, "row")?, parse(r, "col")?), r.value);
    }
    Ok(out)
}

fn gravity_svg(records: &[ExperimentRecord]) -> Result<String> {
    let truth = collect_graph(records, "truth_graph")?;
    let learned = collect_graph(records, "learned_graph")?;
    let mut missing = Vec::new();
    for s in truth.keys().chain(learned.keys()).collect::<BTreeSet<_>>() {
        if !truth.contains_key(s) {
            missing.push(format!("truth_graph sample={s}"));
        }
        if !learned.contains_key(s) {
            missing.push(format!("learned_graph sample={s}"));
        }
    }
    if truth.is_empty() && learned.is_empty() {
        missing.push("truth_graph/learned_graph".into());
    }
    if !missing.is_empty() {
        return Err(ReportError::Missing(missing));
    }
    let agreement = records
        .iter()
        .find(|r| r.metric == "agreement" && r.get("model") == Some("trained"))
        .map(|r| format!("{:.3}", r.value));
    let tau = truth.values().next().map(|g| g.keys().map(|k| k.0).max().unwrap_or(0) + 1).unwrap_or(1);
    let cell = 24.0;
    let side = cell * tau as f64;
    let gap = 30.0;
    let top = 40.0;
    let width = 2.0 * side + 3.0 * gap;
    let height = top + (side + gap) * truth.len() as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{gap}" y="16">ground truth</text>"#);
    let _ = writeln!(s, r#"<text x="{}" y="16">attention</text>"#, 2.0 * gap + side);
    if let Some(a) = agreement {
        let _ = writeln!(s, r#"<text x="{gap}" y="30">mean off-diagonal correlation {a}</text>"#);
    }
    for (row_i, (sample, t)) in truth.iter().enumerate() {
        let y0 = top + row_i as f64 * (side + gap);
        heatmap(&mut s, t, tau, gap, y0, cell);
        heatmap(&mut s, &learned[sample], tau, 2.0 * gap + side, y0, cell);
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn heatmap(s: &mut String, g: &BTreeMap<(usize, usize), f64>, tau: usize, x0: f64, y0: f64, cell: f64) {
    let max = g.values().copied().fold(0.0, f64::max).max(1e-300);
    for i in 0..tau {
        for j in 0..tau {
            let v = g.get(&(i, j)).copied().unwrap_or(0.0) / max;
            let shade = (255.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8;
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)"/>"#,
                x0 + j as f64 * cell,
                y0 + i as f64 * cell
            );
        }
    }
}

// ---------------------------------------------------------------------------
// Table 1

pub const TABLE1_MODELS: [&str; 2] = ["rnn", "transformer"];
pub const TABLE1_ORDERS: [&str; 2] = ["with_order", "without_order"];
pub const TABLE1_VARIANTS: [&str; 2] = ["original", "permuted"];

/// Test MSE per `(model, order, variant)`; the last record of a cell wins.
pub fn table1_cells(records: &[ExperimentRecord]) -> Result<BTreeMap<(String, String, String), f64>> {
    let mut cells = BTreeMap::new();
    for r in records.iter().filter(|r| r.metric == "test_mse") {
        cells.insert(
            (label(r, "model")?.to_string(), label(r, "order")?.to_string(), label(r, "variant")?.to_string()),
            r.value,
        );
    }
    let mut missing = Vec::new();
    for m in TABLE1_MODELS {
        for o in TABLE1_ORDERS {
            for v in TABLE1_VARIANTS {
                if !cells.contains_key(&(m.to_string(), o.to_string(), v.to_string())) {
                    missing.push(format!("model={m} order={o} variant={v}"));
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(ReportError::Missing(missing));
    }
    Ok(cells)
}

fn table1_text(records: &[ExperimentRecord]) -> Result<String> {
    let cells = table1_cells(records)?;
    let mut s = String::new();
    let _ = writeln!(s, "{:<12} {:^23} {:^23}", "", "with_order", "without_order");
    let _ = writeln!(
        s,
        "{:<12} {:>11} {:>11} {:>11} {:>11}",
        "model", "original", "permuted", "original", "permuted"
    );
    for m in TABLE1_MODELS {
        let _ = write!(s, "{m:<12}");
        for o in TABLE1_ORDERS {
            for v in TABLE1_VARIANTS {
                let _ = write!(s, " {:>11.3e}", cells[&(m.to_string(), o.to_string(), v.to_string())]);
            }
        }
        s.push('\n');
    }
    Ok(s)
}

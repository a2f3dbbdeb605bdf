//! Cross-run comparison table and SVG line plots.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use fssl_core::eval::PersistencePoint;
use fssl_core::experiment::{
    read_metrics_csv, RoundMetrics, RunSummary, METRICS_FILE, SUMMARY_FILE,
};
use fssl_core::{FsslError, Result};
use serde::Serialize;

pub const TABLE_FILE: &str = "report.csv";
pub const ACC_PLOT: &str = "acc.svg";
pub const ASR_PLOT: &str = "asr.svg";
pub const PERSISTENCE_PLOT: &str = "persistence.svg";

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub metrics: Vec<RoundMetrics>,
    pub summary: Option<RunSummary>,
}

impl RunRecord {
    pub fn load(dir: &Path) -> Result<Self> {
        let metrics = read_metrics_csv(dir.join(METRICS_FILE))?;
        if metrics.is_empty() {
            return Err(FsslError::MissingMetrics(
                dir.join(METRICS_FILE).display().to_string(),
            ));
        }
        let summary = match fs::read_to_string(dir.join(SUMMARY_FILE)) {
            Ok(s) => Some(
                serde_json::from_str(&s)
                    .map_err(|e| FsslError::MalformedRecord(format!("{}: {e}", SUMMARY_FILE)))?,
            ),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(e.into()),
        };
        Ok(RunRecord {
            dir: dir.to_path_buf(),
            metrics,
            summary,
        })
    }

    pub fn label(&self) -> String {
        let base = self.dir.file_name().map_or_else(
            || self.dir.display().to_string(),
            |n| n.to_string_lossy().into_owned(),
        );
        match &self.summary {
            Some(s) if !s.config.name.is_empty() && s.config.name != base => {
                format!("{}/{base}", s.config.name)
            }
            _ => base,
        }
    }

    pub fn mu(&self) -> Option<f64> {
        self.summary.as_ref().map(|s| {
            if s.config.attack.enabled {
                s.config.attack.mu
            } else {
                0.0
            }
        })
    }

    fn persistence(&self) -> Option<&[PersistencePoint]> {
        self.summary.as_ref()?.persistence.as_deref()
    }
}

/// Run directories under `paths`: each path is either a run directory or a
/// directory whose immediate children are run directories.
pub fn discover(paths: &[PathBuf]) -> Result<Vec<RunRecord>> {
    let mut dirs = Vec::new();
    for p in paths {
        if p.join(METRICS_FILE).is_file() {
            dirs.push(p.clone());
            continue;
        }
        let mut children: Vec<PathBuf> = match fs::read_dir(p) {
            Ok(rd) => rd
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|c| c.join(METRICS_FILE).is_file())
                .collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        children.sort();
        dirs.extend(children);
    }
    if dirs.is_empty() {
        let names: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
        return Err(FsslError::MissingMetrics(format!(
            "no {METRICS_FILE} under {}",
            names.join(", ")
        )));
    }
    let mut runs = dirs
        .iter()
        .map(|d| RunRecord::load(d))
        .collect::<Result<Vec<_>>>()?;
    sort_by_mu(&mut runs);
    Ok(runs)
}

/// Ascending μ; runs without a summary go last; ties keep label order.
pub fn sort_by_mu(runs: &mut [RunRecord]) {
    runs.sort_by(|a, b| {
        let key = |r: &RunRecord| r.mu().unwrap_or(f64::INFINITY);
        key(a)
            .total_cmp(&key(b))
            .then_with(|| a.label().cmp(&b.label()))
    });
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TableRow {
    pub run: String,
    pub seed: Option<u64>,
    pub mu: Option<f64>,
    pub defense: String,
    pub rounds: usize,
    pub final_acc: f64,
    pub final_asr: f64,
    pub peak_asr: f64,
    pub final_retention: Option<f64>,
}

pub fn table(runs: &[RunRecord]) -> Vec<TableRow> {
    runs.iter()
        .map(|r| {
            let last = r.metrics.last().expect("loaded runs are non-empty");
            TableRow {
                run: r.label(),
                seed: r.summary.as_ref().map(|s| s.seed),
                mu: r.mu(),
                defense: last.defense.clone(),
                rounds: last.round,
                final_acc: last.acc,
                final_asr: last.asr,
                peak_asr: r.metrics.iter().map(|m| m.asr).fold(0.0, f64::max),
                final_retention: r.persistence().and_then(|p| p.last()?.retention),
            }
        })
        .collect()
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "-".into(), |v| v.to_string())
}

pub fn render_table(rows: &[TableRow]) -> String {
    let header = [
        "run",
        "seed",
        "mu",
        "defense",
        "rounds",
        "acc",
        "asr",
        "peak_asr",
        "retention%",
    ];
    let cells: Vec<[String; 9]> = rows
        .iter()
        .map(|r| {
            [
                r.run.clone(),
                opt(r.seed),
                opt(r.mu),
                r.defense.clone(),
                r.rounds.to_string(),
                format!("{:.4}", r.final_acc),
                format!("{:.4}", r.final_asr),
                format!("{:.4}", r.peak_asr),
                opt(r.final_retention.map(|v| format!("{v:.1}"))),
            ]
        })
        .collect();
    let mut width = header.map(str::len);
    for row in &cells {
        for (w, c) in width.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, row: &[String]| {
        let parts: Vec<String> = row
            .iter()
            .zip(&width)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        out.push_str(parts.join("  ").trim_end());
        out.push('\n');
    };
    line(&mut out, &header.map(String::from));
    line(&mut out, &width.map(|w| "-".repeat(w)));
    for row in &cells {
        line(&mut out, row);
    }
    out
}

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// A plain line chart with a legend; `y` is fixed to `y_range`.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    y_range: (f64, f64),
    series: &[Series],
) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 170.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| {
        (a.min(x), b.max(x))
    });
    let (x0, x1) = if x0.is_finite() && x1 > x0 {
        (x0, x1)
    } else {
        (0.0, 1.0)
    };
    let (y0, y1) = y_range;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (1.0 - (y.clamp(y0, y1) - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let y = y0 + f * (y1 - y0);
        let x = x0 + f * (x1 - x0);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{0:.1}" x2="{1}" y2="{0:.1}" stroke="#ddd"/>"##,
            sy(y),
            left + pw
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 6.0,
            sy(y) + 4.0,
            trim_num(y)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            sx(x),
            top + ph + 18.0,
            trim_num(x)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        top + ph / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = top + 10.0 + 16.0 * i as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            lx + 18.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}">{}</text>"#,
            lx + 24.0,
            ly + 4.0,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn trim_num(v: f64) -> String {
    let s = format!("{v:.2}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn metric_series(runs: &[RunRecord], f: impl Fn(&RoundMetrics) -> f64) -> Vec<Series> {
    runs.iter()
        .map(|r| Series {
            name: r.label(),
            points: r.metrics.iter().map(|m| (m.round as f64, f(m))).collect(),
        })
        .collect()
}

/// Writes the table and plots into `out`; returns the files written.
pub fn write_report(runs: &[RunRecord], out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let rows = table(runs);
    let path = out.join(TABLE_FILE);
    let mut wr =
        csv::Writer::from_path(&path).map_err(|e| FsslError::MalformedRecord(e.to_string()))?;
    for r in &rows {
        wr.serialize(r)
            .map_err(|e| FsslError::MalformedRecord(e.to_string()))?;
    }
    wr.flush()?;
    written.push(path);

    let acc = line_chart(
        "Clean accuracy",
        "round",
        "ACC",
        (0.0, 1.0),
        &metric_series(runs, |m| m.acc),
    );
    let asr = line_chart(
        "Attack success rate",
        "round",
        "ASR",
        (0.0, 1.0),
        &metric_series(runs, |m| m.asr),
    );
    for (name, svg) in [(ACC_PLOT, acc), (ASR_PLOT, asr)] {
        fs::write(out.join(name), svg)?;
        written.push(out.join(name));
    }

    let pers: Vec<Series> = runs
        .iter()
        .filter_map(|r| {
            let pts: Vec<(f64, f64)> = r
                .persistence()?
                .iter()
                .filter_map(|p| Some((p.round as f64, p.retention?)))
                .collect();
            (!pts.is_empty()).then(|| Series {
                name: r.label(),
                points: pts,
            })
        })
        .collect();
    if !pers.is_empty() {
        let top = pers
            .iter()
            .flat_map(|s| s.points.iter().map(|p| p.1))
            .fold(100.0, f64::max);
        let svg = line_chart(
            "Backdoor retention after the attack stops",
            "round",
            "retention %",
            (0.0, top),
            &pers,
        );
        fs::write(out.join(PERSISTENCE_PLOT), svg)?;
        written.push(out.join(PERSISTENCE_PLOT));
    }
    Ok(written)
}

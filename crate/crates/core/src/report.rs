//! Result reporting: per-batch trace CSV, running-estimate CSV, an SVG plot
//! of `p̂ ± σ̂` against sample count, and a plain-text summary table.
//!
//! The plot is drawn from the same running series that is written to
//! `running.csv`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::estimator::{RunningPoint, TraceRecord};
use crate::pipeline::ResultRecord;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no records to report")]
    Empty,
    #[error("{path}")]
    Io { path: String, source: std::io::Error },
    #[error("csv")]
    Csv(#[from] csv::Error),
    #[error("malformed trace row: {0}")]
    Malformed(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub trace_csv: PathBuf,
    pub running_csv: PathBuf,
    pub plot_svg: PathBuf,
    pub table_txt: PathBuf,
}

/// Label for a record; repeated methods get a numeric suffix.
fn labels(records: &[ResultRecord]) -> Vec<String> {
    let mut out = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let m = r.estimate.method.as_str();
        let same = records.iter().filter(|o| o.estimate.method == r.estimate.method).count();
        if same > 1 {
            let nth = records[..i].iter().filter(|o| o.estimate.method == r.estimate.method).count() + 1;
            out.push(format!("{m}-{nth}"));
        } else {
            out.push(m.to_string());
        }
    }
    out
}

pub fn emit_report(records: &[ResultRecord], out_dir: impl AsRef<Path>) -> Result<ReportFiles, ReportError> {
    if records.is_empty() {
        return Err(ReportError::Empty);
    }
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let labels = labels(records);
    let files = ReportFiles {
        trace_csv: dir.join("trace.csv"),
        running_csv: dir.join("running.csv"),
        plot_svg: dir.join("plot.svg"),
        table_txt: dir.join("table.txt"),
    };
    write_trace_csv(&files.trace_csv, records, &labels)?;
    write_running_csv(&files.running_csv, records, &labels)?;
    let series: Vec<(String, Vec<RunningPoint>)> = labels
        .iter()
        .cloned()
        .zip(records.iter().map(|r| r.estimate.running.clone()))
        .collect();
    std::fs::write(&files.plot_svg, render_svg(&series)).map_err(io_err(&files.plot_svg))?;
    std::fs::write(&files.table_txt, render_table(records, &labels)).map_err(io_err(&files.table_txt))?;
    Ok(files)
}

fn write_trace_csv(path: &Path, records: &[ResultRecord], labels: &[String]) -> Result<(), ReportError> {
    let d = records
        .iter()
        .flat_map(|r| r.estimate.trace.iter().map(|t| t.alpha.len()))
        .max()
        .unwrap_or(1);
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    let mut header: Vec<String> = ["method", "batch", "samples", "p_hat", "sigma_hat"].map(String::from).to_vec();
    header.extend((1..=d).map(|i| format!("alpha_{i}")));
    w.write_record(&header)?;
    for (r, label) in records.iter().zip(labels) {
        for t in &r.estimate.trace {
            let mut row = vec![
                label.clone(),
                t.batch.to_string(),
                t.samples.to_string(),
                t.p_hat.to_string(),
                t.sigma_hat.to_string(),
            ];
            row.extend((0..d).map(|i| t.alpha.get(i).map(f64::to_string).unwrap_or_default()));
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

fn write_running_csv(path: &Path, records: &[ResultRecord], labels: &[String]) -> Result<(), ReportError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    w.write_record(["method", "samples", "p_hat", "sigma_hat"])?;
    for (r, label) in records.iter().zip(labels) {
        for p in &r.estimate.running {
            w.write_record([label.clone(), p.samples.to_string(), p.p_hat.to_string(), p.sigma_hat.to_string()])?;
        }
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Parses a trace CSV back into `(label, records)` groups in file order.
/// `max_ratio` and `domain_exits` are not part of the CSV and come back as 0.
pub fn read_trace_csv(path: impl AsRef<Path>) -> Result<Vec<(String, Vec<TraceRecord>)>, ReportError> {
    let mut rd = csv::Reader::from_path(path.as_ref())?;
    let mut out: Vec<(String, Vec<TraceRecord>)> = Vec::new();
    for row in rd.records() {
        let row = row?;
        let num = |i: usize| -> Result<f64, ReportError> {
            row.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| ReportError::Malformed(format!("{row:?}")))
        };
        let label = row.get(0).unwrap_or_default().to_string();
        let alpha = (5..row.len())
            .filter(|&i| !row[i].is_empty())
            .map(num)
            .collect::<Result<Vec<_>, _>>()?;
        let rec = TraceRecord {
            batch: num(1)? as usize,
            samples: num(2)? as usize,
            p_hat: num(3)?,
            sigma_hat: num(4)?,
            alpha,
            max_ratio: 0.0,
            domain_exits: 0,
        };
        match out.last_mut() {
            Some((l, v)) if *l == label => v.push(rec),
            _ => out.push((label, vec![rec])),
        }
    }
    Ok(out)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// SVG 1.1 plot of `p̂` with a `±σ̂` band per series.
pub fn render_svg(series: &[(String, Vec<RunningPoint>)]) -> String {
    let (w, h) = (720.0, 420.0);
    let (left, right, top, bottom) = (80.0, 150.0, 20.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let pts = series.iter().flat_map(|s| s.1.iter());
    let x_max = pts.clone().map(|p| p.samples as f64).fold(1.0, f64::max);
    let y_max = pts
        .map(|p| p.p_hat + p.sigma_hat)
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max);
    let y_max = if y_max > 0.0 { y_max * 1.1 } else { 1e-3 };
    let sx = |x: f64| left + pw * x / x_max;
    let sy = |y: f64| top + ph * (1.0 - (y / y_max).clamp(0.0, 1.0));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">
<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#
    );
    // axes and ticks
    let _ = writeln!(
        s,
        r#"<path d="M{left} {top} V{} H{}" stroke="black" fill="none"/>"#,
        top + ph,
        left + pw
    );
    for i in 0..=5 {
        let fx = x_max * i as f64 / 5.0;
        let fy = y_max * i as f64 / 5.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.0}</text>"#,
            sx(fx),
            top + ph + 18.0,
            fx
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.2e}</text>"#,
            left - 6.0,
            sy(fy) + 4.0,
            fy
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">samples</text>"#,
        left + pw / 2.0,
        h - 10.0
    );
    for (k, (label, points)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<&RunningPoint> = points.iter().filter(|p| p.p_hat.is_finite()).collect();
        if !pts.is_empty() {
            let mut band = String::new();
            for p in &pts {
                let _ = write!(band, "{:.2},{:.2} ", sx(p.samples as f64), sy(p.p_hat + p.sigma_hat));
            }
            for p in pts.iter().rev() {
                let _ = write!(band, "{:.2},{:.2} ", sx(p.samples as f64), sy((p.p_hat - p.sigma_hat).max(0.0)));
            }
            let _ = writeln!(
                s,
                r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
                band.trim_end()
            );
            let line: Vec<String> = pts
                .iter()
                .map(|p| format!("{:.2},{:.2}", sx(p.samples as f64), sy(p.p_hat)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                line.join(" ")
            );
        }
        let ly = top + 16.0 + 20.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{:.1}" y="{:.1}" width="14" height="10" fill="{color}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            left + pw + 16.0,
            ly - 9.0,
            left + pw + 36.0,
            ly,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Summary table: one row per record, then the mixture weights of each
/// importance-sampling record.
pub fn render_table(records: &[ResultRecord], labels: &[String]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<10} {:>12} {:>12} {:>9} {:>10} {:>10}",
        "method", "p_hat", "sigma_hat", "samples", "setup_s", "sample_s"
    );
    for (r, label) in records.iter().zip(labels) {
        let e = &r.estimate;
        let _ = writeln!(
            s,
            "{:<10} {:>12.4e} {:>12.4e} {:>9} {:>10.3} {:>10.3}",
            label,
            e.p_hat,
            e.sigma_hat,
            e.samples_used,
            r.timings.closepoint + r.timings.isopt,
            r.timings.sampling
        );
    }
    for (r, label) in records.iter().zip(labels) {
        if r.components.len() < 2 {
            continue;
        }
        let _ = writeln!(s, "\nmixture weights ({label})");
        let _ = writeln!(
            s,
            "{:<4} {:<32} {:>8} {:>11} {:>9} {:>9}",
            "d", "mode", "maha", "halfspace", "alpha_1", "alpha_end"
        );
        for c in &r.components {
            let maha = c.mode.as_ref().map_or(String::from("-"), |m| format!("{:.3}", m.maha));
            let hs = c.halfspace_weight.map_or(String::from("-"), |v| format!("{v:.3e}"));
            let _ = writeln!(
                s,
                "{:<4} {:<32} {:>8} {:>11} {:>9.4} {:>9.4}",
                c.index, c.label, maha, hs, c.initial_weight, c.final_weight
            );
        }
    }
    s
}

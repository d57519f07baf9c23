//! Summaries of a run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Result};

use crate::files::load_metrics;

const PHASE_FILES: [(&str, &str); 4] = [
    ("gen-pretrain", "gen_pretrain_metrics.csv"),
    ("disc-pretrain", "disc_pretrain_metrics.csv"),
    ("gan", "gan_metrics.csv"),
    ("mrt", "mrt_metrics.csv"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub group: String,
    pub config: String,
    pub best_dev_bleu: Option<f64>,
    pub best_step: Option<usize>,
    pub final_disc_accuracy: Option<f64>,
}

fn summarize(group: &str, config: &str, path: &Path) -> Result<ReportRow> {
    let rows = load_metrics(path)?;
    let best = rows
        .iter()
        .filter_map(|r| r.dev_bleu.map(|b| (b, r.step)))
        .fold(None, |acc: Option<(f64, usize)>, x| match acc {
            Some(a) if a.0 >= x.0 => Some(a),
            _ => Some(x),
        });
    Ok(ReportRow {
        group: group.to_string(),
        config: config.to_string(),
        best_dev_bleu: best.map(|b| b.0),
        best_step: best.map(|b| b.1),
        final_disc_accuracy: rows.iter().rev().find_map(|r| r.disc_accuracy),
    })
}

/// Gather one row per phase and per sweep point found under `run`.
pub fn collect(run: &Path) -> Result<Vec<ReportRow>> {
    let mut out = Vec::new();
    for (group, file) in PHASE_FILES {
        let p = run.join(file);
        if p.is_file() {
            out.push(summarize(group, "-", &p)?);
        }
    }
    for (group, dir, key) in [("sweep-xi", "sweep_xi", "xi"), ("sweep-n", "sweep_n", "N")] {
        let d = run.join(dir);
        if !d.is_dir() {
            continue;
        }
        let mut points: Vec<(f64, std::path::PathBuf)> = Vec::new();
        for e in fs::read_dir(&d)? {
            let p = e?.path();
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if let Some(v) = name.strip_prefix("point_").and_then(|n| n.strip_suffix(".csv")) {
                points.push((v.parse()?, p.clone()));
            }
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (v, p) in points {
            out.push(summarize(group, &format!("{key}={v}"), &p)?);
        }
    }
    if out.is_empty() {
        bail!("no metrics found in {}", run.display());
    }
    Ok(out)
}

fn fmt_opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn render_text(rows: &[ReportRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<14} {:<10} {:>13} {:>9} {:>10}", "group", "config", "best_dev_bleu", "best_step", "disc_acc");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<14} {:<10} {:>13} {:>9} {:>10}",
            r.group,
            r.config,
            r.best_dev_bleu.map(|b| format!("{b:.4}")).unwrap_or_else(|| "-".into()),
            fmt_opt(r.best_step),
            r.final_disc_accuracy.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into()),
        );
    }
    s
}

pub fn render_csv(rows: &[ReportRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["group", "config", "best_dev_bleu", "best_step", "final_disc_accuracy"])?;
    for r in rows {
        w.write_record([
            r.group.clone(),
            r.config.clone(),
            fmt_opt(r.best_dev_bleu),
            fmt_opt(r.best_step),
            fmt_opt(r.final_disc_accuracy),
        ])?;
    }
    Ok(w.into_inner()?)
}

/// Write `report.txt` and `report.csv` into `run`, replacing earlier
/// reports. Returns the text table.
pub fn emit_report(run: &Path) -> Result<String> {
    let rows = collect(run)?;
    let text = render_text(&rows);
    fs::write(run.join("report.txt"), &text)?;
    fs::write(run.join("report.csv"), render_csv(&rows)?)?;
    Ok(text)
}

//! Aggregate finished run directories into one markdown summary with SVG
//! plots. Purely derived: reads CSV and JSON, never loads a model.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{LabError, Result};
use crate::runs::{
    aggregate_healing, aggregate_sweep, parse_healing_csv, parse_sweep_csv, sweep_svg, ProtocolStat, SteerRecord,
    SweepPoint,
};
use crate::{write_json, write_text};

#[derive(Debug, Clone, Serialize)]
pub struct SweepAggregate {
    pub source: PathBuf,
    pub label: String,
    pub points: Vec<SweepPoint>,
}

#[derive(Debug, Clone, Serialize)]
pub struct HealingAggregate {
    pub source: PathBuf,
    pub stats: Vec<ProtocolStat>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ReportBundle {
    pub runs: Vec<SteerRecord>,
    pub sweeps: Vec<SweepAggregate>,
    pub healing: Vec<HealingAggregate>,
    pub csv_paths: Vec<PathBuf>,
    pub svg_paths: Vec<PathBuf>,
    pub markdown: PathBuf,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))
}

fn read_record(path: &Path) -> Result<SteerRecord> {
    serde_json::from_str(&read(path)?).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))
}

fn label_of(dir: &Path) -> String {
    dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Steering summaries directly in `dir` or one level down, sorted by path.
fn steer_records(dir: &Path) -> Result<Vec<(PathBuf, SteerRecord)>> {
    let own = dir.join("summary.json");
    if own.is_file() && !dir.join("sweep.csv").exists() && !dir.join("healing.csv").exists() {
        return Ok(vec![(own.clone(), read_record(&own)?)]);
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path().join("summary.json")))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    paths.into_iter().map(|p| read_record(&p).map(|r| (p, r))).collect()
}

fn fmt(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        "nan".into()
    }
}

/// Aggregate `dirs` into `out/report.md`, `out/report.json`, and one SVG per
/// sweep or healing directory. Each directory must hold a sweep, a healing
/// experiment, or steering summaries.
pub fn cmd_report(dirs: &[PathBuf], out: &Path) -> Result<ReportBundle> {
    if dirs.is_empty() {
        return Err(LabError::Config("report needs at least one run directory".into()));
    }
    let mut bundle = ReportBundle::default();
    for dir in dirs {
        if !dir.is_dir() {
            return Err(LabError::Config(format!("{} is not a directory", dir.display())));
        }
        let sweep = dir.join("sweep.csv");
        let healing = dir.join("healing.csv");
        if sweep.is_file() {
            let rows = parse_sweep_csv(&read(&sweep)?, &sweep)?;
            if rows.is_empty() {
                return Err(LabError::Config(format!("{} has no rows", sweep.display())));
            }
            bundle.csv_paths.push(sweep);
            bundle.sweeps.push(SweepAggregate {
                source: dir.clone(),
                label: label_of(dir),
                points: aggregate_sweep(&rows),
            });
        } else if healing.is_file() {
            let rows = parse_healing_csv(&read(&healing)?, &healing)?;
            if rows.is_empty() {
                return Err(LabError::Config(format!("{} has no rows", healing.display())));
            }
            bundle.csv_paths.push(healing);
            bundle.healing.push(HealingAggregate {
                source: dir.clone(),
                stats: aggregate_healing(&rows),
            });
        } else {
            let records = steer_records(dir)?;
            if records.is_empty() {
                return Err(LabError::Config(format!("{} holds no run artifacts", dir.display())));
            }
            bundle.runs.extend(records.into_iter().map(|(_, r)| r));
        }
    }

    let mut md = String::from("# steerlab report\n\n");
    if !bundle.runs.is_empty() {
        md.push_str("## Steering runs\n\n");
        md.push_str("| paradigm | run | target | alpha | schedule | final distance | control distance | gain | config |\n");
        md.push_str("|---|---|---|---|---|---|---|---|---|\n");
        for r in &bundle.runs {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {} | {} | {} | {:.1}% | {} |",
                r.paradigm,
                r.run,
                r.target,
                r.guided.config.alpha,
                r.guided.config.schedule,
                fmt(r.final_hpe_distance),
                fmt(r.control_hpe_distance),
                100.0 * r.relative_gain,
                &r.config_hash[..12.min(r.config_hash.len())]
            );
        }
        md.push('\n');
    }
    for (i, s) in bundle.sweeps.iter().enumerate() {
        let svg = out.join(format!("sweep_{i}_{}.svg", s.label));
        write_text(
            &svg,
            &sweep_svg(&s.label, "value", &[(s.label.clone(), s.points.clone())], &s.source.display().to_string()),
        )?;
        let _ = writeln!(md, "## Sweep `{}`\n\n| value | mean | std | n |\n|---|---|---|---|", s.label);
        for p in &s.points {
            let _ = writeln!(md, "| {} | {} | {} | {} |", p.value, fmt(p.mean), fmt(p.std), p.n);
        }
        let _ = writeln!(md, "\n![{}]({})\n", s.label, svg.file_name().unwrap().to_string_lossy());
        bundle.svg_paths.push(svg);
    }
    for h in &bundle.healing {
        md.push_str("## Healing\n\n| paradigm | protocol | mean | std | n |\n|---|---|---|---|---|\n");
        for s in &h.stats {
            let _ = writeln!(md, "| {} | {} | {} | {} | {} |", s.paradigm, s.protocol, fmt(s.mean), fmt(s.std), s.n);
        }
        md.push('\n');
    }
    bundle.markdown = out.join("report.md");
    write_text(&bundle.markdown, &md)?;
    write_json(&out.join("report.json"), &bundle)?;
    Ok(bundle)
}

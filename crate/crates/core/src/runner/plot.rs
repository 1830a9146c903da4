use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::mean_defined;

/// Per-step all-seen PQ and mIoU of one run, in percentage points.
#[derive(Debug, Clone, PartialEq)]
pub struct RunCurve {
    pub name: String,
    pub pq: Vec<Option<f64>>,
    pub miou: Vec<Option<f64>>,
}

const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
const PANEL_W: f64 = 320.0;
const PANEL_H: f64 = 220.0;
const MARGIN: f64 = 40.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn panel(out: &mut String, x0: f64, title: &str, runs: &[RunCurve], pick: fn(&RunCurve) -> &[Option<f64>]) {
    let steps = runs.iter().map(|r| pick(r).len()).max().unwrap_or(0).max(2);
    let px = |s: usize| x0 + MARGIN + s as f64 * (PANEL_W - MARGIN) / (steps - 1) as f64;
    let py = |v: f64| MARGIN + (1.0 - v.clamp(0.0, 100.0) / 100.0) * (PANEL_H - MARGIN);
    let _ = writeln!(
        out,
        r##"<text x="{:.1}" y="20" font-size="13" text-anchor="middle">{}</text>"##,
        x0 + (MARGIN + PANEL_W) / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r##"<rect x="{:.1}" y="{MARGIN}" width="{:.1}" height="{:.1}" fill="none" stroke="#888"/>"##,
        x0 + MARGIN,
        PANEL_W - MARGIN,
        PANEL_H - MARGIN
    );
    for tick in [0.0, 50.0, 100.0] {
        let _ = writeln!(
            out,
            r##"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{tick}</text>"##,
            x0 + MARGIN - 4.0,
            py(tick) + 3.0
        );
    }
    for s in 0..steps {
        let _ = writeln!(
            out,
            r##"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{s}</text>"##,
            px(s),
            PANEL_H + 14.0
        );
    }
    for (i, run) in runs.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = pick(run)
            .iter()
            .enumerate()
            .filter_map(|(s, v)| v.map(|v| format!("{:.2},{:.2}", px(s), py(v))))
            .collect();
        if points.is_empty() {
            continue;
        }
        let _ = writeln!(
            out,
            r##"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"##,
            points.join(" ")
        );
    }
}

/// Two panels, PQ and mIoU against step, one line per run.
pub fn render_curves(runs: &[RunCurve]) -> String {
    let width = 2.0 * (PANEL_W + MARGIN) + 20.0;
    let legend_h = 16.0 * runs.len() as f64;
    let height = PANEL_H + 30.0 + legend_h + 10.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif">"##
    );
    panel(&mut out, 0.0, "PQ (all seen classes)", runs, |r| &r.pq);
    panel(&mut out, PANEL_W + MARGIN, "mIoU (all seen classes)", runs, |r| &r.miou);
    for (i, run) in runs.iter().enumerate() {
        let y = PANEL_H + 34.0 + 16.0 * i as f64;
        let color = COLORS[i % COLORS.len()];
        let _ = writeln!(
            out,
            r##"<line x1="{MARGIN}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}" font-size="11">{}</text>"##,
            y - 4.0,
            MARGIN + 20.0,
            y - 4.0,
            MARGIN + 26.0,
            y,
            escape(&run.name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Reads a `steps.csv` back into per-step means over the classes listed at
/// each step.
pub fn curve_from_csv(name: &str, text: &str) -> Result<RunCurve> {
    let mut lines = text.lines();
    if lines.next() != Some("step,class_id,pq,sq,rq,iou") {
        return Err(Error::Format("unexpected steps.csv header".into()));
    }
    let mut per_step: BTreeMap<usize, (Vec<Option<f64>>, Vec<Option<f64>>)> = BTreeMap::new();
    for (n, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Format(format!("steps.csv row {} has {} fields", n + 2, fields.len())));
        }
        let step: usize = fields[0]
            .parse()
            .map_err(|_| Error::Format(format!("bad step in row {}", n + 2)))?;
        let parse = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| Error::Format(format!("bad value {s:?}")))
            }
        };
        let e = per_step.entry(step).or_default();
        e.0.push(parse(fields[2])?);
        e.1.push(parse(fields[5])?);
    }
    Ok(RunCurve {
        name: name.to_string(),
        pq: per_step.values().map(|(pq, _)| mean_defined(pq.iter().copied())).collect(),
        miou: per_step.values().map(|(_, iou)| mean_defined(iou.iter().copied())).collect(),
    })
}

fn load_run(dir: &Path) -> Result<Option<RunCurve>> {
    let csv = dir.join("steps.csv");
    if !csv.is_file() {
        return Ok(None);
    }
    let name = fs::read_to_string(dir.join("summary.json"))
        .ok()
        .and_then(|s| serde_json::from_str::<serde_json::Value>(&s).ok())
        .and_then(|v| v.get("name").and_then(|n| n.as_str()).map(str::to_string))
        .unwrap_or_else(|| dir.file_name().map_or_else(|| "run".into(), |n| n.to_string_lossy().into_owned()));
    Ok(Some(curve_from_csv(&name, &fs::read_to_string(csv)?)?))
}

/// Collects the run in `dir` and every run directory directly below it.
pub fn collect_runs(dir: &Path) -> Result<Vec<RunCurve>> {
    let mut runs = Vec::new();
    runs.extend(load_run(dir)?);
    let mut children: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    children.sort();
    for child in children {
        runs.extend(load_run(&child)?);
    }
    if runs.is_empty() {
        return Err(Error::Config(format!("no steps.csv under {}", dir.display())));
    }
    Ok(runs)
}

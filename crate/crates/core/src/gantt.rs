//! Gantt chart output for one replica of a simulated mini-batch.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{RecordKind, SimulationResult, TaskRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GanttFormat {
    Svg,
    Csv,
}

impl GanttFormat {
    /// Picks the format from a file extension, defaulting to SVG.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => GanttFormat::Csv,
            _ => GanttFormat::Svg,
        }
    }
}

fn color(kind: RecordKind) -> &'static str {
    match kind {
        RecordKind::Forward => "#d62728",
        RecordKind::Backward => "#2ca02c",
        RecordKind::Recompute => "#ff7f0e",
        RecordKind::Allreduce => "#9467bd",
    }
}

fn rows(result: &SimulationResult, replica: usize) -> Vec<TaskRecord> {
    let mut rows: Vec<TaskRecord> = result.tasks.iter().filter(|t| t.replica == replica).copied().collect();
    rows.sort_by_key(|t| (t.stage, t.start, t.kind, t.micro_batch));
    rows
}

/// `stage,kind,microbatch,start_us,end_us`; allreduce rows leave the
/// micro-batch empty.
pub fn gantt_csv(result: &SimulationResult, replica: usize) -> String {
    let mut out = String::from("stage,kind,microbatch,start_us,end_us\n");
    for t in rows(result, replica) {
        let mb = t.micro_batch.map(|j| (j + 1).to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{}", t.stage + 1, t.kind.letter(), mb, t.start.0, t.end.0);
    }
    out
}

const LEFT: f64 = 70.0;
const TOP: f64 = 30.0;
const WIDTH: f64 = 960.0;
const ROW: f64 = 26.0;

/// One row per stage, one `rect` per interval.
pub fn gantt_svg(result: &SimulationResult, replica: usize) -> String {
    let rows = rows(result, replica);
    let stages = result.num_stages.max(1);
    let span = rows.iter().map(|t| t.end.0).max().unwrap_or(0).max(1) as f64;
    let height = TOP + ROW * stages as f64 + 40.0;
    let x = |us: u64| LEFT + WIDTH * us as f64 / span;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{height}" font-family="sans-serif" font-size="11">"#,
        LEFT + WIDTH + 20.0
    );
    let axis_y = TOP + ROW * stages as f64;
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{axis_y}" x2="{}" y2="{axis_y}" stroke="black"/>"#, LEFT + WIDTH);
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{axis_y}" stroke="black"/>"#);
    for i in 0..=5 {
        let us = (span * i as f64 / 5.0) as u64;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.3}s</text>"#,
            x(us),
            axis_y + 16.0,
            us as f64 / 1e6
        );
    }
    for k in 0..result.num_stages {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">stage {}</text>"#,
            LEFT - 6.0,
            TOP + ROW * k as f64 + ROW * 0.65,
            k + 1
        );
    }
    for t in &rows {
        let y = TOP + ROW * t.stage as f64 + 3.0;
        let w = (x(t.end.0) - x(t.start.0)).max(0.5);
        let label = match t.micro_batch {
            Some(j) => format!("{}{}", t.kind.letter(), j + 1),
            None => t.kind.letter().to_string(),
        };
        let _ = writeln!(
            s,
            r#"<rect class="task" x="{:.2}" y="{y:.1}" width="{w:.2}" height="{:.1}" fill="{}" stroke="white" stroke-width="0.5"><title>{label} {}-{}us</title></rect>"#,
            x(t.start.0),
            ROW - 6.0,
            color(t.kind),
            t.start.0,
            t.end.0
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn render_gantt(result: &SimulationResult, out: impl AsRef<Path>, format: GanttFormat, replica: usize) -> Result<()> {
    let body = match format {
        GanttFormat::Svg => gantt_svg(result, replica),
        GanttFormat::Csv => gantt_csv(result, replica),
    };
    std::fs::write(out.as_ref(), body).map_err(|source| Error::Io { path: out.as_ref().to_path_buf(), source })
}

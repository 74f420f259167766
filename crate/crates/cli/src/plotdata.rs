//! Long-format plot tables (`series,x,y,y_err`) derived from a summary.

use std::collections::BTreeMap;
use std::path::Path;

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::summary::{read_trace_csv, Stat, Summary};

pub const PLOT_HEADER: &str = "series,x,y,y_err";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    /// Mean relative error (or outer loss when no reference exists) per iteration.
    Convergence,
    /// Total wall seconds against problem size.
    Scaling,
    /// Mean of every final value and metric.
    MetricBars,
}

struct Row {
    series: String,
    x: String,
    y: f64,
    y_err: f64,
}

fn series_name(summary: &Summary, group: &str, solver: &str) -> String {
    if summary.groups.len() > 1 {
        format!("{group}/{solver}")
    } else {
        solver.to_string()
    }
}

/// Renders the table; `base` resolves the trace paths stored in the summary.
pub fn emit_plotdata(summary: &Summary, base: &Path, kind: PlotKind) -> CliResult<String> {
    let mut rows = Vec::new();
    for g in &summary.groups {
        for s in &g.solvers {
            let series = series_name(summary, &g.label, &s.solver);
            match kind {
                PlotKind::Convergence => {
                    let mut by_iter: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
                    for run in &s.runs {
                        for r in read_trace_csv(&base.join(&run.csv))? {
                            by_iter
                                .entry(r.iter)
                                .or_default()
                                .push(r.theta_rel_err.unwrap_or(r.ol_value));
                        }
                    }
                    for (iter, ys) in by_iter {
                        let st = Stat::of(&ys).expect("non-empty by construction");
                        rows.push(Row {
                            series: series.clone(),
                            x: iter.to_string(),
                            y: st.mean.0,
                            y_err: st.std.0,
                        });
                    }
                }
                PlotKind::Scaling => {
                    if let Some(st) = s.stat("wall_s") {
                        rows.push(Row {
                            series: series.clone(),
                            x: g.x.to_string(),
                            y: st.mean.0,
                            y_err: st.std.0,
                        });
                    }
                }
                PlotKind::MetricBars => {
                    for (name, st) in &s.stats {
                        rows.push(Row {
                            series: series.clone(),
                            x: name.clone(),
                            y: st.mean.0,
                            y_err: st.std.0,
                        });
                    }
                }
            }
        }
    }
    if kind == PlotKind::Scaling {
        // Series-major so every line is contiguous.
        rows.sort_by(|a, b| a.series.cmp(&b.series));
    }
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let err = |e: csv::Error| CliError::Config(e.to_string());
    w.write_record(PLOT_HEADER.split(',')).map_err(err)?;
    for r in rows {
        w.write_record([r.series, r.x, r.y.to_string(), r.y_err.to_string()])
            .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv of UTF-8 fields"))
}

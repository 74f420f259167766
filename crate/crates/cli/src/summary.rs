//! Per-run CSV rows and the experiment summary document.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use bilevel_gr::solvers::{IterRecord, TraceFlags};
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{CliError, CliResult, DivergenceRecord};

/// Column order of every per-run CSV.
pub const CSV_HEADER: [&str; 10] = [
    "iter",
    "theta_rel_err",
    "ol_rel_err",
    "ol_value",
    "cl_value",
    "grad_norm_theta",
    "wall_ms",
    "grad_evals",
    "hvp_evals",
    "peak_bytes",
];

/// One CSV line. Missing relative errors are empty cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub theta_rel_err: Option<f64>,
    pub ol_rel_err: Option<f64>,
    pub ol_value: f64,
    pub cl_value: f64,
    pub grad_norm_theta: f64,
    pub wall_ms: f64,
    pub grad_evals: u64,
    pub hvp_evals: u64,
    pub peak_bytes: u64,
}

impl TraceRow {
    /// `phi_star` turns `ol_value` into a relative error against the optimum.
    pub fn from_record(r: &IterRecord, phi_star: Option<f64>, record_wall_time: bool) -> Self {
        Self {
            iter: r.iter,
            theta_rel_err: r.theta_rel_err,
            ol_rel_err: phi_star.map(|p| bilevel_gr::metrics::relative_error(&[r.ol_value], &[p]).0),
            ol_value: r.ol_value,
            cl_value: r.cl_value,
            grad_norm_theta: r.grad_norm_theta,
            wall_ms: if record_wall_time { r.wall_ms } else { 0.0 },
            grad_evals: r.grad_eval_count,
            hvp_evals: r.hvp_eval_count,
            peak_bytes: r.peak_tracked_bytes,
        }
    }

    /// Named final values used by the summary statistics.
    pub fn finals(&self) -> BTreeMap<String, Num> {
        let mut m = BTreeMap::new();
        if let Some(v) = self.theta_rel_err {
            m.insert("theta_rel_err".into(), Num(v));
        }
        if let Some(v) = self.ol_rel_err {
            m.insert("ol_rel_err".into(), Num(v));
        }
        m.insert("ol_value".into(), Num(self.ol_value));
        m.insert("cl_value".into(), Num(self.cl_value));
        m.insert("grad_norm_theta".into(), Num(self.grad_norm_theta));
        m.insert("wall_s".into(), Num(self.wall_ms / 1e3));
        m.insert("grad_evals".into(), Num(self.grad_evals as f64));
        m.insert("hvp_evals".into(), Num(self.hvp_evals as f64));
        m.insert("peak_bytes".into(), Num(self.peak_bytes as f64));
        m
    }
}

pub fn write_trace_csv(rows: &[TraceRow]) -> CliResult<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| CliError::Config(e.to_string()))
}

pub fn read_trace_csv(path: &Path) -> CliResult<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = r
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_string)
        .collect();
    if header != CSV_HEADER {
        return Err(CliError::Config(format!("{}: unexpected header {header:?}", path.display())));
    }
    r.deserialize()
        .collect::<Result<Vec<TraceRow>, _>>()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Config(e.to_string())
}

/// A float that survives JSON round trips when non-finite: finite values
/// are numbers, the rest are the strings `"NaN"`, `"inf"` and `"-inf"`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Num(pub f64);

impl Serialize for Num {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let v = self.0;
        if v.is_finite() {
            s.serialize_f64(v)
        } else if v.is_nan() {
            s.serialize_str("NaN")
        } else if v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }
}

impl<'de> Deserialize<'de> for Num {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Num;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number, \"NaN\", \"inf\" or \"-inf\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Num, E> {
                Ok(Num(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Num, E> {
                Ok(Num(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Num, E> {
                Ok(Num(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Num, E> {
                match v {
                    "NaN" => Ok(Num(f64::NAN)),
                    "inf" => Ok(Num(f64::INFINITY)),
                    "-inf" => Ok(Num(f64::NEG_INFINITY)),
                    _ => Err(E::invalid_value(de::Unexpected::Str(v), &self)),
                }
            }
        }
        d.deserialize_any(V)
    }
}

/// Mean and sample standard deviation (0 for a single value).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: Num,
    pub std: Num,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Stat {
            mean: Num(mean),
            std: Num(std),
            n,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub repeat: usize,
    pub seed: u64,
    /// Trace path relative to the summary file.
    pub csv: String,
    pub status: String,
    pub iterations: usize,
    pub stop_iter: Option<usize>,
    pub diverged_at: Option<usize>,
    pub flags: TraceFlags,
    /// Values of the last CSV row.
    #[serde(rename = "final")]
    pub final_values: BTreeMap<String, Num>,
    /// Problem-specific end-of-run metrics.
    pub metrics: BTreeMap<String, Num>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverSummary {
    pub solver: String,
    /// Effective solver configuration.
    pub config: serde_json::Value,
    pub runs: Vec<RunSummary>,
    pub status_counts: BTreeMap<String, usize>,
    /// Over repeats, for every final value and metric.
    pub stats: BTreeMap<String, Stat>,
}

impl SolverSummary {
    pub fn new(solver: String, config: serde_json::Value, runs: Vec<RunSummary>) -> Self {
        let mut status_counts = BTreeMap::new();
        let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for run in &runs {
            *status_counts.entry(run.status.clone()).or_insert(0) += 1;
            columns
                .entry("iterations".into())
                .or_default()
                .push(run.iterations as f64);
            for (k, v) in run.final_values.iter().chain(&run.metrics) {
                columns.entry(k.clone()).or_default().push(v.0);
            }
        }
        let stats = columns
            .into_iter()
            .filter_map(|(k, v)| Stat::of(&v).map(|s| (k, s)))
            .collect();
        Self {
            solver,
            config,
            runs,
            status_counts,
            stats,
        }
    }

    pub fn stat(&self, key: &str) -> Option<Stat> {
        self.stats.get(key).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub label: String,
    /// Problem size for scaling plots.
    pub x: f64,
    pub theta_star: Option<Vec<f64>>,
    pub phi_star: Option<Num>,
    pub solvers: Vec<SolverSummary>,
}

impl GroupSummary {
    pub fn solver(&self, name: &str) -> Option<&SolverSummary> {
        self.solvers.iter().find(|s| s.solver == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: String,
    pub seed: u64,
    pub repeats: usize,
    pub record_wall_time: bool,
    pub groups: Vec<GroupSummary>,
    /// Mandatory runs that diverged.
    pub diverged: Vec<DivergenceRecord>,
}

impl Summary {
    pub fn load(path: &Path) -> CliResult<Summary> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn group(&self, label: &str) -> Option<&GroupSummary> {
        self.groups.iter().find(|g| g.label == label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn num_round_trips_non_finite() {
        for v in [1.5, f64::NAN, f64::INFINITY, f64::NEG_INFINITY, 0.0] {
            let s = serde_json::to_string(&Num(v)).unwrap();
            let back: Num = serde_json::from_str(&s).unwrap();
            assert!(back.0 == v || (v.is_nan() && back.0.is_nan()), "{s}");
        }
    }

    #[test]
    fn stat_uses_sample_std() {
        let s = Stat::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean.0, 2.0);
        assert_eq!(s.std.0, 1.0);
        assert_eq!(Stat::of(&[4.0]).unwrap().std.0, 0.0);
        assert!(Stat::of(&[]).is_none());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let rows = vec![
            TraceRow {
                iter: 0,
                theta_rel_err: Some(0.1 + 0.2),
                ol_rel_err: None,
                ol_value: -1.0 / 3.0,
                cl_value: 1e-300,
                grad_norm_theta: f64::NAN,
                wall_ms: 0.0,
                grad_evals: 5,
                hvp_evals: 0,
                peak_bytes: 64,
            };
            2
        ];
        let bytes = write_trace_csv(&rows).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with(&CSV_HEADER.join(",")));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        std::fs::write(&p, bytes).unwrap();
        let back = read_trace_csv(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].theta_rel_err, rows[0].theta_rel_err);
        assert_eq!(back[0].ol_value, rows[0].ol_value);
        assert_eq!(back[0].ol_rel_err, None);
        assert!(back[0].grad_norm_theta.is_nan());
    }
}

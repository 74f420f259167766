use serde::{Deserialize, Serialize};

use super::config::Variant;
use crate::param::ParamVector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Converged,
    MaxIters,
    Diverged,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Converged => "converged",
            Status::MaxIters => "max_iters",
            Status::Diverged => "diverged",
        }
    }
}

/// One row of a solver trace. Counters and `wall_ms` are cumulative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub theta_rel_err: Option<f64>,
    pub ol_value: f64,
    pub cl_value: f64,
    pub grad_norm_theta: f64,
    pub wall_ms: f64,
    pub grad_eval_count: u64,
    pub hvp_eval_count: u64,
    pub peak_tracked_bytes: u64,
    /// Minibatch handle used by this iteration.
    pub batch: u64,
}

/// Reference optimum for error curves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub theta: ParamVector,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceFlags {
    /// Iterations where the rank-one response degenerated to zero.
    pub degenerate_response: u64,
    pub cg_negative_curvature: u64,
    pub neumann_diverged: u64,
    /// Finite-difference probes whose two evaluations were identical.
    pub fd_step_underflow: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverTrace {
    pub variant: Variant,
    pub records: Vec<IterRecord>,
    pub status: Status,
    /// Outer iterations actually performed.
    pub iterations: usize,
    /// Iteration at which the stopping rule fired.
    pub stop_iter: Option<usize>,
    /// Inner step (within `iterations`) that produced a non-finite value.
    pub diverged_at: Option<usize>,
    pub flags: TraceFlags,
    pub theta: ParamVector,
    pub omega: ParamVector,
}

impl SolverTrace {
    pub fn last(&self) -> Option<&IterRecord> {
        self.records.last()
    }

    pub fn total_wall_ms(&self) -> f64 {
        self.last().map_or(0.0, |r| r.wall_ms)
    }
}

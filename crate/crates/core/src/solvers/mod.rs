//! Bilevel solution strategies sharing one oracle interface and trace
//! format: ADI, FastGR, implicit CG, Neumann, RHG, T-RHG and BDA.

mod config;
mod counting;
mod run;
pub mod steps;
mod trace;

pub use config::{SolverConfig, UpdateRule, Variant};
pub use counting::Counted;
pub use run::{batch_for, run_solver};
pub use steps::{
    fast_gr_from_grads, fast_gr_response, implicit_cg_response, inner_descent, neumann_response,
    rank_one_pipeline, rhg_hypergradient, total_hypergradient, unrolled_hypergradient, InnerDiverged, Response,
};
pub use trace::{IterRecord, Reference, SolverTrace, Status, TraceFlags};

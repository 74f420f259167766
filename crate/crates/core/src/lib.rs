//! Bilevel optimization with first-order gradient-response hypergradients.
//!
//! A bilevel problem is exposed through [`BilevelOracle`]: an outer
//! (leader) objective `F_OL(theta, omega)` and an inner (follower)
//! objective `F_CL(theta, omega)`, both differentiable. Solvers in
//! [`solvers`] estimate the hypergradient of `theta -> F_OL(theta, omega*(theta))`
//! where `omega*` minimizes the inner objective.
//!
//! [`FastGR`](Variant::FastGr) replaces the inverse-Hessian term of the
//! implicit-function hypergradient with a rank-one surrogate built from three
//! gradients, so one outer step costs no Hessian-vector products. The other
//! variants are baselines (alternating descent, conjugate-gradient and
//! Neumann implicit solves, reverse and truncated reverse unrolling, and
//! aggregated unrolling).

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod blob;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod param;
pub mod problems;
pub mod selftest;
pub mod solvers;

pub use error::{Error, Result};
pub use oracle::{BatchId, BilevelOracle, Dims, SelfTestReport};
pub use param::ParamVector;
pub use solvers::{run_solver, Reference, SolverConfig, SolverTrace, Status, UpdateRule, Variant};

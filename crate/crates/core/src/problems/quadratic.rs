//! Coupled quadratic pair used as a hypergradient reference:
//! `F_OL = |theta|^2 + |omega|^2`, `F_CL = |omega - theta|^2`.
//!
//! The inner solution is `omega(theta) = theta`, so the value function is
//! `phi(theta) = 2 |theta|^2` with gradient `4 theta`.

use crate::oracle::{BatchId, BilevelOracle, Dims};
use crate::param::ParamVector;

#[derive(Clone, Debug)]
pub struct QuadraticPair {
    dim: usize,
}

impl QuadraticPair {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }

    pub fn value_function_grad(theta: &[f64]) -> ParamVector {
        theta.iter().map(|t| 4.0 * t).collect()
    }
}

impl BilevelOracle for QuadraticPair {
    fn dims(&self) -> Dims {
        Dims::new(self.dim, self.dim)
    }

    fn f_ol(&self, theta: &[f64], omega: &[f64], _batch: BatchId) -> f64 {
        theta.iter().chain(omega).map(|x| x * x).sum()
    }

    fn f_cl(&self, theta: &[f64], omega: &[f64], _batch: BatchId) -> f64 {
        omega.iter().zip(theta).map(|(w, t)| (w - t) * (w - t)).sum()
    }

    fn grad_theta_ol(&self, theta: &[f64], _omega: &[f64], _batch: BatchId) -> ParamVector {
        theta.iter().map(|t| 2.0 * t).collect()
    }

    fn grad_omega_ol(&self, _theta: &[f64], omega: &[f64], _batch: BatchId) -> ParamVector {
        omega.iter().map(|w| 2.0 * w).collect()
    }

    fn grad_theta_cl(&self, theta: &[f64], omega: &[f64], _batch: BatchId) -> ParamVector {
        omega.iter().zip(theta).map(|(w, t)| -2.0 * (w - t)).collect()
    }

    fn grad_omega_cl(&self, theta: &[f64], omega: &[f64], _batch: BatchId) -> ParamVector {
        omega.iter().zip(theta).map(|(w, t)| 2.0 * (w - t)).collect()
    }

    fn hvp_omega_omega_cl(&self, _t: &[f64], _w: &[f64], v: &[f64], _b: BatchId) -> Option<ParamVector> {
        Some(v.iter().map(|x| 2.0 * x).collect())
    }

    fn cross_vjp_cl(&self, _t: &[f64], _w: &[f64], u: &[f64], _b: BatchId) -> Option<ParamVector> {
        Some(u.iter().map(|x| -2.0 * x).collect())
    }

    fn name(&self) -> &str {
        "quadratic"
    }
}

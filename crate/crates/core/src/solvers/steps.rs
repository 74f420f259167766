//! Building blocks of one outer iteration: inner descent, the response
//! term `G_R` (rank-one closed form, CG, Neumann, unrolled reverse mode) and
//! the total hypergradient.

use crate::error::Result;
use crate::linalg::{cg_solve, neumann_hypergrad, rank_one_min_norm_solve, FnOperator, DEGENERATE_GRAD_NORM};
use crate::oracle::{self, directional_fd, BatchId, BilevelOracle};
use crate::param::{dot, ParamVector};

/// Inner gradient descent produced a non-finite iterate at `step` (0-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InnerDiverged {
    pub step: usize,
}

/// `steps` plain gradient-descent updates on `F_CL` with `theta` fixed.
pub fn inner_descent<O: BilevelOracle + ?Sized>(
    oracle: &O,
    theta: &[f64],
    omega_start: &[f64],
    alpha: f64,
    steps: usize,
    batch: BatchId,
) -> std::result::Result<ParamVector, InnerDiverged> {
    let mut omega = ParamVector::from(omega_start);
    for step in 0..steps {
        let g = oracle.grad_omega_cl(theta, &omega, batch);
        omega.axpy(-alpha, &g);
        oracle.project_omega(&mut omega);
        if !omega.is_finite() {
            return Err(InnerDiverged { step });
        }
    }
    Ok(omega)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Response {
    pub g_r: ParamVector,
    /// The inner gradient vanished and the response was set to zero.
    pub degenerate: bool,
}

/// `G_R = -g_th * (g_cl . g_ol) / (g_cl . g_cl)` from the three first-order
/// gradients at `(theta, omega_hat)`.
pub fn fast_gr_from_grads(g_th: &[f64], g_ol: &[f64], g_cl: &[f64]) -> Response {
    let gg = dot(g_cl, g_cl);
    if gg.sqrt() < DEGENERATE_GRAD_NORM {
        return Response {
            g_r: ParamVector::zeros(g_th.len()),
            degenerate: true,
        };
    }
    let ratio = dot(g_cl, g_ol) / gg;
    Response {
        g_r: g_th.iter().map(|t| -t * ratio).collect(),
        degenerate: false,
    }
}

/// Same quantity as [`fast_gr_from_grads`], assembled the long way: solve
/// `(g_cl g_cl^T) B = -g_ol` in the minimum-norm sense and apply the
/// transposed cross outer product `(g_cl g_th^T)^T`.
pub fn rank_one_pipeline(g_th: &[f64], g_ol: &[f64], g_cl: &[f64]) -> Response {
    let rhs: Vec<f64> = g_ol.iter().map(|v| -v).collect();
    let solve = rank_one_min_norm_solve(g_cl, &rhs);
    let proj = dot(g_cl, &solve.b);
    Response {
        g_r: g_th.iter().map(|t| t * proj).collect(),
        degenerate: solve.degenerate,
    }
}

/// Rank-one approximate response gradient at `(theta, omega_hat)`.
/// Uses three gradient evaluations and no second-order products.
pub fn fast_gr_response<O: BilevelOracle + ?Sized>(
    oracle: &O,
    theta: &[f64],
    omega_hat: &[f64],
    batch: BatchId,
) -> Response {
    let g_cl = oracle.grad_omega_cl(theta, omega_hat, batch);
    let g_ol = oracle.grad_omega_ol(theta, omega_hat, batch);
    let g_th = oracle.grad_theta_cl(theta, omega_hat, batch);
    fast_gr_from_grads(&g_th, &g_ol, &g_cl)
}

/// `grad_theta F_OL(theta, omega_hat) + G_R`.
pub fn total_hypergradient<O: BilevelOracle + ?Sized>(
    oracle: &O,
    theta: &[f64],
    omega_hat: &[f64],
    g_r: &[f64],
    batch: BatchId,
) -> ParamVector {
    let mut direct = oracle.grad_theta_ol(theta, omega_hat, batch);
    direct.axpy(1.0, g_r);
    direct
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImplicitResponse {
    pub g_r: ParamVector,
    pub solver_iters: usize,
    pub residual: f64,
    pub negative_curvature: bool,
    pub diverged: bool,
}

/// Exact-implicit response: solve `H B = -grad_omega F_OL` with CG on the
/// inner Hessian, then `G_R = [d^2 F_CL / d omega d theta]^T B`.
pub fn implicit_cg_response<O: BilevelOracle + ?Sized>(
    oracle: &O,
    theta: &[f64],
    omega_hat: &[f64],
    cg_tol: f64,
    cg_max_iter: usize,
    eps: f64,
    batch: BatchId,
) -> Result<ImplicitResponse> {
    let rhs = oracle.grad_omega_ol(theta, omega_hat, batch).scaled(-1.0);
    let mut err = None;
    let mut op = FnOperator::new(omega_hat.len(), |v: &[f64]| {
        match oracle::hvp_omega_omega(oracle, theta, omega_hat, v, eps, batch) {
            Ok(p) => p.value,
            Err(e) => {
                err.get_or_insert(e);
                ParamVector::zeros(v.len())
            }
        }
    });
    let cg = cg_solve(&mut op, &rhs, cg_tol, cg_max_iter);
    if let Some(e) = err {
        return Err(e);
    }
    let g_r = oracle::cross_vjp(oracle, theta, omega_hat, &cg.x, eps, batch)?.value;
    Ok(ImplicitResponse {
        g_r,
        solver_iters: cg.iters,
        residual: cg.residual,
        negative_curvature: cg.negative_curvature,
        diverged: false,
    })
}

/// Implicit response with the inverse Hessian replaced by a truncated
/// Neumann series of `terms` terms and step `step`.
pub fn neumann_response<O: BilevelOracle + ?Sized>(
    oracle: &O,
    theta: &[f64],
    omega_hat: &[f64],
    step: f64,
    terms: usize,
    eps: f64,
    batch: BatchId,
) -> Result<ImplicitResponse> {
    let rhs = oracle.grad_omega_ol(theta, omega_hat, batch).scaled(-1.0);
    let mut err = None;
    let mut op = FnOperator::new(omega_hat.len(), |v: &[f64]| {
        match oracle::hvp_omega_omega(oracle, theta, omega_hat, v, eps, batch) {
            Ok(p) => p.value,
            Err(e) => {
                err.get_or_insert(e);
                ParamVector::zeros(v.len())
            }
        }
    });
    let ns = neumann_hypergrad(&mut op, &rhs, step, terms);
    if let Some(e) = err {
        return Err(e);
    }
    let g_r = oracle::cross_vjp(oracle, theta, omega_hat, &ns.x, eps, batch)?.value;
    Ok(ImplicitResponse {
        g_r,
        solver_iters: ns.terms_used,
        residual: f64::NAN,
        negative_curvature: false,
        diverged: ns.diverged,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Unrolled {
    /// Total hypergradient `d F_OL(theta, omega_K) / d theta`.
    pub hypergrad: ParamVector,
    /// Final inner iterate `omega_K`.
    pub omega: ParamVector,
    pub diverged_at: Option<usize>,
}

/// Reverse-mode hypergradient through `k` inner gradient steps, truncated to
/// the last `truncate` steps (`truncate == k` is full RHG).
#[allow(clippy::too_many_arguments)]
pub fn rhg_hypergradient<O: BilevelOracle + ?Sized>(
    oracle: &O,
    theta: &[f64],
    omega_start: &[f64],
    alpha: f64,
    k: usize,
    truncate: usize,
    eps: f64,
    batch: BatchId,
) -> Result<Unrolled> {
    unrolled_hypergradient(oracle, theta, omega_start, alpha, k, truncate, 0.0, eps, batch)
}

/// Unrolled hypergradient where each inner step follows the aggregated
/// direction `(1 - mu) grad_omega F_CL + mu grad_omega F_OL`. `mu = 0`
/// reduces to RHG. The outer-energy second-order terms are taken by
/// central differences.
#[allow(clippy::too_many_arguments)]
pub fn unrolled_hypergradient<O: BilevelOracle + ?Sized>(
    oracle: &O,
    theta: &[f64],
    omega_start: &[f64],
    alpha: f64,
    k: usize,
    truncate: usize,
    mu: f64,
    eps: f64,
    batch: BatchId,
) -> Result<Unrolled> {
    let truncate = truncate.min(k);
    let mut iterates = Vec::with_capacity(truncate + 1);
    let mut omega = ParamVector::from(omega_start);
    for step in 0..k {
        if step >= k - truncate {
            iterates.push(omega.clone());
        }
        let mut d = oracle.grad_omega_cl(theta, &omega, batch);
        if mu > 0.0 {
            d.scale(1.0 - mu);
            d.axpy(mu, &oracle.grad_omega_ol(theta, &omega, batch));
        }
        omega.axpy(-alpha, &d);
        oracle.project_omega(&mut omega);
        if !omega.is_finite() {
            return Ok(Unrolled {
                hypergrad: ParamVector::zeros(theta.len()),
                omega,
                diverged_at: Some(step),
            });
        }
    }

    let mut hypergrad = oracle.grad_theta_ol(theta, &omega, batch);
    let mut v = oracle.grad_omega_ol(theta, &omega, batch);
    for w in iterates.iter().rev() {
        // omega_{t+1} = omega_t - alpha * d(theta, omega_t)
        let mut cross = oracle::cross_vjp(oracle, theta, w, &v, eps, batch)?.value;
        let mut hv = oracle::hvp_omega_omega(oracle, theta, w, &v, eps, batch)?.value;
        if mu > 0.0 {
            cross.scale(1.0 - mu);
            hv.scale(1.0 - mu);
            if v.iter().any(|x| *x != 0.0) {
                let c_ol = directional_fd(|x| oracle.grad_theta_ol(theta, x, batch), w, &v, eps)?;
                let h_ol = directional_fd(|x| oracle.grad_omega_ol(theta, x, batch), w, &v, eps)?;
                cross.axpy(mu, &c_ol.value);
                hv.axpy(mu, &h_ol.value);
            }
        }
        hypergrad.axpy(-alpha, &cross);
        v.axpy(-alpha, &hv);
    }
    Ok(Unrolled {
        hypergrad,
        omega,
        diverged_at: None,
    })
}

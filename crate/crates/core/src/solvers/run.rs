use std::time::{Duration, Instant};

use super::config::{SolverConfig, UpdateRule, Variant};
use super::counting::Counted;
use super::steps::{
    fast_gr_response, implicit_cg_response, neumann_response, total_hypergradient, unrolled_hypergradient,
};
use super::trace::{IterRecord, Reference, SolverTrace, Status, TraceFlags};
use crate::error::{Error, Result};
use crate::metrics::relative_error;
use crate::nn::AdamState;
use crate::oracle::{BatchId, BilevelOracle};
use crate::param::{norm, ParamVector};

/// Parameter update rule with its state.
enum Updater {
    Sgd(f64),
    Adam(AdamState),
}

impl Updater {
    fn new(rule: UpdateRule, lr: f64, len: usize) -> Self {
        match rule {
            UpdateRule::Sgd => Updater::Sgd(lr),
            UpdateRule::Adam => Updater::Adam(AdamState::new(len, lr)),
        }
    }

    fn apply(&mut self, params: &mut ParamVector, grad: &[f64]) {
        match self {
            Updater::Sgd(lr) => params.axpy(-*lr, grad),
            Updater::Adam(state) => state.step(params, grad),
        }
    }

    fn state_floats(&self) -> usize {
        match self {
            Updater::Sgd(_) => 0,
            Updater::Adam(s) => 2 * s.len(),
        }
    }
}

/// Minibatch handle of outer iteration `iter`.
pub fn batch_for(seed: u64, iter: usize) -> BatchId {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(iter as u64)
}

/// Solver-allocated working set in floats for one outer iteration, on top of
/// the persistent `theta` and `omega`.
fn working_set_floats(config: &SolverConfig, m: usize, n: usize) -> usize {
    match config.variant {
        // inner gradient, outer gradient
        Variant::Adi => n + m,
        // omega_hat, g_cl, g_ol, g_th, direct gradient, G_R
        Variant::FastGr => 3 * n + 3 * m,
        // omega_hat, inner gradient, rhs, CG x/r/p/Ap, cross product, direct
        Variant::ImplicitCg => 7 * n + 3 * m,
        // omega_hat, inner gradient, rhs, term/sum/product, cross, direct
        Variant::Neumann => 6 * n + 3 * m,
        // stored iterates, running omega, step direction, adjoint, hvp, cross, hypergradient
        Variant::Rhg | Variant::TRhg => (config.truncate + 4) * n + 2 * m,
        // as RHG plus the outer-energy products
        Variant::Bda => (config.truncate + 6) * n + 3 * m,
    }
}

struct Clock {
    elapsed: Duration,
    started: Option<Instant>,
}

impl Clock {
    fn new() -> Self {
        Self {
            elapsed: Duration::ZERO,
            started: None,
        }
    }

    fn start(&mut self) {
        self.started = Some(Instant::now());
    }

    fn stop(&mut self) {
        if let Some(t) = self.started.take() {
            self.elapsed += t.elapsed();
        }
    }

    fn ms(&self) -> f64 {
        self.elapsed.as_secs_f64() * 1e3
    }
}

fn rel_change(new: &[f64], old: &[f64]) -> f64 {
    let diff: f64 = new
        .iter()
        .zip(old)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale = norm(new);
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// Runs one bilevel solver from `(theta0, omega0)`.
///
/// `omega` is warm-started across outer iterations for every variant.
/// Divergence is reported through [`Status::Diverged`]; configuration and
/// dimension problems are errors.
pub fn run_solver<O: BilevelOracle + ?Sized>(
    oracle: &O,
    config: &SolverConfig,
    theta0: &[f64],
    omega0: &[f64],
    reference: Option<&Reference>,
) -> Result<SolverTrace> {
    config.validate()?;
    let dims = oracle.dims();
    if theta0.len() != dims.theta {
        return Err(Error::DimMismatch {
            expected: dims.theta,
            got: theta0.len(),
            context: "initial theta",
        });
    }
    if omega0.len() != dims.omega {
        return Err(Error::DimMismatch {
            expected: dims.omega,
            got: omega0.len(),
            context: "initial omega",
        });
    }
    if let Some(r) = reference {
        if r.theta.len() != dims.theta {
            return Err(Error::DimMismatch {
                expected: dims.theta,
                got: r.theta.len(),
                context: "reference theta",
            });
        }
    }

    let (m, n) = (dims.theta, dims.omega);
    let counted = Counted::new(oracle, config.fd_eps);
    let mut theta = ParamVector::from(theta0);
    let mut omega = ParamVector::from(omega0);
    let mut outer = Updater::new(config.outer_update, config.beta, m);
    let inner_rule = if config.variant.is_unrolled() {
        UpdateRule::Sgd
    } else {
        config.inner_update
    };
    let mut inner = Updater::new(inner_rule, config.alpha, n);
    let persistent = m + n + outer.state_floats() + inner.state_floats();
    let peak_bytes = ((persistent + working_set_floats(config, m, n)) * std::mem::size_of::<f64>()) as u64;

    let mut flags = TraceFlags::default();
    let mut records = Vec::new();
    let mut clock = Clock::new();
    let mut status = Status::MaxIters;
    let mut stop_iter = None;
    let mut diverged_at = None;
    let mut iterations = 0;
    let stop_enabled = config.stop_rel_tol.is_finite();

    for iter in 0..config.outer_iters {
        let batch = batch_for(config.seed, iter);
        clock.start();
        let prev_theta = theta.clone();

        let step = one_iteration(
            &counted,
            config,
            &mut theta,
            &mut omega,
            &mut outer,
            &mut inner,
            batch,
            &mut flags,
        )?;
        clock.stop();
        iterations = iter + 1;

        let diverged = match step {
            IterOutcome::Ok(_) => !(theta.is_finite() && omega.is_finite()),
            IterOutcome::InnerDiverged(s) => {
                diverged_at = Some(s);
                true
            }
        };
        let grad_norm = match &step {
            IterOutcome::Ok(g) => *g,
            IterOutcome::InnerDiverged(_) => f64::NAN,
        };
        let converged = !diverged && stop_enabled && rel_change(&theta, &prev_theta) <= config.stop_rel_tol;
        let last = diverged || converged || iter + 1 == config.outer_iters;

        if last || iter % config.record_every == 0 {
            flags.fd_step_underflow = counted.fd_underflows();
            records.push(IterRecord {
                iter,
                theta_rel_err: reference.map(|r| relative_error(&theta, &r.theta).0),
                ol_value: oracle.f_ol(&theta, &omega, batch),
                cl_value: oracle.f_cl(&theta, &omega, batch),
                grad_norm_theta: grad_norm,
                wall_ms: clock.ms(),
                grad_eval_count: counted.grad_evals(),
                hvp_eval_count: counted.hvp_evals(),
                peak_tracked_bytes: peak_bytes,
                batch,
            });
        }
        if diverged {
            status = Status::Diverged;
            break;
        }
        if converged {
            status = Status::Converged;
            stop_iter = Some(iter);
            break;
        }
    }
    flags.fd_step_underflow = counted.fd_underflows();

    Ok(SolverTrace {
        variant: config.variant,
        records,
        status,
        iterations,
        stop_iter,
        diverged_at,
        flags,
        theta,
        omega,
    })
}

enum IterOutcome {
    /// Norm of the hypergradient used for the outer step.
    Ok(f64),
    InnerDiverged(usize),
}

#[allow(clippy::too_many_arguments)]
fn one_iteration<O: BilevelOracle + ?Sized>(
    oracle: &Counted<'_, O>,
    config: &SolverConfig,
    theta: &mut ParamVector,
    omega: &mut ParamVector,
    outer: &mut Updater,
    inner: &mut Updater,
    batch: BatchId,
    flags: &mut TraceFlags,
) -> Result<IterOutcome> {
    let eps = config.fd_eps;
    let hypergrad = match config.variant {
        Variant::Adi => {
            if let Some(s) = inner_loop(oracle, theta, omega, inner, config.inner_steps, 0.0, batch) {
                return Ok(IterOutcome::InnerDiverged(s));
            }
            oracle.grad_theta_ol(theta, omega, batch)
        }
        Variant::FastGr => {
            if let Some(s) = inner_loop(oracle, theta, omega, inner, config.inner_steps, 0.0, batch) {
                return Ok(IterOutcome::InnerDiverged(s));
            }
            let response = fast_gr_response(oracle, theta, omega, batch);
            if response.degenerate {
                flags.degenerate_response += 1;
            }
            total_hypergradient(oracle, theta, omega, &response.g_r, batch)
        }
        Variant::ImplicitCg | Variant::Neumann => {
            if let Some(s) = inner_loop(oracle, theta, omega, inner, config.inner_steps, config.inner_tol, batch) {
                return Ok(IterOutcome::InnerDiverged(s));
            }
            let response = if config.variant == Variant::ImplicitCg {
                implicit_cg_response(oracle, theta, omega, config.cg_tol, config.cg_max_iter, eps, batch)?
            } else {
                neumann_response(oracle, theta, omega, config.neumann_step(), config.neumann_terms, eps, batch)?
            };
            if response.negative_curvature {
                flags.cg_negative_curvature += 1;
            }
            if response.diverged {
                flags.neumann_diverged += 1;
            }
            total_hypergradient(oracle, theta, omega, &response.g_r, batch)
        }
        Variant::Rhg | Variant::TRhg | Variant::Bda => {
            let mu = if config.variant == Variant::Bda { config.bda_mu } else { 0.0 };
            let unrolled = unrolled_hypergradient(
                oracle,
                theta,
                omega,
                config.alpha,
                config.inner_steps,
                config.truncate,
                mu,
                eps,
                batch,
            )?;
            *omega = unrolled.omega;
            if let Some(s) = unrolled.diverged_at {
                return Ok(IterOutcome::InnerDiverged(s));
            }
            unrolled.hypergrad
        }
    };
    let g_norm = hypergrad.norm();
    outer.apply(theta, &hypergrad);
    Ok(IterOutcome::Ok(g_norm))
}

/// Inner updates in place; returns the failing step on divergence.
fn inner_loop<O: BilevelOracle + ?Sized>(
    oracle: &O,
    theta: &[f64],
    omega: &mut ParamVector,
    updater: &mut Updater,
    steps: usize,
    tol: f64,
    batch: BatchId,
) -> Option<usize> {
    for step in 0..steps {
        let g = oracle.grad_omega_cl(theta, omega, batch);
        if tol > 0.0 && g.norm() <= tol {
            break;
        }
        updater.apply(omega, &g);
        oracle.project_omega(omega);
        if !omega.is_finite() {
            return Some(step);
        }
    }
    None
}

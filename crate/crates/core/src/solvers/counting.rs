use std::cell::Cell;

use crate::oracle::{self, directional_fd, BatchId, BilevelOracle, Dims, FdProduct};
use crate::param::{norm, ParamVector};

/// Oracle adapter that counts first-order gradient and second-order product
/// evaluations. Second-order products are always answered here (analytic
/// when the wrapped problem has them, central differences otherwise) so they
/// are counted once as products rather than as the gradients they use.
pub struct Counted<'a, O: ?Sized> {
    inner: &'a O,
    eps: f64,
    grads: Cell<u64>,
    hvps: Cell<u64>,
    underflows: Cell<u64>,
}

impl<'a, O: BilevelOracle + ?Sized> Counted<'a, O> {
    pub fn new(inner: &'a O, eps: f64) -> Self {
        Self {
            inner,
            eps,
            grads: Cell::new(0),
            hvps: Cell::new(0),
            underflows: Cell::new(0),
        }
    }

    pub fn inner(&self) -> &'a O {
        self.inner
    }

    pub fn grad_evals(&self) -> u64 {
        self.grads.get()
    }

    pub fn hvp_evals(&self) -> u64 {
        self.hvps.get()
    }

    pub fn fd_underflows(&self) -> u64 {
        self.underflows.get()
    }

    fn bump_grad(&self) {
        self.grads.set(self.grads.get() + 1);
    }

    fn product(&self, out: crate::error::Result<FdProduct>) -> ParamVector {
        self.hvps.set(self.hvps.get() + 1);
        let out = out.expect("second-order product on validated input");
        if out.step_underflow {
            self.underflows.set(self.underflows.get() + 1);
        }
        out.value
    }

    /// `[d^2 F_OL / d omega^2] v` by central differences.
    pub fn hvp_omega_omega_ol(&self, theta: &[f64], omega: &[f64], v: &[f64], batch: BatchId) -> ParamVector {
        if norm(v) == 0.0 {
            return ParamVector::zeros(omega.len());
        }
        self.product(directional_fd(
            |w| self.inner.grad_omega_ol(theta, w, batch),
            omega,
            v,
            self.eps,
        ))
    }

    /// `[d^2 F_OL / d omega d theta]^T u` by central differences.
    pub fn cross_vjp_ol(&self, theta: &[f64], omega: &[f64], u: &[f64], batch: BatchId) -> ParamVector {
        if norm(u) == 0.0 {
            return ParamVector::zeros(theta.len());
        }
        self.product(directional_fd(
            |w| self.inner.grad_theta_ol(theta, w, batch),
            omega,
            u,
            self.eps,
        ))
    }
}

impl<O: BilevelOracle + ?Sized> BilevelOracle for Counted<'_, O> {
    fn dims(&self) -> Dims {
        self.inner.dims()
    }

    fn f_ol(&self, theta: &[f64], omega: &[f64], batch: BatchId) -> f64 {
        self.inner.f_ol(theta, omega, batch)
    }

    fn f_cl(&self, theta: &[f64], omega: &[f64], batch: BatchId) -> f64 {
        self.inner.f_cl(theta, omega, batch)
    }

    fn grad_theta_ol(&self, theta: &[f64], omega: &[f64], batch: BatchId) -> ParamVector {
        self.bump_grad();
        self.inner.grad_theta_ol(theta, omega, batch)
    }

    fn grad_omega_ol(&self, theta: &[f64], omega: &[f64], batch: BatchId) -> ParamVector {
        self.bump_grad();
        self.inner.grad_omega_ol(theta, omega, batch)
    }

    fn grad_theta_cl(&self, theta: &[f64], omega: &[f64], batch: BatchId) -> ParamVector {
        self.bump_grad();
        self.inner.grad_theta_cl(theta, omega, batch)
    }

    fn grad_omega_cl(&self, theta: &[f64], omega: &[f64], batch: BatchId) -> ParamVector {
        self.bump_grad();
        self.inner.grad_omega_cl(theta, omega, batch)
    }

    fn hvp_omega_omega_cl(&self, theta: &[f64], omega: &[f64], v: &[f64], batch: BatchId) -> Option<ParamVector> {
        Some(self.product(oracle::hvp_omega_omega(self.inner, theta, omega, v, self.eps, batch)))
    }

    fn cross_vjp_cl(&self, theta: &[f64], omega: &[f64], u: &[f64], batch: BatchId) -> Option<ParamVector> {
        Some(self.product(oracle::cross_vjp(self.inner, theta, omega, u, self.eps, batch)))
    }

    fn project_omega(&self, omega: &mut [f64]) {
        self.inner.project_omega(omega)
    }

    fn name(&self) -> &str {
        self.inner.name()
    }
}

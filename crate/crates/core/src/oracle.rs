//! The bilevel problem abstraction and its finite-difference second-order
//! operators.
//!
//! An oracle exposes the outer ("objective learner") energy `F_OL(theta, omega)`
//! and the inner ("constraint learner") energy `F_CL(theta, omega)` together
//! with their four first-order gradients. Second-order operators are optional;
//! when a problem does not provide them, the central-difference versions in
//! this module are used instead.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{norm, ParamVector};

/// Minibatch handle. Deterministic problems ignore it; stochastic problems
/// derive their sample stream from it so every call is reproducible.
pub type BatchId = u64;

/// Default central-difference step on normalized probe directions.
pub const DEFAULT_FD_EPS: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Outer parameter count `m`.
    pub theta: usize,
    /// Inner parameter count `n`.
    pub omega: usize,
}

impl Dims {
    pub fn new(theta: usize, omega: usize) -> Self {
        Self { theta, omega }
    }
}

pub trait BilevelOracle {
    fn dims(&self) -> Dims;

    fn f_ol(&self, theta: &[f64], omega: &[f64], batch: BatchId) -> f64;
    fn f_cl(&self, theta: &[f64], omega: &[f64], batch: BatchId) -> f64;

    fn grad_theta_ol(&self, theta: &[f64], omega: &[f64], batch: BatchId) -> ParamVector;
    fn grad_omega_ol(&self, theta: &[f64], omega: &[f64], batch: BatchId) -> ParamVector;
    fn grad_theta_cl(&self, theta: &[f64], omega: &[f64], batch: BatchId) -> ParamVector;
    fn grad_omega_cl(&self, theta: &[f64], omega: &[f64], batch: BatchId) -> ParamVector;

    /// `[d^2 F_CL / d omega^2] v`, if the problem knows it analytically.
    fn hvp_omega_omega_cl(
        &self,
        _theta: &[f64],
        _omega: &[f64],
        _v: &[f64],
        _batch: BatchId,
    ) -> Option<ParamVector> {
        None
    }

    /// `[d^2 F_CL / d omega d theta]^T u` (an `m`-vector), if known analytically.
    fn cross_vjp_cl(
        &self,
        _theta: &[f64],
        _omega: &[f64],
        _u: &[f64],
        _batch: BatchId,
    ) -> Option<ParamVector> {
        None
    }

    /// Applied to `omega` after every inner update (e.g. weight clipping).
    fn project_omega(&self, _omega: &mut [f64]) {}

    fn name(&self) -> &str {
        "oracle"
    }
}

impl<T: BilevelOracle + ?Sized> BilevelOracle for &T {
    fn dims(&self) -> Dims {
        (**self).dims()
    }
    fn f_ol(&self, t: &[f64], w: &[f64], b: BatchId) -> f64 {
        (**self).f_ol(t, w, b)
    }
    fn f_cl(&self, t: &[f64], w: &[f64], b: BatchId) -> f64 {
        (**self).f_cl(t, w, b)
    }
    fn grad_theta_ol(&self, t: &[f64], w: &[f64], b: BatchId) -> ParamVector {
        (**self).grad_theta_ol(t, w, b)
    }
    fn grad_omega_ol(&self, t: &[f64], w: &[f64], b: BatchId) -> ParamVector {
        (**self).grad_omega_ol(t, w, b)
    }
    fn grad_theta_cl(&self, t: &[f64], w: &[f64], b: BatchId) -> ParamVector {
        (**self).grad_theta_cl(t, w, b)
    }
    fn grad_omega_cl(&self, t: &[f64], w: &[f64], b: BatchId) -> ParamVector {
        (**self).grad_omega_cl(t, w, b)
    }
    fn hvp_omega_omega_cl(&self, t: &[f64], w: &[f64], v: &[f64], b: BatchId) -> Option<ParamVector> {
        (**self).hvp_omega_omega_cl(t, w, v, b)
    }
    fn cross_vjp_cl(&self, t: &[f64], w: &[f64], u: &[f64], b: BatchId) -> Option<ParamVector> {
        (**self).cross_vjp_cl(t, w, u, b)
    }
    fn project_omega(&self, w: &mut [f64]) {
        (**self).project_omega(w)
    }
    fn name(&self) -> &str {
        (**self).name()
    }
}

/// Result of a finite-difference operator.
#[derive(Clone, Debug, PartialEq)]
pub struct FdProduct {
    pub value: ParamVector,
    /// Set when the two gradient evaluations were bitwise identical, i.e.
    /// the step was lost to round-off.
    pub step_underflow: bool,
}

/// Central difference of a gradient map along `v`:
/// `(g(x + eps*v_hat) - g(x - eps*v_hat)) / (2 eps) * |v|`.
pub fn directional_fd<G>(grad: G, x: &[f64], v: &[f64], eps: f64) -> Result<FdProduct>
where
    G: Fn(&[f64]) -> ParamVector,
{
    if x.len() != v.len() {
        return Err(Error::DimMismatch {
            expected: x.len(),
            got: v.len(),
            context: "finite-difference direction",
        });
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let scale = norm(v);
    if !(scale > 0.0) {
        return Err(Error::InvalidArgument("probe direction has zero norm".into()));
    }
    let plus: Vec<f64> = x.iter().zip(v).map(|(xi, vi)| xi + eps * vi / scale).collect();
    let minus: Vec<f64> = x.iter().zip(v).map(|(xi, vi)| xi - eps * vi / scale).collect();
    let gp = grad(&plus);
    let gm = grad(&minus);
    let step_underflow = gp.as_slice() == gm.as_slice();
    let factor = scale / (2.0 * eps);
    let value = gp.iter().zip(gm.iter()).map(|(a, b)| (a - b) * factor).collect();
    Ok(FdProduct {
        value,
        step_underflow,
    })
}

/// `[d^2 F_CL / d omega^2] v` by central differences of `grad_omega_cl`.
pub fn hvp_omega_omega_fd<O: BilevelOracle + ?Sized>(
    oracle: &O,
    theta: &[f64],
    omega: &[f64],
    v: &[f64],
    eps: f64,
    batch: BatchId,
) -> Result<FdProduct> {
    directional_fd(|w| oracle.grad_omega_cl(theta, w, batch), omega, v, eps)
}

/// `[d^2 F_CL / d omega d theta]^T u` by central differences of
/// `grad_theta_cl` along `u` in omega-space (mixed partials commute).
pub fn cross_vjp_fd<O: BilevelOracle + ?Sized>(
    oracle: &O,
    theta: &[f64],
    omega: &[f64],
    u: &[f64],
    eps: f64,
    batch: BatchId,
) -> Result<FdProduct> {
    directional_fd(|w| oracle.grad_theta_cl(theta, w, batch), omega, u, eps)
}

/// Analytic operator when available, otherwise finite differences. A zero
/// direction maps to the zero vector.
pub fn hvp_omega_omega<O: BilevelOracle + ?Sized>(
    oracle: &O,
    theta: &[f64],
    omega: &[f64],
    v: &[f64],
    eps: f64,
    batch: BatchId,
) -> Result<FdProduct> {
    if let Some(value) = oracle.hvp_omega_omega_cl(theta, omega, v, batch) {
        return Ok(FdProduct {
            value,
            step_underflow: false,
        });
    }
    if norm(v) == 0.0 {
        return Ok(FdProduct {
            value: ParamVector::zeros(omega.len()),
            step_underflow: false,
        });
    }
    hvp_omega_omega_fd(oracle, theta, omega, v, eps, batch)
}

pub fn cross_vjp<O: BilevelOracle + ?Sized>(
    oracle: &O,
    theta: &[f64],
    omega: &[f64],
    u: &[f64],
    eps: f64,
    batch: BatchId,
) -> Result<FdProduct> {
    if let Some(value) = oracle.cross_vjp_cl(theta, omega, u, batch) {
        return Ok(FdProduct {
            value,
            step_underflow: false,
        });
    }
    if norm(u) == 0.0 {
        return Ok(FdProduct {
            value: ParamVector::zeros(theta.len()),
            step_underflow: false,
        });
    }
    cross_vjp_fd(oracle, theta, omega, u, eps, batch)
}

/// Worst relative error of each analytic gradient against central
/// differences of the corresponding energy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradientErrors {
    pub grad_theta_ol: f64,
    pub grad_omega_ol: f64,
    pub grad_theta_cl: f64,
    pub grad_omega_cl: f64,
}

impl GradientErrors {
    pub fn entries(&self) -> [(&'static str, f64); 4] {
        [
            ("grad_theta_ol", self.grad_theta_ol),
            ("grad_omega_ol", self.grad_omega_ol),
            ("grad_theta_cl", self.grad_theta_cl),
            ("grad_omega_cl", self.grad_omega_cl),
        ]
    }

    pub fn max(&self) -> f64 {
        self.entries().iter().map(|e| e.1).fold(0.0, f64::max)
    }

    fn merge_max(&mut self, other: &GradientErrors) {
        self.grad_theta_ol = self.grad_theta_ol.max(other.grad_theta_ol);
        self.grad_omega_ol = self.grad_omega_ol.max(other.grad_omega_ol);
        self.grad_theta_cl = self.grad_theta_cl.max(other.grad_theta_cl);
        self.grad_omega_cl = self.grad_omega_cl.max(other.grad_omega_cl);
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SelfTestReport {
    pub oracle: String,
    pub probes: usize,
    pub tol: f64,
    pub max_rel_err: GradientErrors,
    /// Gradients whose error exceeded `tol`.
    pub flagged: Vec<String>,
}

impl SelfTestReport {
    pub fn passed(&self) -> bool {
        self.flagged.is_empty()
    }
}

const GRAD_CHECK_REL_FLOOR: f64 = 1e-6;

fn rel_err(analytic: &[f64], reference: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(reference)
        .map(|(a, r)| (a - r) * (a - r))
        .sum::<f64>()
        .sqrt();
    diff / norm(reference).max(GRAD_CHECK_REL_FLOOR)
}

fn coordinate_fd<F>(f: F, x: &[f64], function: &'static str, probe: usize) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    let mut work = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let h = 1e-5 * x[i].abs().max(1.0);
        let orig = work[i];
        work[i] = orig + h;
        let fp = f(&work);
        work[i] = orig - h;
        let fm = f(&work);
        work[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite { function, probe });
        }
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// Compares all four gradients at a single point.
pub fn gradient_check<O: BilevelOracle + ?Sized>(
    oracle: &O,
    theta: &[f64],
    omega: &[f64],
    batch: BatchId,
    probe: usize,
) -> Result<GradientErrors> {
    let dims = oracle.dims();
    if theta.len() != dims.theta {
        return Err(Error::DimMismatch {
            expected: dims.theta,
            got: theta.len(),
            context: "gradient check theta",
        });
    }
    if omega.len() != dims.omega {
        return Err(Error::DimMismatch {
            expected: dims.omega,
            got: omega.len(),
            context: "gradient check omega",
        });
    }
    for (name, value) in [
        ("f_ol", oracle.f_ol(theta, omega, batch)),
        ("f_cl", oracle.f_cl(theta, omega, batch)),
    ] {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                function: name,
                probe,
            });
        }
    }

    let analytic = [
        ("grad_theta_ol", oracle.grad_theta_ol(theta, omega, batch)),
        ("grad_omega_ol", oracle.grad_omega_ol(theta, omega, batch)),
        ("grad_theta_cl", oracle.grad_theta_cl(theta, omega, batch)),
        ("grad_omega_cl", oracle.grad_omega_cl(theta, omega, batch)),
    ];
    for (name, g) in &analytic {
        if !g.is_finite() {
            return Err(Error::NonFinite {
                function: name,
                probe,
            });
        }
    }

    let fd_theta_ol = coordinate_fd(|t| oracle.f_ol(t, omega, batch), theta, "f_ol", probe)?;
    let fd_omega_ol = coordinate_fd(|w| oracle.f_ol(theta, w, batch), omega, "f_ol", probe)?;
    let fd_theta_cl = coordinate_fd(|t| oracle.f_cl(t, omega, batch), theta, "f_cl", probe)?;
    let fd_omega_cl = coordinate_fd(|w| oracle.f_cl(theta, w, batch), omega, "f_cl", probe)?;

    Ok(GradientErrors {
        grad_theta_ol: rel_err(&analytic[0].1, &fd_theta_ol),
        grad_omega_ol: rel_err(&analytic[1].1, &fd_omega_ol),
        grad_theta_cl: rel_err(&analytic[2].1, &fd_theta_cl),
        grad_omega_cl: rel_err(&analytic[3].1, &fd_omega_cl),
    })
}

/// Checks the analytic gradients at `probes` random standard-normal points.
pub fn oracle_self_test<O: BilevelOracle + ?Sized>(
    oracle: &O,
    probes: usize,
    seed: u64,
    tol: f64,
) -> Result<SelfTestReport> {
    oracle_self_test_scaled(oracle, probes, seed, tol, 1.0)
}

/// As [`oracle_self_test`], with probe coordinates drawn from `N(0, scale^2)`.
pub fn oracle_self_test_scaled<O: BilevelOracle + ?Sized>(
    oracle: &O,
    probes: usize,
    seed: u64,
    tol: f64,
    scale: f64,
) -> Result<SelfTestReport> {
    let dims = oracle.dims();
    if probes == 0 {
        return Err(Error::InvalidArgument("probes must be at least 1".into()));
    }
    if dims.theta == 0 || dims.omega == 0 {
        return Err(Error::InvalidArgument("oracle dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = GradientErrors::default();
    for probe in 0..probes {
        let theta: Vec<f64> = (0..dims.theta)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
            .collect();
        let omega: Vec<f64> = (0..dims.omega)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
            .collect();
        let errs = gradient_check(oracle, &theta, &omega, probe as BatchId, probe)?;
        worst.merge_max(&errs);
    }
    Ok(report(oracle.name(), probes, tol, worst))
}

pub(crate) fn report(name: &str, probes: usize, tol: f64, worst: GradientErrors) -> SelfTestReport {
    let flagged = worst
        .entries()
        .iter()
        .filter(|(_, e)| !(*e <= tol))
        .map(|(n, _)| n.to_string())
        .collect();
    SelfTestReport {
        oracle: name.to_string(),
        probes,
        tol,
        max_rel_err: worst,
        flagged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::quadratic::QuadraticPair;
    use crate::problems::toy::{ToyOracle, ToySpec};
    use std::f64::consts::FRAC_PI_2;

    struct DoubledThetaGrad(QuadraticPair);

    impl BilevelOracle for DoubledThetaGrad {
        fn dims(&self) -> Dims {
            self.0.dims()
        }
        fn f_ol(&self, t: &[f64], w: &[f64], b: BatchId) -> f64 {
            self.0.f_ol(t, w, b)
        }
        fn f_cl(&self, t: &[f64], w: &[f64], b: BatchId) -> f64 {
            self.0.f_cl(t, w, b)
        }
        fn grad_theta_ol(&self, t: &[f64], w: &[f64], b: BatchId) -> ParamVector {
            self.0.grad_theta_ol(t, w, b).scaled(2.0)
        }
        fn grad_omega_ol(&self, t: &[f64], w: &[f64], b: BatchId) -> ParamVector {
            self.0.grad_omega_ol(t, w, b)
        }
        fn grad_theta_cl(&self, t: &[f64], w: &[f64], b: BatchId) -> ParamVector {
            self.0.grad_theta_cl(t, w, b)
        }
        fn grad_omega_cl(&self, t: &[f64], w: &[f64], b: BatchId) -> ParamVector {
            self.0.grad_omega_cl(t, w, b)
        }
    }

    /// Only the inner energy matters here: F_CL = |omega|^2.
    struct InnerSquare;

    impl BilevelOracle for InnerSquare {
        fn dims(&self) -> Dims {
            Dims::new(2, 2)
        }
        fn f_ol(&self, _t: &[f64], _w: &[f64], _b: BatchId) -> f64 {
            0.0
        }
        fn f_cl(&self, _t: &[f64], w: &[f64], _b: BatchId) -> f64 {
            w.iter().map(|x| x * x).sum()
        }
        fn grad_theta_ol(&self, t: &[f64], _w: &[f64], _b: BatchId) -> ParamVector {
            ParamVector::zeros(t.len())
        }
        fn grad_omega_ol(&self, _t: &[f64], w: &[f64], _b: BatchId) -> ParamVector {
            ParamVector::zeros(w.len())
        }
        fn grad_theta_cl(&self, t: &[f64], _w: &[f64], _b: BatchId) -> ParamVector {
            ParamVector::zeros(t.len())
        }
        fn grad_omega_cl(&self, _t: &[f64], w: &[f64], _b: BatchId) -> ParamVector {
            w.iter().map(|x| 2.0 * x).collect()
        }
    }

    fn toy1() -> ToyOracle {
        ToyOracle::new(ToySpec::uniform(2.0, 2.0, 1))
    }

    #[test]
    fn quadratic_self_test_is_tight() {
        let report = oracle_self_test(&QuadraticPair::new(3), 4, 7, 1e-4).unwrap();
        assert!(report.passed());
        assert!(report.max_rel_err.max() < 1e-6, "{:?}", report.max_rel_err);
    }

    #[test]
    fn doubled_gradient_is_flagged() {
        let report = oracle_self_test(&DoubledThetaGrad(QuadraticPair::new(2)), 3, 1, 1e-4).unwrap();
        assert_eq!(report.flagged, vec!["grad_theta_ol".to_string()]);
        assert!((report.max_rel_err.grad_theta_ol - 1.0).abs() < 1e-6);
    }

    #[test]
    fn toy_gradients_pass_at_three_three() {
        let errs = gradient_check(&toy1(), &[3.0], &[3.0], 0, 0).unwrap();
        assert!(errs.max() < 1e-4, "{errs:?}");
    }

    #[test]
    fn non_finite_probe_is_reported() {
        struct Bad;
        impl BilevelOracle for Bad {
            fn dims(&self) -> Dims {
                Dims::new(1, 1)
            }
            fn f_ol(&self, _t: &[f64], _w: &[f64], _b: BatchId) -> f64 {
                f64::NAN
            }
            fn f_cl(&self, _t: &[f64], _w: &[f64], _b: BatchId) -> f64 {
                0.0
            }
            fn grad_theta_ol(&self, _t: &[f64], _w: &[f64], _b: BatchId) -> ParamVector {
                ParamVector::zeros(1)
            }
            fn grad_omega_ol(&self, _t: &[f64], _w: &[f64], _b: BatchId) -> ParamVector {
                ParamVector::zeros(1)
            }
            fn grad_theta_cl(&self, _t: &[f64], _w: &[f64], _b: BatchId) -> ParamVector {
                ParamVector::zeros(1)
            }
            fn grad_omega_cl(&self, _t: &[f64], _w: &[f64], _b: BatchId) -> ParamVector {
                ParamVector::zeros(1)
            }
        }
        let err = oracle_self_test(&Bad, 2, 0, 1e-4).unwrap_err();
        assert!(matches!(err, Error::NonFinite { function: "f_ol", probe: 0 }));
    }

    #[test]
    fn hvp_of_squared_norm_is_twice_identity() {
        let out = hvp_omega_omega_fd(&InnerSquare, &[0.0, 0.0], &[0.3, -1.2], &[1.0, 0.0], 1e-4, 0).unwrap();
        assert!((out.value[0] - 2.0).abs() < 1e-8 && out.value[1].abs() < 1e-8);
        assert!(!out.step_underflow);
    }

    #[test]
    fn hvp_of_coupled_quadratic_is_two_v() {
        let q = QuadraticPair::new(3);
        let v = [0.5, -2.0, 7.0];
        let out = hvp_omega_omega_fd(&q, &[1.0, 2.0, 3.0], &[0.0, 1.0, -1.0], &v, 1e-4, 0).unwrap();
        for (o, vi) in out.value.iter().zip(v) {
            assert!((o - 2.0 * vi).abs() < 1e-7);
        }
    }

    #[test]
    fn toy_hvp_at_sine_peak_is_minus_one() {
        // theta + omega - c = pi/2, where d^2 sin = -sin = -1
        let omega = [FRAC_PI_2 + 2.0];
        let out = hvp_omega_omega_fd(&toy1(), &[0.0], &omega, &[1.0], 1e-4, 0).unwrap();
        assert!((out.value[0] + 1.0).abs() < 1e-7, "{:?}", out.value);
        let analytic = toy1().hvp_omega_omega_cl(&[0.0], &omega, &[1.0], 0).unwrap();
        assert!((analytic[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_vjp_of_coupled_quadratic_is_minus_two_u() {
        let q = QuadraticPair::new(2);
        let u = [1.5, -0.25];
        let out = cross_vjp_fd(&q, &[0.1, 0.2], &[0.3, 0.4], &u, 1e-4, 0).unwrap();
        for (o, ui) in out.value.iter().zip(u) {
            assert!((o + 2.0 * ui).abs() < 1e-7);
        }
    }

    #[test]
    fn cross_vjp_without_coupling_is_zero() {
        let out = cross_vjp_fd(&InnerSquare, &[1.0, 1.0], &[0.5, 0.5], &[1.0, 2.0], 1e-4, 0).unwrap();
        assert!(out.value.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn toy_cross_vjp_matches_pure_second_partial() {
        let omega = [FRAC_PI_2 + 2.0];
        let out = cross_vjp_fd(&toy1(), &[0.0], &omega, &[1.0], 1e-4, 0).unwrap();
        assert!((out.value[0] + 1.0).abs() < 1e-7);
    }

    #[test]
    fn vanishing_step_is_flagged() {
        let out = hvp_omega_omega_fd(&InnerSquare, &[0.0, 0.0], &[1e10, 1e10], &[1.0, 1.0], 1e-300, 0).unwrap();
        assert!(out.step_underflow);
    }

    #[test]
    fn fd_rejects_bad_arguments() {
        assert!(hvp_omega_omega_fd(&InnerSquare, &[0.0; 2], &[0.0; 2], &[0.0; 2], 1e-4, 0).is_err());
        assert!(hvp_omega_omega_fd(&InnerSquare, &[0.0; 2], &[0.0; 2], &[1.0, 0.0], 0.0, 0).is_err());
    }

    #[test]
    fn fd_probe_scale_is_irrelevant_for_quadratics() {
        let q = QuadraticPair::new(2);
        let a = hvp_omega_omega_fd(&q, &[0.0; 2], &[1.0, 2.0], &[1e-6, 2e-6], 1e-4, 0).unwrap();
        let b = hvp_omega_omega_fd(&q, &[0.0; 2], &[1.0, 2.0], &[1e6, 2e6], 1e-4, 0).unwrap();
        assert!((a.value[1] - 4e-6).abs() < 1e-12);
        assert!((b.value[1] - 4e6).abs() < 1e-3);
    }
}

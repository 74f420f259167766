//! Scalar outer variable with a non-convex sinusoidal inner problem:
//!
//! ```text
//! min_{theta, omega}  (theta - a)^2 + |omega - a - c|^2
//! s.t. omega_i in argmin_{omega_i} sin(theta + omega_i - c_i)
//! ```
//!
//! Inner minimizers satisfy `theta + omega_i - c_i = -pi/2 + 2 k pi`.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::oracle::{BatchId, BilevelOracle, Dims};
use crate::param::ParamVector;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub a: f64,
    pub c: ParamVector,
}

impl ToySpec {
    /// `n` inner coordinates, all with offset `c`.
    pub fn uniform(a: f64, c: f64, n: usize) -> Self {
        Self {
            a,
            c: ParamVector::filled(n, c),
        }
    }

    pub fn n(&self) -> usize {
        self.c.len()
    }
}

#[derive(Clone, Debug)]
pub struct ToyOracle {
    spec: ToySpec,
}

impl ToyOracle {
    pub fn new(spec: ToySpec) -> Self {
        assert!(spec.n() >= 1, "toy problem needs at least one inner coordinate");
        Self { spec }
    }

    pub fn spec(&self) -> &ToySpec {
        &self.spec
    }

    fn arg(&self, theta: &[f64], omega: &[f64], i: usize) -> f64 {
        theta[0] + omega[i] - self.spec.c[i]
    }
}

impl BilevelOracle for ToyOracle {
    fn dims(&self) -> Dims {
        Dims::new(1, self.spec.n())
    }

    fn f_ol(&self, theta: &[f64], omega: &[f64], _batch: BatchId) -> f64 {
        let a = self.spec.a;
        let outer = (theta[0] - a).powi(2);
        outer
            + omega
                .iter()
                .zip(self.spec.c.iter())
                .map(|(w, c)| (w - a - c).powi(2))
                .sum::<f64>()
    }

    fn f_cl(&self, theta: &[f64], omega: &[f64], _batch: BatchId) -> f64 {
        (0..omega.len()).map(|i| self.arg(theta, omega, i).sin()).sum()
    }

    fn grad_theta_ol(&self, theta: &[f64], _omega: &[f64], _batch: BatchId) -> ParamVector {
        ParamVector::new(vec![2.0 * (theta[0] - self.spec.a)])
    }

    fn grad_omega_ol(&self, _theta: &[f64], omega: &[f64], _batch: BatchId) -> ParamVector {
        let a = self.spec.a;
        omega
            .iter()
            .zip(self.spec.c.iter())
            .map(|(w, c)| 2.0 * (w - a - c))
            .collect()
    }

    fn grad_theta_cl(&self, theta: &[f64], omega: &[f64], _batch: BatchId) -> ParamVector {
        let s = (0..omega.len()).map(|i| self.arg(theta, omega, i).cos()).sum();
        ParamVector::new(vec![s])
    }

    fn grad_omega_cl(&self, theta: &[f64], omega: &[f64], _batch: BatchId) -> ParamVector {
        (0..omega.len()).map(|i| self.arg(theta, omega, i).cos()).collect()
    }

    fn hvp_omega_omega_cl(&self, theta: &[f64], omega: &[f64], v: &[f64], _b: BatchId) -> Option<ParamVector> {
        Some(
            (0..omega.len())
                .map(|i| -self.arg(theta, omega, i).sin() * v[i])
                .collect(),
        )
    }

    fn cross_vjp_cl(&self, theta: &[f64], omega: &[f64], u: &[f64], _b: BatchId) -> Option<ParamVector> {
        let s = (0..omega.len())
            .map(|i| -self.arg(theta, omega, i).sin() * u[i])
            .sum();
        Some(ParamVector::new(vec![s]))
    }

    fn name(&self) -> &str {
        "toy"
    }
}

/// Disagreement between a claimed optimum and the brute-force solution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discrepancy {
    pub source: String,
    pub theta_diff: f64,
    pub omega_diff: f64,
    pub value_diff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyReference {
    pub theta: f64,
    pub omega: ParamVector,
    pub value: f64,
    /// Set when the closed form disagrees with brute force; the fields above
    /// then hold the brute-force solution.
    pub discrepancy: Option<Discrepancy>,
}

/// Agreement threshold between closed form and brute force.
pub const REFERENCE_TOL: f64 = 1e-6;

/// Closed-form optimum: `C` is the point of `{-pi/2 + 2 k pi}` nearest to
/// `2a`, `theta = ((1 - n) a + n C) / (1 + n)`, `omega_i = C + c_i - theta`,
/// value `(C - 2a)^2 - (C - 2a)^2 / (1 + n)`.
pub fn toy_closed_form(spec: &ToySpec) -> (f64, ParamVector, f64) {
    let a = spec.a;
    let n = spec.n() as f64;
    let k = ((2.0 * a + FRAC_PI_2) / (2.0 * PI)).round();
    let big_c = -FRAC_PI_2 + 2.0 * PI * k;
    let theta = ((1.0 - n) * a + n * big_c) / (1.0 + n);
    let omega = spec.c.iter().map(|c| big_c + c - theta).collect();
    let d2 = (big_c - 2.0 * a).powi(2);
    (theta, omega, d2 - d2 / (1.0 + n))
}

/// Value function `phi(theta)` with each inner coordinate chosen on the
/// minimizing branch of `theta + omega_i - c_i = -pi/2 + 2 k pi`. Returns
/// the value and the selected inner point.
fn brute_force_phi(spec: &ToySpec, theta: f64) -> (f64, ParamVector) {
    let a = spec.a;
    let mut value = (theta - a).powi(2);
    let mut omega = ParamVector::zeros(spec.n());
    for (i, &c) in spec.c.iter().enumerate() {
        // omega_i - a - c_i = 2 k pi - pi/2 - theta - a
        let k0 = ((theta + a + FRAC_PI_2) / (2.0 * PI)).round();
        let mut best = (f64::INFINITY, 0.0);
        for dk in [-1.0, 0.0, 1.0] {
            let w = c - theta - FRAC_PI_2 + 2.0 * PI * (k0 + dk);
            let term = (w - a - c).powi(2);
            if term < best.0 {
                best = (term, w);
            }
        }
        value += best.0;
        omega[i] = best.1;
    }
    (value, omega)
}

/// Global minimizer of the value function by grid search over theta plus
/// ternary refinement around the best grid point.
pub fn toy_brute_force(spec: &ToySpec) -> (f64, ParamVector, f64) {
    let lo = spec.a - 2.0 * PI;
    let hi = spec.a + 2.0 * PI;
    let steps = 20_000;
    let h = (hi - lo) / steps as f64;
    let mut best = (f64::INFINITY, lo);
    for s in 0..=steps {
        let t = lo + h * s as f64;
        let v = brute_force_phi(spec, t).0;
        if v < best.0 {
            best = (v, t);
        }
    }
    let (mut l, mut r) = (best.1 - h, best.1 + h);
    for _ in 0..200 {
        let m1 = l + (r - l) / 3.0;
        let m2 = r - (r - l) / 3.0;
        if brute_force_phi(spec, m1).0 <= brute_force_phi(spec, m2).0 {
            r = m2;
        } else {
            l = m1;
        }
    }
    let theta = 0.5 * (l + r);
    let (value, omega) = brute_force_phi(spec, theta);
    (theta, omega, value)
}

fn compare(source: &str, theta: f64, omega: &[f64], value: f64, reference: (f64, &[f64], f64)) -> Discrepancy {
    let omega_diff = omega
        .iter()
        .zip(reference.1)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    Discrepancy {
        source: source.to_string(),
        theta_diff: (theta - reference.0).abs(),
        omega_diff,
        value_diff: (value - reference.2).abs(),
    }
}

impl Discrepancy {
    pub fn exceeds(&self, tol: f64) -> bool {
        self.theta_diff > tol || self.omega_diff > tol || self.value_diff > tol
    }
}

/// Closed-form optimum verified against brute force.
pub fn toy_reference(spec: &ToySpec) -> ToyReference {
    let (ct, co, cv) = toy_closed_form(spec);
    let (bt, bo, bv) = toy_brute_force(spec);
    let d = compare("closed form", ct, &co, cv, (bt, &bo, bv));
    if d.exceeds(REFERENCE_TOL) {
        ToyReference {
            theta: bt,
            omega: bo,
            value: bv,
            discrepancy: Some(d),
        }
    } else {
        ToyReference {
            theta: ct,
            omega: co,
            value: cv,
            discrepancy: None,
        }
    }
}

impl ToyReference {
    /// Compares an externally claimed optimum with this reference. Returns
    /// the discrepancy if any component differs by more than `tol`.
    pub fn check_claim(&self, source: &str, theta: f64, omega: &[f64], spec: &ToySpec, tol: f64) -> Option<Discrepancy> {
        let value = ToyOracle::new(spec.clone()).f_ol(&[theta], omega, 0);
        let d = compare(source, theta, omega, value, (self.theta, &self.omega, self.value));
        d.exceeds(tol).then_some(d)
    }
}

//! Small matrix-free linear algebra for the implicit-gradient baselines,
//! the rank-one solve behind the gradient-response closed form, and a PSD
//! square root for the Fréchet distance.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::param::{dot, norm, ParamVector};

/// A linear map on `R^dim`, possibly matrix-free.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&mut self, v: &[f64]) -> ParamVector;
}

/// Wraps a closure as a [`LinearOperator`].
pub struct FnOperator<F> {
    dim: usize,
    f: F,
}

impl<F: FnMut(&[f64]) -> ParamVector> FnOperator<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: FnMut(&[f64]) -> ParamVector> LinearOperator for FnOperator<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&mut self, v: &[f64]) -> ParamVector {
        (self.f)(v)
    }
}

/// Dense square matrix operator.
pub struct DenseOperator(pub DMatrix<f64>);

impl LinearOperator for DenseOperator {
    fn dim(&self) -> usize {
        self.0.nrows()
    }

    fn apply(&mut self, v: &[f64]) -> ParamVector {
        let x = nalgebra::DVector::from_column_slice(v);
        (&self.0 * x).as_slice().into()
    }
}

/// `v -> s * v`
pub fn scaled_identity(dim: usize, s: f64) -> FnOperator<impl FnMut(&[f64]) -> ParamVector> {
    FnOperator::new(dim, move |v: &[f64]| v.iter().map(|x| s * x).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CgOutcome {
    pub x: ParamVector,
    pub iters: usize,
    /// Final residual norm `|A x - b|` as tracked by the recurrence.
    pub residual: f64,
    /// A search direction with non-positive curvature ended the solve early.
    pub negative_curvature: bool,
}

/// Conjugate gradient for `A x = b`, stopping at `|A x - b| <= tol * |b|`.
pub fn cg_solve<A: LinearOperator + ?Sized>(a: &mut A, b: &[f64], tol: f64, max_iter: usize) -> CgOutcome {
    let n = b.len();
    assert_eq!(a.dim(), n, "cg_solve: operator/rhs dimension mismatch");
    let mut x = ParamVector::zeros(n);
    let mut r = ParamVector::from(b);
    let b_norm = norm(b);
    let target = tol * b_norm;
    let mut rs = r.dot(&r);
    if rs.sqrt() <= target || b_norm == 0.0 {
        return CgOutcome {
            x,
            iters: 0,
            residual: rs.sqrt(),
            negative_curvature: false,
        };
    }
    let mut p = r.clone();
    let mut iters = 0;
    while iters < max_iter {
        let ap = a.apply(&p);
        let curvature = p.dot(&ap);
        if !(curvature > 0.0) {
            return CgOutcome {
                x,
                iters,
                residual: rs.sqrt(),
                negative_curvature: true,
            };
        }
        let step = rs / curvature;
        x.axpy(step, &p);
        r.axpy(-step, &ap);
        iters += 1;
        let rs_new = r.dot(&r);
        if rs_new.sqrt() <= target {
            rs = rs_new;
            break;
        }
        let beta = rs_new / rs;
        rs = rs_new;
        for (pi, ri) in p.iter_mut().zip(r.iter()) {
            *pi = ri + beta * *pi;
        }
    }
    CgOutcome {
        x,
        iters,
        residual: rs.sqrt(),
        negative_curvature: false,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeumannOutcome {
    pub x: ParamVector,
    pub terms_used: usize,
    pub diverged: bool,
}

const NEUMANN_DIVERGENCE_FACTOR: f64 = 1e6;

/// Truncated Neumann series `step * sum_{k<terms} (I - step A)^k b`
/// approximating `A^{-1} b`. Converges when `step * |A| < 1`.
pub fn neumann_hypergrad<A: LinearOperator + ?Sized>(
    a: &mut A,
    b: &[f64],
    step: f64,
    terms: usize,
) -> NeumannOutcome {
    assert_eq!(a.dim(), b.len(), "neumann: operator/rhs dimension mismatch");
    let limit = NEUMANN_DIVERGENCE_FACTOR * norm(b);
    let mut term = ParamVector::from(b);
    let mut sum = ParamVector::zeros(b.len());
    let mut used = 0;
    for k in 0..terms {
        if k > 0 {
            let at = a.apply(&term);
            term.axpy(-step, &at);
        }
        sum.axpy(1.0, &term);
        used += 1;
        if !sum.is_finite() || sum.norm() > limit {
            return NeumannOutcome {
                x: sum.scaled(step),
                terms_used: used,
                diverged: true,
            };
        }
    }
    NeumannOutcome {
        x: sum.scaled(step),
        terms_used: used,
        diverged: false,
    }
}

/// Below this norm the rank-one system carries no information.
pub const DEGENERATE_GRAD_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct RankOneSolve {
    pub b: ParamVector,
    pub degenerate: bool,
}

/// Minimum-norm least-squares solution of `(g g^T) B = rhs`.
///
/// The pseudo-inverse of `g g^T` is `g g^T / |g|^4`, so
/// `B = g (g^T rhs) / (g^T g)^2`. The squared system
/// `(g g^T)^2 B = (g g^T)^T rhs` has the same minimum-norm solution.
pub fn rank_one_min_norm_solve(g: &[f64], rhs: &[f64]) -> RankOneSolve {
    assert_eq!(g.len(), rhs.len(), "rank-one solve length mismatch");
    let gg = dot(g, g);
    if gg.sqrt() < DEGENERATE_GRAD_NORM {
        return RankOneSolve {
            b: ParamVector::zeros(g.len()),
            degenerate: true,
        };
    }
    let coef = dot(g, rhs) / (gg * gg);
    RankOneSolve {
        b: g.iter().map(|gi| gi * coef).collect(),
        degenerate: false,
    }
}

/// Eigenvalues above this (negative) threshold are clamped to zero.
pub const PSD_NEGATIVE_TOL: f64 = 1e-10;

/// Principal square root of a symmetric PSD matrix of dimension at most 3.
pub fn psd_sqrt_small(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = m.nrows();
    if d != m.ncols() || d == 0 || d > 3 {
        return Err(Error::InvalidArgument(format!(
            "psd_sqrt_small expects a square matrix of size 1..=3, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -PSD_NEGATIVE_TOL {
        return Err(Error::NotPsd { min_eigenvalue: min });
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&roots) * q.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(n, n) * 0.5
    }

    fn dense_solve(m: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
        m.clone()
            .lu()
            .solve(&DVector::from_column_slice(b))
            .unwrap()
            .as_slice()
            .to_vec()
    }

    #[test]
    fn cg_scaled_identity_one_iteration() {
        let out = cg_solve(&mut scaled_identity(2, 2.0), &[4.0, 6.0], 1e-12, 10);
        assert_eq!(out.iters, 1);
        assert!((out.x[0] - 2.0).abs() < 1e-15 && (out.x[1] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn cg_identity_returns_rhs() {
        let b = [1.0, -2.0, 0.5];
        let out = cg_solve(&mut scaled_identity(3, 1.0), &b, 1e-12, 10);
        assert_eq!(out.x.as_slice(), &b);
    }

    #[test]
    fn cg_matches_dense_lu_on_random_spd() {
        let m = random_spd(5, 11);
        let b = [0.3, -1.0, 2.0, 0.7, -0.2];
        let expected = dense_solve(&m, &b);
        let out = cg_solve(&mut DenseOperator(m), &b, 1e-14, 50);
        for (x, e) in out.x.iter().zip(&expected) {
            assert!((x - e).abs() < 1e-8, "{x} vs {e}");
        }
    }

    #[test]
    fn cg_flags_negative_curvature() {
        let out = cg_solve(&mut scaled_identity(2, -1.0), &[1.0, 1.0], 1e-10, 10);
        assert!(out.negative_curvature);
        assert_eq!(out.iters, 0);
    }

    #[test]
    fn cg_zero_rhs() {
        let out = cg_solve(&mut scaled_identity(2, 3.0), &[0.0, 0.0], 1e-10, 10);
        assert_eq!(out.iters, 0);
        assert!(out.x.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn neumann_identity_collapses() {
        let b = [0.5, -3.0];
        for terms in [1, 2, 7] {
            let out = neumann_hypergrad(&mut scaled_identity(2, 1.0), &b, 1.0, terms);
            assert_eq!(out.x.as_slice(), &b);
            assert!(!out.diverged);
        }
    }

    #[test]
    fn neumann_converges_to_half() {
        let b = [1.0, -4.0];
        let out = neumann_hypergrad(&mut scaled_identity(2, 2.0), &b, 0.25, 50);
        assert!((out.x[0] - 0.5).abs() < 1e-6 && (out.x[1] + 2.0).abs() < 1e-6);
    }

    #[test]
    fn neumann_detects_divergence() {
        let out = neumann_hypergrad(&mut scaled_identity(1, 4.0), &[1.0], 1.0, 50);
        assert!(out.diverged);
    }

    #[test]
    fn neumann_long_series_matches_cg() {
        let m = random_spd(6, 3);
        let b = [1.0, 0.0, -1.0, 2.0, 0.5, 0.25];
        let eig_max = SymmetricEigen::new(m.clone()).eigenvalues.max();
        let cg = cg_solve(&mut DenseOperator(m.clone()), &b, 1e-14, 100);
        let ns = neumann_hypergrad(&mut DenseOperator(m), &b, 1.0 / eig_max, 500);
        for (x, y) in ns.x.iter().zip(cg.x.iter()) {
            assert!((x - y).abs() <= 1e-4 * cg.x.norm(), "{x} vs {y}");
        }
    }

    #[test]
    fn rank_one_examples() {
        let s = rank_one_min_norm_solve(&[1.0, 0.0], &[-2.0, 0.0]);
        assert_eq!(s.b.as_slice(), &[-2.0, 0.0]);
        let s = rank_one_min_norm_solve(&[1.0, 0.0], &[0.0, 5.0]);
        assert_eq!(s.b.as_slice(), &[0.0, 0.0]);
        // g g^T [0.12, 0.16] = [3, 4] * (0.36 + 0.64)
        let s = rank_one_min_norm_solve(&[3.0, 4.0], &[3.0, 4.0]);
        assert!((s.b[0] - 0.12).abs() < 1e-15 && (s.b[1] - 0.16).abs() < 1e-15);
    }

    #[test]
    fn rank_one_degenerate_gradient() {
        let s = rank_one_min_norm_solve(&[1e-13, 0.0], &[1.0, 1.0]);
        assert!(s.degenerate);
        assert!(s.b.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn psd_sqrt_examples() {
        let s = psd_sqrt_small(&(DMatrix::identity(2, 2) * 4.0)).unwrap();
        assert!((s.clone() - DMatrix::identity(2, 2) * 2.0).abs().max() < 1e-12);
        let s = psd_sqrt_small(&DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 9.0]))).unwrap();
        assert!((s[(0, 0)] - 1.0).abs() < 1e-12 && (s[(1, 1)] - 3.0).abs() < 1e-12);
        assert!(s[(0, 1)].abs() < 1e-12);
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let s = psd_sqrt_small(&m).unwrap();
        assert!((&s * &s - m).abs().max() < 1e-10);
    }

    #[test]
    fn psd_sqrt_rejects_indefinite_and_large() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(psd_sqrt_small(&m), Err(Error::NotPsd { .. })));
        assert!(psd_sqrt_small(&DMatrix::identity(4, 4)).is_err());
        // tiny negative eigenvalues are clamped
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-12]);
        assert!(psd_sqrt_small(&m).is_ok());
    }

    fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0..10.0f64, n)
    }

    proptest! {
        #[test]
        fn cg_matches_dense_solve(n in 1usize..=20, seed in any::<u64>()) {
            let m = random_spd(n, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let expected = dense_solve(&m, &b);
            let out = cg_solve(&mut DenseOperator(m), &b, 1e-13, 10 * n);
            let scale = norm(&expected).max(1e-12);
            for (x, e) in out.x.iter().zip(&expected) {
                prop_assert!((x - e).abs() <= 1e-6 * scale);
            }
        }

        #[test]
        fn rank_one_lies_in_span_with_orthogonal_residual(
            (g, rhs) in (1usize..8).prop_flat_map(|n| (vec_strategy(n), vec_strategy(n)))
        ) {
            prop_assume!(norm(&g) > 1e-3);
            let s = rank_one_min_norm_solve(&g, &rhs);
            // B is parallel to g
            let gb = dot(&g, &s.b);
            let gg = dot(&g, &g);
            for (bi, gi) in s.b.iter().zip(&g) {
                prop_assert!((bi - gi * gb / gg).abs() <= 1e-9 * (1.0 + bi.abs()));
            }
            // rhs - (g g^T) B is orthogonal to g
            let residual: Vec<f64> = rhs.iter().zip(&g).map(|(r, gi)| r - gi * gb).collect();
            prop_assert!(dot(&residual, &g).abs() <= 1e-9 * (1.0 + norm(&rhs)) * norm(&g));
            // and it solves the squared normal system too
            let lhs: Vec<f64> = g.iter().map(|gi| gi * gg * gb).collect();
            let right: Vec<f64> = g.iter().map(|gi| gi * dot(&g, &rhs)).collect();
            for (l, r) in lhs.iter().zip(&right) {
                prop_assert!((l - r).abs() <= 1e-9 * (1.0 + r.abs()));
            }
        }

        #[test]
        fn operator_linearity(a in -3.0..3.0f64, b in -3.0..3.0f64, seed in any::<u64>()) {
            let m = random_spd(4, seed);
            let mut op = DenseOperator(m);
            let u = [1.0, 2.0, -1.0, 0.5];
            let v = [0.0, -1.0, 3.0, 2.0];
            let combo: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
            let lhs = op.apply(&combo);
            let mut rhs = op.apply(&u).scaled(a);
            rhs.axpy(b, &op.apply(&v));
            for (l, r) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((l - r).abs() <= 1e-8 * (1.0 + r.abs()));
            }
        }
    }
}

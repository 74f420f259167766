//! Sample-based evaluation: Fréchet distance, histogram Jensen-Shannon
//! divergence, captured modes, corruption F1 and relative-error curves.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::psd_sqrt_small;
use crate::nn::sigmoid;
use crate::solvers::{Reference, SolverTrace};

/// Diagonal loading added to singular covariances.
pub const FID_REGULARIZATION: f64 = 1e-8;
/// Per-cell pseudo-count for histogram divergences.
pub const JS_SMOOTHING: f64 = 1e-10;
pub const DEFAULT_CAPTURE_SIGMAS: f64 = 3.0;
pub const DEFAULT_MIN_FRACTION: f64 = 0.01;
pub const DEFAULT_JS_BINS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    /// Settings used (grid, thresholds).
    pub params: BTreeMap<String, f64>,
    pub sample_sizes: Vec<usize>,
    pub flags: Vec<String>,
}

impl MetricReport {
    fn new(name: &str, value: f64, sample_sizes: Vec<usize>) -> Self {
        Self {
            name: name.to_string(),
            value,
            params: BTreeMap::new(),
            sample_sizes,
            flags: Vec::new(),
        }
    }

    fn param(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }
}

fn mean_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mean = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1.0);
    (mean, cov)
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Fréchet distance between Gaussians fitted to two sample sets of
/// dimension at most 3, clamped at zero.
pub fn fid_gaussian(real: &DMatrix<f64>, gen: &DMatrix<f64>) -> Result<MetricReport> {
    let d = real.ncols();
    if gen.ncols() != d {
        return Err(Error::DimMismatch {
            expected: d,
            got: gen.ncols(),
            context: "fid sample dimension",
        });
    }
    if d == 0 || d > 3 {
        return Err(Error::InvalidArgument(format!("fid_gaussian supports dimensions 1..=3, got {d}")));
    }
    if real.nrows() < d + 1 || gen.nrows() < d + 1 {
        return Err(Error::InvalidArgument(format!("fid_gaussian needs at least {} samples per set", d + 1)));
    }
    let (mu_r, mut cov_r) = mean_cov(real);
    let (mu_g, mut cov_g) = mean_cov(gen);
    let mut flags = Vec::new();
    let singular = |c: &DMatrix<f64>| min_eigenvalue(c) <= 1e-12 * c.trace().max(1.0);
    if singular(&cov_r) || singular(&cov_g) {
        let reg = DMatrix::identity(d, d) * FID_REGULARIZATION;
        cov_r += &reg;
        cov_g += &reg;
        flags.push("singular covariance regularized".to_string());
    }
    // tr sqrt(S_r^{1/2} S_g S_r^{1/2}) equals tr sqrt(S_r S_g) and stays symmetric
    let root_r = psd_sqrt_small(&cov_r)?;
    let inner = &root_r * &cov_g * &root_r;
    let cross = psd_sqrt_small(&inner)?;
    let diff = &mu_r - &mu_g;
    let raw = diff.dot(&diff) + cov_r.trace() + cov_g.trace() - 2.0 * cross.trace();
    let mut report = MetricReport::new("fid", raw.max(0.0), vec![real.nrows(), gen.nrows()]);
    report.flags = flags;
    Ok(report)
}

/// Histogram grid: `bins` equal cells per dimension over `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistGrid {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl HistGrid {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Self {
        Self { lo, hi, bins }
    }

    /// Cell index, or `None` for samples outside the box.
    fn cell(&self, row: impl Iterator<Item = f64>) -> Option<usize> {
        let width = (self.hi - self.lo) / self.bins as f64;
        let mut idx = 0;
        for v in row {
            if !(v >= self.lo && v <= self.hi) {
                return None;
            }
            let b = (((v - self.lo) / width) as usize).min(self.bins - 1);
            idx = idx * self.bins + b;
        }
        Some(idx)
    }

    fn histogram(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let cells = self.bins.pow(x.ncols() as u32);
        // last entry is the overflow cell
        let mut h = vec![JS_SMOOTHING; cells + 1];
        for row in x.row_iter() {
            let i = self.cell(row.iter().copied()).unwrap_or(cells);
            h[i] += 1.0;
        }
        let total: f64 = h.iter().sum();
        h.iter_mut().for_each(|v| *v /= total);
        h
    }
}

/// Jensen-Shannon divergence (natural log) of the two empirical histograms.
/// Samples outside the grid share one overflow cell.
pub fn js_histogram(real: &DMatrix<f64>, gen: &DMatrix<f64>, grid: HistGrid) -> Result<MetricReport> {
    if grid.bins < 2 || !(grid.hi > grid.lo) {
        return Err(Error::InvalidArgument("histogram grid needs bins >= 2 and hi > lo".into()));
    }
    if real.ncols() != gen.ncols() {
        return Err(Error::DimMismatch {
            expected: real.ncols(),
            got: gen.ncols(),
            context: "js sample dimension",
        });
    }
    if real.nrows() == 0 || gen.nrows() == 0 {
        return Err(Error::InvalidArgument("js_histogram needs non-empty sample sets".into()));
    }
    let p = grid.histogram(real);
    let q = grid.histogram(gen);
    let mut js = 0.0;
    for (a, b) in p.iter().zip(&q) {
        let m = 0.5 * (a + b);
        js += 0.5 * a * (a / m).ln() + 0.5 * b * (b / m).ln();
    }
    let js = js.clamp(0.0, std::f64::consts::LN_2);
    Ok(MetricReport::new("js", js, vec![real.nrows(), gen.nrows()])
        .param("lo", grid.lo)
        .param("hi", grid.hi)
        .param("bins", grid.bins as f64))
}

/// Number of centers that hold at least `min_fraction` of the samples within
/// `capture_sigmas * sigma`.
pub fn mode_count(gen: &DMatrix<f64>, centers: &[Vec<f64>], sigma: f64, capture_sigmas: f64, min_fraction: f64) -> usize {
    if gen.nrows() == 0 {
        return 0;
    }
    let r2 = (capture_sigmas * sigma).powi(2);
    let need = min_fraction * gen.nrows() as f64;
    centers
        .iter()
        .filter(|c| {
            let hits = gen
                .row_iter()
                .filter(|row| row.iter().zip(c.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() <= r2)
                .count();
            hits as f64 >= need && hits > 0
        })
        .count()
}

pub fn mode_report(gen: &DMatrix<f64>, centers: &[Vec<f64>], sigma: f64, capture_sigmas: f64, min_fraction: f64) -> MetricReport {
    let k = mode_count(gen, centers, sigma, capture_sigmas, min_fraction);
    MetricReport::new("modes", k as f64, vec![gen.nrows()])
        .param("capture_sigmas", capture_sigmas)
        .param("min_fraction", min_fraction)
        .param("sigma", sigma)
        .param("max_modes", centers.len() as f64)
}

/// F1 of flagging sample `i` as corrupted when `sigmoid(theta_i) < threshold`.
pub fn f1_corruption(theta: &[f64], truth: &[bool], threshold: f64) -> Result<f64> {
    if theta.len() != truth.len() {
        return Err(Error::DimMismatch {
            expected: truth.len(),
            got: theta.len(),
            context: "f1 weight logits",
        });
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (t, &corrupted) in theta.iter().zip(truth) {
        match (sigmoid(*t) < threshold, corrupted) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let predicted = tp + fp;
    let actual = tp + fneg;
    if predicted == 0 {
        return Ok(if actual == 0 { 1.0 } else { 0.0 });
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / predicted as f64;
    let recall = tp as f64 / actual as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RelErrSeries {
    pub iters: Vec<usize>,
    pub theta: Vec<f64>,
    pub ol: Vec<f64>,
    /// The reference `theta` was zero, so `theta` holds absolute errors.
    pub theta_absolute: bool,
    /// The reference value was zero, so `ol` holds absolute errors.
    pub ol_absolute: bool,
}

/// `|x - reference| / |reference|`; the absolute error (and `true`) when
/// the reference is zero.
pub fn relative_error(x: &[f64], reference: &[f64]) -> (f64, bool) {
    let diff = x
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale = crate::param::norm(reference);
    if scale > 0.0 {
        (diff / scale, false)
    } else {
        (diff, true)
    }
}

/// `|theta_k - theta*| / |theta*|` and `|F_OL_k - phi*| / |phi*|` per record.
/// The parameter errors are the ones recorded during the run against the
/// same reference.
pub fn rel_err_series(trace: &SolverTrace, reference: &Reference) -> Result<RelErrSeries> {
    let mut out = RelErrSeries {
        theta_absolute: reference.theta.norm() == 0.0,
        ol_absolute: reference.value == 0.0,
        ..Default::default()
    };
    for rec in &trace.records {
        let Some(err) = rec.theta_rel_err else {
            return Err(Error::InvalidArgument(format!(
                "record {} carries no parameter error: the run had no reference",
                rec.iter
            )));
        };
        out.iters.push(rec.iter);
        out.theta.push(err);
        let dv = (rec.ol_value - reference.value).abs();
        out.ol.push(if out.ol_absolute { dv } else { dv / reference.value.abs() });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::ParamVector;
    use crate::solvers::{IterRecord, Status, TraceFlags, Variant};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn gaussian(rows: usize, dim: usize, sd: f64, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, sd).unwrap();
        DMatrix::from_fn(rows, dim, |_, _| n.sample(&mut rng))
    }

    fn points(rows: &[[f64; 2]]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), 2, |r, c| rows[r][c])
    }

    #[test]
    fn fid_of_identical_sets_is_zero() {
        let a = gaussian(200, 2, 1.0, 1);
        assert!(fid_gaussian(&a, &a).unwrap().value < 1e-8);
    }

    #[test]
    fn fid_of_unit_separated_point_masses() {
        let real = points(&[[0.0, 0.0]; 10]);
        let gen = points(&[[1.0, 0.0]; 10]);
        let r = fid_gaussian(&real, &gen).unwrap();
        assert!((r.value - 1.0).abs() < 1e-7);
        assert_eq!(r.flags.len(), 1);
    }

    #[test]
    fn fid_of_scaled_gaussians_matches_closed_form() {
        for d in 1..=3 {
            let real = gaussian(200_000, d, 1.0, 2);
            let gen = gaussian(200_000, d, 2.0, 3);
            let v = fid_gaussian(&real, &gen).unwrap().value;
            assert!((v - d as f64).abs() < 0.05 * d as f64, "d={d}: {v}");
        }
    }

    #[test]
    fn fid_rejects_bad_shapes() {
        assert!(fid_gaussian(&gaussian(10, 4, 1.0, 0), &gaussian(10, 4, 1.0, 1)).is_err());
        assert!(fid_gaussian(&gaussian(2, 2, 1.0, 0), &gaussian(10, 2, 1.0, 1)).is_err());
    }

    #[test]
    fn js_examples() {
        let grid = HistGrid::new(-5.0, 5.0, 64);
        let a = gaussian(500, 2, 1.0, 4);
        assert!(js_histogram(&a, &a, grid).unwrap().value < 1e-9);
        let far = a.map(|v| v * 0.1 - 3.0);
        let near = a.map(|v| v * 0.1 + 3.0);
        assert!((js_histogram(&far, &near, grid).unwrap().value - std::f64::consts::LN_2).abs() < 1e-6);
        let mut shuffled = a.clone();
        shuffled.swap_rows(0, 499);
        shuffled.swap_rows(3, 17);
        assert!(js_histogram(&a, &shuffled, grid).unwrap().value < 1e-12);
        assert!(js_histogram(&a, &a, HistGrid::new(0.0, 1.0, 1)).is_err());
    }

    #[test]
    fn out_of_grid_samples_share_overflow_cell() {
        let grid = HistGrid::new(-1.0, 1.0, 4);
        let a = points(&[[10.0, 0.0]; 5]);
        let b = points(&[[0.0, -10.0]; 5]);
        assert!(js_histogram(&a, &b, grid).unwrap().value < 1e-9);
    }

    #[test]
    fn mode_examples() {
        let centers = crate::problems::mog::MogFamily::ring().centers();
        let all: Vec<[f64; 2]> = centers.iter().map(|c| [c[0], c[1]]).cycle().take(80).collect();
        assert_eq!(mode_count(&points(&all), &centers, 0.1414, 3.0, 0.01), 8);
        let one = points(&[[centers[0][0], centers[0][1]]; 50]);
        assert_eq!(mode_count(&one, &centers, 0.1414, 3.0, 0.01), 1);
        let half: Vec<[f64; 2]> = centers.iter().step_by(2).map(|c| [c[0], c[1]]).cycle().take(40).collect();
        let r = mode_report(&points(&half), &centers, 0.1414, 3.0, 0.01);
        assert_eq!(r.value, 4.0);
        assert_eq!(r.params["max_modes"], 8.0);
    }

    #[test]
    fn f1_examples() {
        let truth = [true, false, true, false];
        let perfect = [-10.0, 10.0, -10.0, 10.0];
        assert_eq!(f1_corruption(&perfect, &truth, 0.5).unwrap(), 1.0);
        let all = [-1.0; 4];
        assert!((f1_corruption(&all, &truth, 0.5).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f1_corruption(&[1.0; 4], &truth, 0.5).unwrap(), 0.0);
        assert_eq!(f1_corruption(&[1.0; 4], &[false; 4], 0.5).unwrap(), 1.0);
        assert!(f1_corruption(&[1.0; 3], &truth, 0.5).is_err());
    }

    fn trace_with(errs: &[f64], values: &[f64]) -> SolverTrace {
        let records = errs
            .iter()
            .zip(values)
            .enumerate()
            .map(|(i, (e, v))| IterRecord {
                iter: i,
                theta_rel_err: Some(*e),
                ol_value: *v,
                cl_value: 0.0,
                grad_norm_theta: 0.0,
                wall_ms: 0.0,
                grad_eval_count: 0,
                hvp_eval_count: 0,
                peak_tracked_bytes: 0,
                batch: 0,
            })
            .collect();
        SolverTrace {
            variant: Variant::FastGr,
            records,
            status: Status::MaxIters,
            iterations: errs.len(),
            stop_iter: None,
            diverged_at: None,
            flags: TraceFlags::default(),
            theta: ParamVector::zeros(1),
            omega: ParamVector::zeros(1),
        }
    }

    #[test]
    fn relative_error_examples() {
        assert_eq!(relative_error(&[2.0, 4.0], &[1.0, 2.0]), (1.0, false));
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), (0.0, false));
        assert_eq!(relative_error(&[3.0, 4.0], &[0.0, 0.0]), (5.0, true));
    }

    #[test]
    fn series_reads_records() {
        let reference = Reference {
            theta: vec![1.0].into(),
            value: 2.0,
        };
        let s = rel_err_series(&trace_with(&[0.5, 0.0], &[4.0, 2.0]), &reference).unwrap();
        assert_eq!(s.theta, vec![0.5, 0.0]);
        assert_eq!(s.ol, vec![1.0, 0.0]);
        assert!(!s.ol_absolute);
        let zero = Reference {
            theta: vec![0.0].into(),
            value: 0.0,
        };
        let s = rel_err_series(&trace_with(&[0.5], &[-3.0]), &zero).unwrap();
        assert!(s.theta_absolute && s.ol_absolute);
        assert_eq!(s.ol, vec![3.0]);
    }

    proptest! {
        #[test]
        fn fid_is_symmetric(seed in any::<u64>(), d in 1usize..=3) {
            let a = gaussian(50, d, 1.0, seed);
            let b = gaussian(60, d, 1.7, seed ^ 1).map(|v| v + 0.3);
            let ab = fid_gaussian(&a, &b).unwrap().value;
            let ba = fid_gaussian(&b, &a).unwrap().value;
            prop_assert!((ab - ba).abs() <= 1e-10 * ab.max(1.0));
        }

        #[test]
        fn js_is_symmetric_and_bounded(seed in any::<u64>(), shift in -3.0f64..3.0) {
            let a = gaussian(100, 2, 1.0, seed);
            let b = gaussian(80, 2, 1.0, seed ^ 7).map(|v| v + shift);
            let grid = HistGrid::new(-4.0, 4.0, 16);
            let ab = js_histogram(&a, &b, grid).unwrap().value;
            let ba = js_histogram(&b, &a, grid).unwrap().value;
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=std::f64::consts::LN_2).contains(&ab));
        }

        #[test]
        fn mode_count_ignores_order_and_duplication(seed in any::<u64>()) {
            let centers = crate::problems::mog::MogFamily::grid().centers();
            let a = gaussian(300, 2, 2.5, seed);
            let mut reversed = a.clone();
            for i in 0..150 {
                reversed.swap_rows(i, 299 - i);
            }
            let doubled = DMatrix::from_fn(600, 2, |r, c| a[(r % 300, c)]);
            let k = mode_count(&a, &centers, 0.14, 3.0, 0.01);
            prop_assert_eq!(k, mode_count(&reversed, &centers, 0.14, 3.0, 0.01));
            prop_assert_eq!(k, mode_count(&doubled, &centers, 0.14, 3.0, 0.01));
        }

        #[test]
        fn f1_invariant_under_monotone_maps(logits in proptest::collection::vec(-5.0f64..5.0, 1..40), seed in any::<u64>()) {
            let truth: Vec<bool> = logits.iter().enumerate().map(|(i, _)| (seed >> (i % 64)) & 1 == 1).collect();
            let mapped: Vec<f64> = logits.iter().map(|t| t * t * t + 3.0 * t).collect();
            prop_assert_eq!(f1_corruption(&logits, &truth, 0.5).unwrap(), f1_corruption(&mapped, &truth, 0.5).unwrap());
        }
    }
}

//! Built-in verification gate: oracle gradient checks, MLP reverse-mode
//! checks, metric sanity cases and the toy reference comparison.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::{fid_gaussian, js_histogram, mode_count, HistGrid};
use crate::nn::{mlp_backward, mlp_forward, mlp_init, Activation, MlpSpec};
use crate::oracle::{oracle_self_test_scaled, BilevelOracle, SelfTestReport};
use crate::problems::gan::{GanLoss, GanOracle, GanProblemSpec};
use crate::problems::hyperclean::{HyperCleanOracle, HyperCleanSpec};
use crate::problems::meta::{MetaOracle, MetaTaskSpec};
use crate::problems::mog::{MogFamily, MogSpec};
use crate::problems::quadratic::QuadraticPair;
use crate::problems::toy::{toy_reference, ToyOracle, ToySpec, REFERENCE_TOL};

pub const ORACLE_TOL: f64 = 1e-4;
pub const MLP_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelfTestSummary {
    pub checks: Vec<Check>,
    /// Known discrepancies that are reported without failing the gate.
    pub notices: Vec<String>,
}

impl SelfTestSummary {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn push(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    fn push_oracle(&mut self, report: Result<SelfTestReport>) {
        match report {
            Ok(r) => {
                let detail = format!("max rel err {:.2e} over {} probes", r.max_rel_err.max(), r.probes);
                let name = format!("oracle gradients: {}", r.oracle);
                self.push(name, r.passed(), detail);
            }
            Err(e) => self.push("oracle gradients", false, e.to_string()),
        }
    }
}

/// Worst relative error of MLP parameter and input gradients against
/// central differences with step 1e-4.
pub fn mlp_gradient_error(spec: &MlpSpec, seed: u64, rows: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = mlp_init(spec, seed).flat;
    let x = DMatrix::from_fn(rows, spec.input_dim(), |_, _| rng.random_range(-1.0..1.0));
    let up = DMatrix::from_fn(rows, spec.output_dim(), |_, _| rng.random_range(-1.0..1.0));
    let cache = mlp_forward(spec, &params, &x)?;
    let (g, gx) = mlp_backward(spec, &params, &cache, &up)?;
    let objective = |p: &[f64], x: &DMatrix<f64>| -> Result<f64> { Ok(mlp_forward(spec, p, x)?.output().component_mul(&up).sum()) };
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut rel = |fd: f64, an: f64| worst = worst.max((fd - an).abs() / fd.abs().max(1e-2));
    let mut p = params.clone();
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let fp = objective(&p, &x)?;
        p[i] = orig - h;
        let fm = objective(&p, &x)?;
        p[i] = orig;
        rel((fp - fm) / (2.0 * h), g[i]);
    }
    let mut xw = x.clone();
    for i in 0..xw.len() {
        let orig = xw[i];
        xw[i] = orig + h;
        let fp = objective(&params, &xw)?;
        xw[i] = orig - h;
        let fm = objective(&params, &xw)?;
        xw[i] = orig;
        rel((fp - fm) / (2.0 * h), gx[i]);
    }
    Ok(worst)
}

fn small_gan(loss: GanLoss) -> Result<GanOracle> {
    let mut mog = MogSpec::new(MogFamily::ring());
    mog.batch = 32;
    GanOracle::new(GanProblemSpec::standard(loss, mog, 8, 4, 3)?)
}

fn oracle_checks(summary: &mut SelfTestSummary) {
    let check = |o: &dyn BilevelOracle, scale: f64| oracle_self_test_scaled(o, 3, 17, ORACLE_TOL, scale);
    summary.push_oracle(check(&QuadraticPair::new(4), 1.0));
    for n in [1, 3] {
        summary.push_oracle(check(&ToyOracle::new(ToySpec::uniform(2.0, 2.0, n)), 1.0));
    }
    for loss in [GanLoss::VanillaBce, GanLoss::least_squares(), GanLoss::wasserstein()] {
        match small_gan(loss) {
            Ok(o) => summary.push_oracle(check(&o, 0.5)),
            Err(e) => summary.push("oracle gradients: gan", false, e.to_string()),
        }
    }
    let hc = HyperCleanOracle::new(HyperCleanSpec {
        n_train: 60,
        n_val: 40,
        n_test: 40,
        eta: 0.01,
        ..Default::default()
    });
    match hc {
        Ok(o) => summary.push_oracle(check(&o, 0.3)),
        Err(e) => summary.push("oracle gradients: hyperclean", false, e.to_string()),
    }
    match MetaTaskSpec::standard(3, 4, 2, 5).and_then(MetaOracle::new) {
        Ok(o) => summary.push_oracle(check(&o, 0.5)),
        Err(e) => summary.push("oracle gradients: meta", false, e.to_string()),
    }
}

fn mlp_checks(summary: &mut SelfTestSummary) {
    let leaky = Activation::LeakyRelu { slope: 0.2 };
    let specs = [
        ("tanh/sigmoid 3-4-2", vec![3, 4, 2], Activation::Tanh, Activation::Sigmoid),
        ("leaky 3-4-2", vec![3, 4, 2], leaky, Activation::Identity),
        ("generator 4-8-8-2", vec![4, 8, 8, 2], leaky, Activation::Identity),
        ("discriminator 2-8-8-1", vec![2, 8, 8, 1], leaky, Activation::Identity),
        ("embedder 16-16-8", vec![16, 16, 8], Activation::Tanh, Activation::Identity),
    ];
    for (name, widths, act, last) in specs {
        let result = MlpSpec::new(widths, act, last).and_then(|s| mlp_gradient_error(&s, 7, 5));
        match result {
            Ok(err) => summary.push(format!("mlp backward: {name}"), err <= MLP_TOL, format!("max rel err {err:.2e}")),
            Err(e) => summary.push(format!("mlp backward: {name}"), false, e.to_string()),
        }
    }
}

fn metric_checks(summary: &mut SelfTestSummary) {
    let grid_pts = |pts: &[[f64; 2]]| DMatrix::from_fn(pts.len(), 2, |r, c| pts[r][c]);
    let spread: Vec<[f64; 2]> = (0..50).map(|i| [(i as f64 * 0.7).sin(), (i as f64 * 1.3).cos()]).collect();
    let a = grid_pts(&spread);

    let fid_same = fid_gaussian(&a, &a).map(|r| r.value);
    summary.push("fid: identical sets", matches!(fid_same, Ok(v) if v < 1e-8), format!("{fid_same:?}"));
    let fid_shift = fid_gaussian(&grid_pts(&[[0.0, 0.0]; 10]), &grid_pts(&[[1.0, 0.0]; 10])).map(|r| r.value);
    summary.push("fid: unit-separated point masses", matches!(fid_shift, Ok(v) if (v - 1.0).abs() < 1e-6), format!("{fid_shift:?}"));

    let grid = HistGrid::new(-4.0, 4.0, 64);
    let js_same = js_histogram(&a, &a, grid).map(|r| r.value);
    summary.push("js: identical sets", matches!(js_same, Ok(v) if v < 1e-9), format!("{js_same:?}"));
    let js_far = js_histogram(&a.map(|v| v * 0.1 - 2.0), &a.map(|v| v * 0.1 + 2.0), grid).map(|r| r.value);
    summary.push(
        "js: disjoint supports",
        matches!(js_far, Ok(v) if (v - std::f64::consts::LN_2).abs() < 1e-6),
        format!("{js_far:?}"),
    );

    let centers = MogFamily::ring().centers();
    let sigma = 0.02f64.sqrt();
    let at = |idx: &[usize], copies: usize| {
        let pts: Vec<[f64; 2]> = (0..copies).flat_map(|_| idx.iter().map(|&i| [centers[i][0], centers[i][1]])).collect();
        grid_pts(&pts)
    };
    let cases = [
        ("modes: all centers", at(&[0, 1, 2, 3, 4, 5, 6, 7], 10), 8),
        ("modes: total collapse", at(&[0], 50), 1),
        ("modes: half the ring", at(&[0, 2, 4, 6], 10), 4),
    ];
    for (name, x, want) in cases {
        let got = mode_count(&x, &centers, sigma, 3.0, 0.01);
        summary.push(name, got == want, format!("{got} of {want}"));
    }
}

fn toy_checks(summary: &mut SelfTestSummary) {
    for n in [1, 3] {
        let spec = ToySpec::uniform(2.0, 2.0, n);
        let r = toy_reference(&spec);
        let detail = format!("theta* {:.6}, phi* {:.6}", r.theta, r.value);
        match &r.discrepancy {
            None => summary.push(format!("toy reference n={n}: closed form = brute force"), true, detail),
            Some(d) => summary.push(format!("toy reference n={n}: closed form = brute force"), false, format!("{detail}; {d:?}")),
        }
        if n == 1 {
            let quoted_theta = 0.75 * PI;
            let quoted_omega = [0.75 * PI - 2.0];
            if let Some(d) = r.check_claim("quoted optimum (3pi/4, 3pi/4 - 2)", quoted_theta, &quoted_omega, &spec, REFERENCE_TOL) {
                summary.notices.push(format!(
                    "{}: omega differs from the verified optimum {:.6} by {:.3} (theta diff {:.1e})",
                    d.source, r.omega[0], d.omega_diff, d.theta_diff
                ));
            }
        }
    }
}

/// Runs every check. Never panics; failures are reported per check.
pub fn run_selftest() -> SelfTestSummary {
    let mut summary = SelfTestSummary::default();
    oracle_checks(&mut summary);
    mlp_checks(&mut summary);
    metric_checks(&mut summary);
    toy_checks(&mut summary);
    summary
}

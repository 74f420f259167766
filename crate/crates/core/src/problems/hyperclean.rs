//! Data hyper-cleaning: learn one weight logit per training sample so that a
//! softmax-regression model trained on the reweighted, partly mislabeled
//! training set does well on a clean validation set.
//!
//! `F_CL(theta, omega) = sum_i sigmoid(theta_i) * ce(omega; x_i, y_i)` over
//! the training set, `F_OL(theta, omega) = sum_j ce(omega; x_j, y_j) + eta |omega|^2`
//! over the validation set.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::softmax::{LabeledSet, SoftmaxModel};
use crate::blob;
use crate::error::{Error, Result};
use crate::nn::sigmoid;
use crate::oracle::{BatchId, BilevelOracle, Dims};
use crate::param::ParamVector;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperCleanSpec {
    #[serde(default = "d_n")]
    pub n_train: usize,
    #[serde(default = "d_n")]
    pub n_val: usize,
    #[serde(default = "d_n")]
    pub n_test: usize,
    #[serde(default = "d_classes")]
    pub classes: usize,
    #[serde(default = "d_dim")]
    pub feature_dim: usize,
    #[serde(default = "d_rate")]
    pub corruption_rate: f64,
    #[serde(default)]
    pub eta: f64,
    /// Class means sit at `center_scale * e_k`.
    #[serde(default = "d_scale")]
    pub center_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

fn d_n() -> usize {
    500
}
fn d_classes() -> usize {
    5
}
fn d_dim() -> usize {
    20
}
fn d_rate() -> f64 {
    0.5
}
fn d_scale() -> f64 {
    3.0
}

impl Default for HyperCleanSpec {
    fn default() -> Self {
        Self {
            n_train: d_n(),
            n_val: d_n(),
            n_test: d_n(),
            classes: d_classes(),
            feature_dim: d_dim(),
            corruption_rate: d_rate(),
            eta: 0.0,
            center_scale: d_scale(),
            seed: 0,
        }
    }
}

impl HyperCleanSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::InvalidArgument("hyperclean sample counts must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::InvalidArgument("hyperclean needs at least two classes".into()));
        }
        if self.feature_dim < self.classes {
            return Err(Error::InvalidArgument("feature_dim must be at least the number of classes".into()));
        }
        if !(0.0..=1.0).contains(&self.corruption_rate) {
            return Err(Error::InvalidArgument(format!(
                "corruption_rate must lie in [0, 1], got {}",
                self.corruption_rate
            )));
        }
        if !(self.eta >= 0.0) || !(self.center_scale > 0.0) {
            return Err(Error::InvalidArgument("eta must be >= 0 and center_scale > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HyperCleanData {
    pub train: LabeledSet,
    pub val: LabeledSet,
    pub test: LabeledSet,
    /// Training labels before corruption.
    pub clean_labels: Vec<usize>,
    /// `true` where the training label was reassigned.
    pub corrupted: Vec<bool>,
}

fn draw_set(rng: &mut ChaCha8Rng, n: usize, spec: &HyperCleanSpec) -> LabeledSet {
    let d = spec.feature_dim;
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.random_range(0..spec.classes);
        for j in 0..d {
            let z: f64 = StandardNormal.sample(rng);
            x.push(z + if j == label { spec.center_scale } else { 0.0 });
        }
        y.push(label);
    }
    LabeledSet { x, y, dim: d }
}

impl HyperCleanData {
    pub fn generate(spec: &HyperCleanSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut train = draw_set(&mut rng, spec.n_train, spec);
        let val = draw_set(&mut rng, spec.n_val, spec);
        let test = draw_set(&mut rng, spec.n_test, spec);
        let clean_labels = train.y.clone();
        let n_bad = (spec.corruption_rate * spec.n_train as f64).round() as usize;
        let mut corrupted = vec![false; spec.n_train];
        for i in sample(&mut rng, spec.n_train, n_bad).into_iter() {
            let shift = rng.random_range(1..spec.classes);
            train.y[i] = (train.y[i] + shift) % spec.classes;
            corrupted[i] = true;
        }
        Ok(Self {
            train,
            val,
            test,
            clean_labels,
            corrupted,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct DumpHeader {
    spec: HyperCleanSpec,
    sizes: [usize; 3],
    dim: usize,
}

pub struct HyperCleanOracle {
    spec: HyperCleanSpec,
    model: SoftmaxModel,
    data: HyperCleanData,
}

impl HyperCleanOracle {
    pub fn new(spec: HyperCleanSpec) -> Result<Self> {
        let data = HyperCleanData::generate(&spec)?;
        Ok(Self::with_data(spec, data))
    }

    pub fn with_data(spec: HyperCleanSpec, data: HyperCleanData) -> Self {
        let model = SoftmaxModel::new(spec.feature_dim, spec.classes);
        Self { spec, model, data }
    }

    pub fn spec(&self) -> &HyperCleanSpec {
        &self.spec
    }

    pub fn data(&self) -> &HyperCleanData {
        &self.data
    }

    pub fn model(&self) -> SoftmaxModel {
        self.model
    }

    pub fn corruption_mask(&self) -> &[bool] {
        &self.data.corrupted
    }

    pub fn test_accuracy(&self, omega: &[f64]) -> f64 {
        self.model.accuracy(omega, &self.data.test)
    }

    /// Writes the generated dataset so other implementations can replay it.
    /// Payload order: train x, train y, val x, val y, test x, test y,
    /// clean train labels, corruption mask (0/1).
    pub fn dump(&self, path: &Path) -> Result<()> {
        let d = &self.data;
        let mut payload = Vec::new();
        for set in [&d.train, &d.val, &d.test] {
            payload.extend_from_slice(&set.x);
            payload.extend(set.y.iter().map(|&y| y as f64));
        }
        payload.extend(d.clean_labels.iter().map(|&y| y as f64));
        payload.extend(d.corrupted.iter().map(|&c| if c { 1.0 } else { 0.0 }));
        let header = DumpHeader {
            spec: self.spec.clone(),
            sizes: [d.train.len(), d.val.len(), d.test.len()],
            dim: self.spec.feature_dim,
        };
        blob::save(path, &header, &payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, payload): (DumpHeader, Vec<f64>) = blob::load(path)?;
        let dim = header.dim;
        let expected: usize = header.sizes.iter().map(|n| n * (dim + 1)).sum::<usize>() + 2 * header.sizes[0];
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "dataset payload has {} values, expected {expected}",
                payload.len()
            )));
        }
        let mut at = 0;
        let mut take = |n: usize| {
            let s = payload[at..at + n].to_vec();
            at += n;
            s
        };
        let mut sets = Vec::new();
        for n in header.sizes {
            let x = take(n * dim);
            let y = take(n).into_iter().map(|v| v as usize).collect();
            sets.push(LabeledSet { x, y, dim });
        }
        let n = header.sizes[0];
        let clean_labels = take(n).into_iter().map(|v| v as usize).collect();
        let corrupted = take(n).into_iter().map(|v| v != 0.0).collect();
        let test = sets.pop().expect("three sets");
        let val = sets.pop().expect("three sets");
        let train = sets.pop().expect("three sets");
        let data = HyperCleanData {
            train,
            val,
            test,
            clean_labels,
            corrupted,
        };
        Ok(Self::with_data(header.spec, data))
    }
}

fn sigmoid_prime(t: f64) -> f64 {
    let s = sigmoid(t);
    s * (1.0 - s)
}

impl BilevelOracle for HyperCleanOracle {
    fn dims(&self) -> Dims {
        Dims::new(self.spec.n_train, self.model.param_count())
    }

    fn f_ol(&self, _theta: &[f64], omega: &[f64], _batch: BatchId) -> f64 {
        let val = &self.data.val;
        let ce: f64 = (0..val.len()).map(|j| self.model.loss(omega, val.row(j), val.y[j])).sum();
        ce + self.spec.eta * omega.iter().map(|w| w * w).sum::<f64>()
    }

    fn f_cl(&self, theta: &[f64], omega: &[f64], _batch: BatchId) -> f64 {
        let tr = &self.data.train;
        (0..tr.len())
            .map(|i| sigmoid(theta[i]) * self.model.loss(omega, tr.row(i), tr.y[i]))
            .sum()
    }

    fn grad_theta_ol(&self, theta: &[f64], _omega: &[f64], _batch: BatchId) -> ParamVector {
        ParamVector::zeros(theta.len())
    }

    fn grad_omega_ol(&self, _theta: &[f64], omega: &[f64], _batch: BatchId) -> ParamVector {
        let val = &self.data.val;
        let mut g: ParamVector = omega.iter().map(|w| 2.0 * self.spec.eta * w).collect();
        for j in 0..val.len() {
            self.model.accumulate_grad(omega, val.row(j), val.y[j], 1.0, &mut g);
        }
        g
    }

    fn grad_theta_cl(&self, theta: &[f64], omega: &[f64], _batch: BatchId) -> ParamVector {
        let tr = &self.data.train;
        (0..tr.len())
            .map(|i| sigmoid_prime(theta[i]) * self.model.loss(omega, tr.row(i), tr.y[i]))
            .collect()
    }

    fn grad_omega_cl(&self, theta: &[f64], omega: &[f64], _batch: BatchId) -> ParamVector {
        let tr = &self.data.train;
        let mut g = ParamVector::zeros(omega.len());
        for (i, t) in theta.iter().enumerate().take(tr.len()) {
            self.model.accumulate_grad(omega, tr.row(i), tr.y[i], sigmoid(*t), &mut g);
        }
        g
    }

    fn hvp_omega_omega_cl(&self, theta: &[f64], omega: &[f64], v: &[f64], _b: BatchId) -> Option<ParamVector> {
        let tr = &self.data.train;
        let mut out = ParamVector::zeros(omega.len());
        for (i, t) in theta.iter().enumerate().take(tr.len()) {
            self.model.accumulate_hvp(omega, tr.row(i), v, sigmoid(*t), &mut out);
        }
        Some(out)
    }

    fn cross_vjp_cl(&self, theta: &[f64], omega: &[f64], u: &[f64], _b: BatchId) -> Option<ParamVector> {
        let tr = &self.data.train;
        Some(
            (0..tr.len())
                .map(|i| sigmoid_prime(theta[i]) * self.model.grad_dot(omega, tr.row(i), tr.y[i], u))
                .collect(),
        )
    }

    fn name(&self) -> &str {
        "hyperclean"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{cross_vjp_fd, hvp_omega_omega_fd, oracle_self_test};

    fn small() -> HyperCleanOracle {
        HyperCleanOracle::new(HyperCleanSpec {
            n_train: 40,
            n_val: 30,
            n_test: 30,
            classes: 3,
            feature_dim: 4,
            eta: 0.1,
            seed: 5,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_logit_is_half_weight() {
        let o = small();
        let omega = vec![0.0; o.dims().omega];
        let full: f64 = o.f_cl(&vec![f64::INFINITY; 40], &omega, 0);
        let half = o.f_cl(&vec![0.0; 40], &omega, 0);
        assert!((half - 0.5 * full).abs() < 1e-12);
    }

    #[test]
    fn zero_model_gives_uniform_validation_loss() {
        let o = HyperCleanOracle::new(HyperCleanSpec::default()).unwrap();
        let omega = vec![0.0; o.dims().omega];
        let expected = 500.0 * 5f64.ln();
        assert!((o.f_ol(&vec![0.0; 500], &omega, 0) - expected).abs() < 1e-9);
    }

    #[test]
    fn corruption_matches_rate_and_flips_labels() {
        let o = HyperCleanOracle::new(HyperCleanSpec::default()).unwrap();
        let d = o.data();
        assert_eq!(d.corrupted.iter().filter(|c| **c).count(), 250);
        for i in 0..d.train.len() {
            assert_eq!(d.corrupted[i], d.train.y[i] != d.clean_labels[i]);
        }
    }

    #[test]
    fn oracle_gradients_and_products_are_exact() {
        let o = small();
        assert!(oracle_self_test(&o, 3, 1, 1e-4).unwrap().passed());
        let theta: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let omega: Vec<f64> = (0..o.dims().omega).map(|i| 0.2 * (i as f64 * 0.11).cos()).collect();
        let v: Vec<f64> = (0..omega.len()).map(|i| (i as f64).cos()).collect();
        let fd = hvp_omega_omega_fd(&o, &theta, &omega, &v, 1e-4, 0).unwrap().value;
        let an = o.hvp_omega_omega_cl(&theta, &omega, &v, 0).unwrap();
        assert!(fd.sub(&an).norm() <= 1e-6 * an.norm());
        let fd = cross_vjp_fd(&o, &theta, &omega, &v, 1e-4, 0).unwrap().value;
        let an = o.cross_vjp_cl(&theta, &omega, &v, 0).unwrap();
        assert!(fd.sub(&an).norm() <= 1e-6 * an.norm());
    }

    #[test]
    fn inner_problem_is_convex() {
        let o = small();
        let theta = vec![0.5; 40];
        let mut ends = Vec::new();
        for start in [0.0, 1.0] {
            let mut w = ParamVector::filled(o.dims().omega, start);
            for _ in 0..20_000 {
                let g = o.grad_omega_cl(&theta, &w, 0);
                w.axpy(-0.02, &g);
            }
            ends.push(o.f_cl(&theta, &w, 0));
        }
        assert!((ends[0] - ends[1]).abs() < 1e-6, "{ends:?}");
    }

    #[test]
    fn dump_round_trip() {
        let o = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hc.bin");
        o.dump(&path).unwrap();
        let back = HyperCleanOracle::load(&path).unwrap();
        assert_eq!(back.data(), o.data());
        assert_eq!(back.spec(), o.spec());
    }
}

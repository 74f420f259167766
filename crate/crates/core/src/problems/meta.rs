//! Multi-task meta-feature learning: a shared embedder (`theta`) feeds one
//! linear softmax head per task (`omega`, all heads concatenated). The inner
//! problem fits the heads on every task's training split; the outer problem
//! scores the same heads on the validation splits.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::softmax::{LabeledSet, SoftmaxModel};
use crate::error::{Error, Result};
use crate::nn::{mlp_backward, mlp_forward, mlp_init, Activation, MlpSpec};
use crate::oracle::{BatchId, BilevelOracle, Dims};
use crate::param::ParamVector;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaTaskSpec {
    pub tasks: usize,
    /// Classes per task.
    pub ways: usize,
    /// Training samples per class.
    pub shots: usize,
    /// Validation samples per class.
    pub val_shots: usize,
    pub input_dim: usize,
    /// Dimension of the shared latent structure the class means live in.
    pub latent_dim: usize,
    /// Embedder; its output width is the head input width.
    pub shared: MlpSpec,
    pub noise: f64,
    pub seed: u64,
}

impl MetaTaskSpec {
    pub fn standard(tasks: usize, ways: usize, shots: usize, seed: u64) -> Result<Self> {
        let spec = Self {
            tasks,
            ways,
            shots,
            val_shots: 5,
            input_dim: 16,
            latent_dim: 4,
            shared: MlpSpec::new(vec![16, 16, 8], Activation::Tanh, Activation::Identity)?,
            noise: 1.0,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn embed_dim(&self) -> usize {
        self.shared.output_dim()
    }

    pub fn head(&self) -> SoftmaxModel {
        SoftmaxModel::new(self.embed_dim(), self.ways)
    }

    pub fn validate(&self) -> Result<()> {
        self.shared.validate()?;
        if self.tasks == 0 || self.ways < 2 || self.shots == 0 || self.val_shots == 0 {
            return Err(Error::InvalidArgument("meta needs tasks >= 1, ways >= 2 and positive shots".into()));
        }
        if self.shared.input_dim() != self.input_dim {
            return Err(Error::InvalidArgument("embedder input width must equal input_dim".into()));
        }
        if self.latent_dim == 0 || self.latent_dim > self.input_dim {
            return Err(Error::InvalidArgument("latent_dim must lie in 1..=input_dim".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::InvalidArgument("noise must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaTask {
    pub train: LabeledSet,
    pub val: LabeledSet,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Class means `P z` with a projection `P` shared by all tasks and per-task
/// latent codes `z`, plus isotropic noise.
pub fn generate_tasks(spec: &MetaTaskSpec) -> Vec<MetaTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.input_dim;
    let proj = DMatrix::from_fn(d, spec.latent_dim, |_, _| normal(&mut rng));
    let draw = |rng: &mut ChaCha8Rng, means: &[Vec<f64>], per_class: usize| {
        let mut x = Vec::with_capacity(means.len() * per_class * d);
        let mut y = Vec::with_capacity(means.len() * per_class);
        for _ in 0..per_class {
            for (c, mean) in means.iter().enumerate() {
                x.extend(mean.iter().map(|m| m + spec.noise * normal(rng)));
                y.push(c);
            }
        }
        LabeledSet { x, y, dim: d }
    };
    (0..spec.tasks)
        .map(|_| {
            let means: Vec<Vec<f64>> = (0..spec.ways)
                .map(|_| {
                    let z = DMatrix::from_fn(spec.latent_dim, 1, |_, _| rng.random_range(-1.5..1.5));
                    (&proj * z).iter().copied().collect()
                })
                .collect();
            let train = draw(&mut rng, &means, spec.shots);
            let val = draw(&mut rng, &means, spec.val_shots);
            MetaTask { train, val }
        })
        .collect()
}

pub struct MetaOracle {
    spec: MetaTaskSpec,
    tasks: Vec<MetaTask>,
    /// All training rows stacked task after task, and likewise for validation.
    train_x: DMatrix<f64>,
    val_x: DMatrix<f64>,
}

impl MetaOracle {
    pub fn new(spec: MetaTaskSpec) -> Result<Self> {
        spec.validate()?;
        let tasks = generate_tasks(&spec);
        Self::from_tasks(spec, tasks)
    }

    pub fn from_tasks(spec: MetaTaskSpec, tasks: Vec<MetaTask>) -> Result<Self> {
        spec.validate()?;
        if tasks.len() != spec.tasks {
            return Err(Error::DimMismatch {
                expected: spec.tasks,
                got: tasks.len(),
                context: "meta task count",
            });
        }
        let stack = |pick: fn(&MetaTask) -> &LabeledSet| {
            let rows: usize = tasks.iter().map(|t| pick(t).len()).sum();
            let flat: Vec<f64> = tasks.iter().flat_map(|t| pick(t).x.iter().copied()).collect();
            DMatrix::from_row_slice(rows, spec.input_dim, &flat)
        };
        let train_x = stack(|t| &t.train);
        let val_x = stack(|t| &t.val);
        Ok(Self {
            spec,
            tasks,
            train_x,
            val_x,
        })
    }

    pub fn spec(&self) -> &MetaTaskSpec {
        &self.spec
    }

    pub fn tasks(&self) -> &[MetaTask] {
        &self.tasks
    }

    pub fn initial_point(&self, seed: u64) -> (ParamVector, ParamVector) {
        let theta = mlp_init(&self.spec.shared, seed).flat;
        (theta, ParamVector::zeros(self.dims().omega))
    }

    /// Fraction of validation rows whose task head predicts the label.
    pub fn val_accuracy(&self, theta: &[f64], omega: &[f64]) -> Result<f64> {
        let emb = mlp_forward(&self.spec.shared, theta, &self.val_x)?.output().clone();
        let head = self.spec.head();
        let (mut row, mut hits, mut total) = (0, 0usize, 0usize);
        for (j, task) in self.tasks.iter().enumerate() {
            let w = &omega[self.head_range(j)];
            for &y in &task.val.y {
                let feat: Vec<f64> = emb.row(row).iter().copied().collect();
                hits += usize::from(head.predict(w, &feat) == y);
                total += 1;
                row += 1;
            }
        }
        Ok(hits as f64 / total.max(1) as f64)
    }

    fn head_range(&self, j: usize) -> std::ops::Range<usize> {
        let n = self.spec.head().param_count();
        j * n..(j + 1) * n
    }

    /// Summed loss over one split and optional gradients w.r.t. heads and embedder.
    fn split(&self, theta: &[f64], omega: &[f64], val: bool, want_omega: bool, want_theta: bool) -> (f64, Option<ParamVector>, Option<ParamVector>) {
        let x = if val { &self.val_x } else { &self.train_x };
        let cache = mlp_forward(&self.spec.shared, theta, x).expect("embedder parameters sized by dims()");
        let emb = cache.output();
        let head = self.spec.head();
        let e = self.spec.embed_dim();
        let mut loss = 0.0;
        let mut g_omega = ParamVector::zeros(omega.len());
        let mut up = DMatrix::zeros(emb.nrows(), e);
        let mut row = 0;
        let mut feat = vec![0.0; e];
        for (j, task) in self.tasks.iter().enumerate() {
            let set = if val { &task.val } else { &task.train };
            let w = &omega[self.head_range(j)];
            for i in 0..set.len() {
                for (k, f) in feat.iter_mut().enumerate() {
                    *f = emb[(row, k)];
                }
                let y = set.y[i];
                if want_omega {
                    loss += head.accumulate_grad(w, &feat, y, 1.0, &mut g_omega[self.head_range(j)]);
                } else {
                    loss += head.loss(w, &feat, y);
                }
                if want_theta {
                    // d loss / d feature = W (p - e_y)
                    let mut r = head.probs(w, &feat);
                    r[y] -= 1.0;
                    for k in 0..e {
                        up[(row, k)] = (0..self.spec.ways).map(|c| w[k * self.spec.ways + c] * r[c]).sum();
                    }
                }
                row += 1;
            }
        }
        let g_theta = want_theta.then(|| {
            mlp_backward(&self.spec.shared, theta, &cache, &up)
                .expect("matching embedder cache")
                .0
        });
        (loss, want_omega.then_some(g_omega), g_theta)
    }
}

impl BilevelOracle for MetaOracle {
    fn dims(&self) -> Dims {
        Dims::new(self.spec.shared.param_count(), self.spec.tasks * self.spec.head().param_count())
    }

    fn f_ol(&self, theta: &[f64], omega: &[f64], _batch: BatchId) -> f64 {
        self.split(theta, omega, true, false, false).0
    }

    fn f_cl(&self, theta: &[f64], omega: &[f64], _batch: BatchId) -> f64 {
        self.split(theta, omega, false, false, false).0
    }

    fn grad_theta_ol(&self, theta: &[f64], omega: &[f64], _batch: BatchId) -> ParamVector {
        self.split(theta, omega, true, false, true).2.expect("requested")
    }

    fn grad_omega_ol(&self, theta: &[f64], omega: &[f64], _batch: BatchId) -> ParamVector {
        self.split(theta, omega, true, true, false).1.expect("requested")
    }

    fn grad_theta_cl(&self, theta: &[f64], omega: &[f64], _batch: BatchId) -> ParamVector {
        self.split(theta, omega, false, false, true).2.expect("requested")
    }

    fn grad_omega_cl(&self, theta: &[f64], omega: &[f64], _batch: BatchId) -> ParamVector {
        self.split(theta, omega, false, true, false).1.expect("requested")
    }

    fn name(&self) -> &str {
        "meta"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::oracle_self_test;

    #[test]
    fn single_task_identity_embedder_is_softmax_regression() {
        let mut spec = MetaTaskSpec::standard(1, 3, 4, 2).unwrap();
        spec.shared = MlpSpec::new(vec![16, 16], Activation::Identity, Activation::Identity).unwrap();
        let o = MetaOracle::new(spec.clone()).unwrap();
        let mut theta = vec![0.0; o.dims().theta];
        for i in 0..16 {
            theta[i * 16 + i] = 1.0;
        }
        let omega: Vec<f64> = (0..o.dims().omega).map(|i| 0.1 * (i as f64).sin()).collect();
        let head = SoftmaxModel::new(16, 3);
        let train = &o.tasks()[0].train;
        let expected: f64 = (0..train.len()).map(|i| head.loss(&omega, train.row(i), train.y[i])).sum();
        assert!((o.f_cl(&theta, &omega, 0) - expected).abs() < 1e-10);
    }

    #[test]
    fn zero_heads_give_uniform_loss() {
        let o = MetaOracle::new(MetaTaskSpec::standard(3, 5, 2, 0).unwrap()).unwrap();
        let (theta, omega) = o.initial_point(1);
        let expected = 3.0 * 10.0 * 5f64.ln();
        assert!((o.f_cl(&theta, &omega, 0) - expected).abs() < 1e-10);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let o = MetaOracle::new(MetaTaskSpec::standard(2, 3, 2, 4).unwrap()).unwrap();
        let report = oracle_self_test(&o, 2, 3, 1e-4).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn tasks_are_seeded() {
        let spec = MetaTaskSpec::standard(2, 3, 2, 9).unwrap();
        assert_eq!(generate_tasks(&spec), generate_tasks(&spec));
    }
}

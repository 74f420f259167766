//! Adversarial training on mixture-of-Gaussians data as a bilevel problem:
//! `theta` holds the generator parameters, `omega` the discriminator's.
//!
//! The discriminator minimizes the negated game value (`F_CL = -V`), so for
//! the vanilla loss `F_OL = E[log(1 - D(G(z)))]` and
//! `F_CL = -E[log D(x)] - E[log(1 - D(G(z)))]`.
//!
//! Each batch id deterministically selects one real batch and one noise
//! batch. Evaluations at the most recent `(theta, omega, batch)` point are
//! memoized, so the four gradients requested by one solver step share their
//! forward passes; the memo never changes results.

use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::mog::{MogFamily, MogSpec};
use crate::error::{Error, Result};
use crate::nn::{mlp_backward, mlp_forward, mlp_init, sigmoid, Activation, ForwardCache, MlpSpec};
use crate::oracle::{BatchId, BilevelOracle, Dims};
use crate::param::ParamVector;

/// Probability clamp applied before logarithms.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GanLoss {
    VanillaBce,
    LeastSquares { a_fake: f64, b_real: f64, c_target: f64 },
    Wasserstein { clip: f64 },
}

impl GanLoss {
    pub fn least_squares() -> Self {
        GanLoss::LeastSquares {
            a_fake: 0.0,
            b_real: 1.0,
            c_target: 1.0,
        }
    }

    pub fn wasserstein() -> Self {
        GanLoss::Wasserstein { clip: 0.01 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            GanLoss::VanillaBce => "vanilla_bce",
            GanLoss::LeastSquares { .. } => "least_squares",
            GanLoss::Wasserstein { .. } => "wasserstein",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanProblemSpec {
    pub loss: GanLoss,
    pub gen: MlpSpec,
    pub disc: MlpSpec,
    pub noise_dim: usize,
    pub mog: MogSpec,
    pub seed: u64,
}

impl GanProblemSpec {
    /// Generator `noise -> width -> width -> data` and discriminator
    /// `data -> width -> width -> 1`, leaky ReLU (0.2) hidden activations.
    pub fn standard(loss: GanLoss, mog: MogSpec, width: usize, noise_dim: usize, seed: u64) -> Result<Self> {
        let leaky = Activation::LeakyRelu { slope: 0.2 };
        let d = mog.dim();
        let spec = Self {
            loss,
            gen: MlpSpec::new(vec![noise_dim, width, width, d], leaky, Activation::Identity)?,
            disc: MlpSpec::new(vec![d, width, width, 1], leaky, Activation::Identity)?,
            noise_dim,
            mog,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn ring(loss: GanLoss, width: usize, seed: u64) -> Result<Self> {
        Self::standard(loss, MogSpec::new(MogFamily::ring()), width, 16, seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.disc.validate()?;
        self.mog.validate()?;
        let d = self.mog.dim();
        if self.gen.input_dim() != self.noise_dim {
            return Err(Error::InvalidArgument("generator input width must equal noise_dim".into()));
        }
        if self.gen.output_dim() != d {
            return Err(Error::InvalidArgument(format!("generator output width must equal data dim {d}")));
        }
        if self.disc.input_dim() != d || self.disc.output_dim() != 1 {
            return Err(Error::InvalidArgument(format!("discriminator must map data dim {d} to one output")));
        }
        if self.disc.final_activation != Activation::Identity {
            return Err(Error::InvalidArgument("discriminator must output raw scores (identity final activation)".into()));
        }
        if let GanLoss::Wasserstein { clip } = self.loss {
            if !(clip > 0.0) {
                return Err(Error::InvalidArgument("wasserstein clip must be positive".into()));
            }
        }
        Ok(())
    }
}

fn mix(a: u64, b: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over a combined key
    let mut z = a
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(b.rotate_left(17))
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z
    })
}

/// Generator side of an evaluation: depends on `(theta, batch)` only.
struct GenPart {
    theta: Vec<f64>,
    batch: BatchId,
    g_cache: ForwardCache,
    real: DMatrix<f64>,
}

struct Eval {
    gen: Arc<GenPart>,
    omega: Vec<f64>,
    /// Discriminator pass over `[real; fake]`.
    d_cache: ForwardCache,
    f_ol: f64,
    f_cl: f64,
    up_ol: DMatrix<f64>,
    up_cl: DMatrix<f64>,
    /// (omega gradient, input gradient on the stacked batch)
    back_ol: OnceLock<(ParamVector, DMatrix<f64>)>,
    back_cl: OnceLock<(ParamVector, DMatrix<f64>)>,
    theta_ol: OnceLock<ParamVector>,
    theta_cl: OnceLock<ParamVector>,
}

pub struct GanOracle {
    spec: GanProblemSpec,
    memo: Mutex<Option<Arc<Eval>>>,
}

impl GanOracle {
    pub fn new(spec: GanProblemSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            memo: Mutex::new(None),
        })
    }

    pub fn spec(&self) -> &GanProblemSpec {
        &self.spec
    }

    /// Glorot-initialized `(theta, omega)`, deterministic in `seed`.
    pub fn initial_point(&self, seed: u64) -> (ParamVector, ParamVector) {
        (
            mlp_init(&self.spec.gen, mix(seed, 0, 11)).flat,
            mlp_init(&self.spec.disc, mix(seed, 0, 12)).flat,
        )
    }

    pub fn real_batch(&self, batch: BatchId) -> DMatrix<f64> {
        self.spec.mog.sample(mix(self.spec.seed, batch, 1), self.spec.mog.batch)
    }

    pub fn noise_batch(&self, batch: BatchId) -> DMatrix<f64> {
        gaussian_matrix(self.spec.mog.batch, self.spec.noise_dim, mix(self.spec.seed, batch, 2))
    }

    /// `rows` generator samples from noise seeded by `seed`.
    pub fn generate(&self, theta: &[f64], seed: u64, rows: usize) -> Result<DMatrix<f64>> {
        let noise = gaussian_matrix(rows, self.spec.noise_dim, mix(seed, 0, 3));
        Ok(mlp_forward(&self.spec.gen, theta, &noise)?.output().clone())
    }

    /// Errors with the batch id when either loss is non-finite.
    pub fn check_finite(&self, theta: &[f64], omega: &[f64], batch: BatchId) -> Result<()> {
        let e = self.eval(theta, omega, batch);
        for (name, v) in [("f_ol", e.f_ol), ("f_cl", e.f_cl)] {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    function: name,
                    probe: batch as usize,
                });
            }
        }
        Ok(())
    }

    fn gen_part(&self, theta: &[f64], batch: BatchId) -> GenPart {
        let noise = self.noise_batch(batch);
        let g_cache = mlp_forward(&self.spec.gen, theta, &noise).expect("generator parameters sized by dims()");
        GenPart {
            theta: theta.to_vec(),
            batch,
            g_cache,
            real: self.real_batch(batch),
        }
    }

    fn eval(&self, theta: &[f64], omega: &[f64], batch: BatchId) -> Arc<Eval> {
        let mut memo = self.memo.lock().expect("memo lock");
        let mut gen = None;
        if let Some(e) = memo.as_ref() {
            if e.gen.batch == batch && e.gen.theta == theta {
                if e.omega == omega {
                    return Arc::clone(e);
                }
                gen = Some(Arc::clone(&e.gen));
            }
        }
        let gen = gen.unwrap_or_else(|| Arc::new(self.gen_part(theta, batch)));
        let e = Arc::new(self.evaluate(gen, omega));
        *memo = Some(Arc::clone(&e));
        e
    }

    fn evaluate(&self, gen: Arc<GenPart>, omega: &[f64]) -> Eval {
        let fake = gen.g_cache.output();
        let b = gen.real.nrows();
        let d = gen.real.ncols();
        let stacked = DMatrix::from_fn(2 * b, d, |r, c| if r < b { gen.real[(r, c)] } else { fake[(r - b, c)] });
        let d_cache = mlp_forward(&self.spec.disc, omega, &stacked).expect("discriminator parameters sized by dims()");
        let s = d_cache.output();
        let n = b as f64;
        let mut up_ol = DMatrix::zeros(2 * b, 1);
        let mut up_cl = DMatrix::zeros(2 * b, 1);
        let (mut f_ol, mut f_cl) = (0.0, 0.0);
        match self.spec.loss {
            GanLoss::VanillaBce => {
                let clamp = |s: f64| {
                    let p = sigmoid(s);
                    if p < PROB_CLAMP {
                        (PROB_CLAMP, false)
                    } else if p > 1.0 - PROB_CLAMP {
                        (1.0 - PROB_CLAMP, false)
                    } else {
                        (p, true)
                    }
                };
                for r in 0..b {
                    let (p, live) = clamp(s[(r, 0)]);
                    f_cl -= p.ln() / n;
                    if live {
                        up_cl[(r, 0)] = -(1.0 - p) / n;
                    }
                }
                for r in b..2 * b {
                    let (p, live) = clamp(s[(r, 0)]);
                    let l = (1.0 - p).ln() / n;
                    f_ol += l;
                    f_cl -= l;
                    if live {
                        up_ol[(r, 0)] = -p / n;
                        up_cl[(r, 0)] = p / n;
                    }
                }
            }
            GanLoss::LeastSquares { a_fake, b_real, c_target } => {
                for r in 0..b {
                    let e = s[(r, 0)] - b_real;
                    f_cl += e * e / n;
                    up_cl[(r, 0)] = 2.0 * e / n;
                }
                for r in b..2 * b {
                    let e = s[(r, 0)] - a_fake;
                    f_cl += e * e / n;
                    up_cl[(r, 0)] = 2.0 * e / n;
                    let t = s[(r, 0)] - c_target;
                    f_ol += t * t / n;
                    up_ol[(r, 0)] = 2.0 * t / n;
                }
            }
            GanLoss::Wasserstein { .. } => {
                for r in 0..b {
                    f_cl -= s[(r, 0)] / n;
                    up_cl[(r, 0)] = -1.0 / n;
                }
                for r in b..2 * b {
                    f_cl += s[(r, 0)] / n;
                    up_cl[(r, 0)] = 1.0 / n;
                    f_ol -= s[(r, 0)] / n;
                    up_ol[(r, 0)] = -1.0 / n;
                }
            }
        }
        Eval {
            gen,
            omega: omega.to_vec(),
            d_cache,
            f_ol,
            f_cl,
            up_ol,
            up_cl,
            back_ol: OnceLock::new(),
            back_cl: OnceLock::new(),
            theta_ol: OnceLock::new(),
            theta_cl: OnceLock::new(),
        }
    }

    fn disc_back<'e>(&self, e: &'e Eval, outer: bool) -> &'e (ParamVector, DMatrix<f64>) {
        let (cell, up) = if outer { (&e.back_ol, &e.up_ol) } else { (&e.back_cl, &e.up_cl) };
        cell.get_or_init(|| mlp_backward(&self.spec.disc, &e.omega, &e.d_cache, up).expect("matching discriminator cache"))
    }

    fn theta_grad<'e>(&self, e: &'e Eval, outer: bool) -> &'e ParamVector {
        let cell = if outer { &e.theta_ol } else { &e.theta_cl };
        cell.get_or_init(|| {
            let (_, gx) = self.disc_back(e, outer);
            let b = e.gen.real.nrows();
            let up = gx.rows(b, b).into_owned();
            mlp_backward(&self.spec.gen, &e.gen.theta, &e.gen.g_cache, &up)
                .expect("matching generator cache")
                .0
        })
    }
}

impl BilevelOracle for GanOracle {
    fn dims(&self) -> Dims {
        Dims::new(self.spec.gen.param_count(), self.spec.disc.param_count())
    }

    fn f_ol(&self, theta: &[f64], omega: &[f64], batch: BatchId) -> f64 {
        self.eval(theta, omega, batch).f_ol
    }

    fn f_cl(&self, theta: &[f64], omega: &[f64], batch: BatchId) -> f64 {
        self.eval(theta, omega, batch).f_cl
    }

    fn grad_theta_ol(&self, theta: &[f64], omega: &[f64], batch: BatchId) -> ParamVector {
        let e = self.eval(theta, omega, batch);
        self.theta_grad(&e, true).clone()
    }

    fn grad_omega_ol(&self, theta: &[f64], omega: &[f64], batch: BatchId) -> ParamVector {
        let e = self.eval(theta, omega, batch);
        self.disc_back(&e, true).0.clone()
    }

    fn grad_theta_cl(&self, theta: &[f64], omega: &[f64], batch: BatchId) -> ParamVector {
        let e = self.eval(theta, omega, batch);
        self.theta_grad(&e, false).clone()
    }

    fn grad_omega_cl(&self, theta: &[f64], omega: &[f64], batch: BatchId) -> ParamVector {
        let e = self.eval(theta, omega, batch);
        self.disc_back(&e, false).0.clone()
    }

    fn project_omega(&self, omega: &mut [f64]) {
        if let GanLoss::Wasserstein { clip } = self.spec.loss {
            for w in omega {
                *w = w.clamp(-clip, clip);
            }
        }
    }

    fn name(&self) -> &str {
        "gan"
    }
}

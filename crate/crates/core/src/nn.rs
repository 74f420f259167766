//! Small fully-connected networks with hand-written reverse mode, and Adam.
//!
//! Parameters live in one flat vector so they can serve directly as the
//! `theta` or `omega` of a bilevel problem. Layout, per layer: the weight
//! matrix (`fan_in x fan_out`, row-major) followed by the bias. A layer
//! computes `y = act(x W + b)` on a batch `x` of shape `batch x fan_in`.

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blob;
use crate::error::{Error, Result};
use crate::param::ParamVector;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Identity,
    Sigmoid,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => {
                if z >= 0.0 {
                    z
                } else {
                    slope * z
                }
            }
            Activation::Identity => z,
            Activation::Sigmoid => sigmoid(z),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative given the pre-activation `z` and output `y = act(z)`.
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => {
                if z >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Identity => 1.0,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input width, hidden widths..., output width.
    pub widths: Vec<usize>,
    /// Activation after every hidden layer.
    pub activation: Activation,
    pub final_activation: Activation,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activation: Activation, final_activation: Activation) -> Result<Self> {
        let spec = Self {
            widths,
            activation,
            final_activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::InvalidArgument("an MLP needs at least input and output widths".into()));
        }
        if self.widths.contains(&0) {
            return Err(Error::InvalidArgument("MLP widths must be positive".into()));
        }
        for act in [self.activation, self.final_activation] {
            if let Activation::LeakyRelu { slope } = act {
                if !(slope > 0.0 && slope < 1.0) {
                    return Err(Error::InvalidArgument(format!("leaky ReLU slope must lie in (0, 1), got {slope}")));
                }
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated spec")
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn layer_activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.n_layers() {
            self.final_activation
        } else {
            self.activation
        }
    }

    /// Offsets of (weights, bias, end) of `layer` in the flat vector.
    fn layer_range(&self, layer: usize) -> (usize, usize, usize) {
        let start: usize = self.widths[..layer + 1]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum();
        let (fan_in, fan_out) = (self.widths[layer], self.widths[layer + 1]);
        (start, start + fan_in * fan_out, start + fan_in * fan_out + fan_out)
    }
}

/// Flat parameters together with the spec that shapes them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub spec: MlpSpec,
    pub flat: ParamVector,
}

/// One layer's weights and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weights: DMatrix<f64>,
    pub bias: Vec<f64>,
}

impl MlpParams {
    pub fn new(spec: MlpSpec, flat: ParamVector) -> Result<Self> {
        spec.validate()?;
        if flat.len() != spec.param_count() {
            return Err(Error::DimMismatch {
                expected: spec.param_count(),
                got: flat.len(),
                context: "MLP parameter vector",
            });
        }
        Ok(Self { spec, flat })
    }

    pub fn zeros(spec: MlpSpec) -> Self {
        let flat = ParamVector::zeros(spec.param_count());
        Self { spec, flat }
    }

    pub fn unflatten(&self) -> Vec<Layer> {
        (0..self.spec.n_layers())
            .map(|l| {
                let (w0, b0, end) = self.spec.layer_range(l);
                Layer {
                    weights: DMatrix::from_row_slice(self.spec.widths[l], self.spec.widths[l + 1], &self.flat[w0..b0]),
                    bias: self.flat[b0..end].to_vec(),
                }
            })
            .collect()
    }

    pub fn flatten(spec: MlpSpec, layers: &[Layer]) -> Result<Self> {
        let mut flat = Vec::with_capacity(spec.param_count());
        for layer in layers {
            for r in 0..layer.weights.nrows() {
                flat.extend(layer.weights.row(r).iter());
            }
            flat.extend_from_slice(&layer.bias);
        }
        Self::new(spec, flat.into())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        blob::save(path, &self.spec, &self.flat)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (spec, data): (MlpSpec, Vec<f64>) = blob::load(path)?;
        Self::new(spec, data.into())
    }
}

/// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
pub fn mlp_init(spec: &MlpSpec, seed: u64) -> MlpParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flat = ParamVector::zeros(spec.param_count());
    for l in 0..spec.n_layers() {
        let (w0, b0, _) = spec.layer_range(l);
        let bound = glorot_bound(spec.widths[l], spec.widths[l + 1]);
        for w in &mut flat[w0..b0] {
            *w = rng.random_range(-bound..=bound);
        }
    }
    MlpParams {
        spec: spec.clone(),
        flat,
    }
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Activations retained by [`mlp_forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input of every layer (the batch first).
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
    output: DMatrix<f64>,
    fingerprint: u64,
}

impl ForwardCache {
    pub fn output(&self) -> &DMatrix<f64> {
        &self.output
    }
}

fn fingerprint(params: &[f64]) -> u64 {
    // FNV-1a over the bit patterns
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in params {
        h ^= v.to_bits();
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ params.len() as u64
}

fn check_params(spec: &MlpSpec, params: &[f64]) -> Result<()> {
    if params.len() != spec.param_count() {
        return Err(Error::DimMismatch {
            expected: spec.param_count(),
            got: params.len(),
            context: "MLP parameter vector",
        });
    }
    Ok(())
}

/// Forward pass on a `batch x input_dim` matrix.
pub fn mlp_forward(spec: &MlpSpec, params: &[f64], batch: &DMatrix<f64>) -> Result<ForwardCache> {
    check_params(spec, params)?;
    if batch.ncols() != spec.input_dim() {
        return Err(Error::DimMismatch {
            expected: spec.input_dim(),
            got: batch.ncols(),
            context: "MLP input width",
        });
    }
    let mut inputs = Vec::with_capacity(spec.n_layers());
    let mut pre = Vec::with_capacity(spec.n_layers());
    let mut x = batch.clone();
    for l in 0..spec.n_layers() {
        let (w0, b0, end) = spec.layer_range(l);
        let w = DMatrix::from_row_slice(spec.widths[l], spec.widths[l + 1], &params[w0..b0]);
        let bias = &params[b0..end];
        let mut z = &x * &w;
        for (j, mut col) in z.column_iter_mut().enumerate() {
            col.add_scalar_mut(bias[j]);
        }
        let act = spec.layer_activation(l);
        let y = z.map(|v| act.apply(v));
        inputs.push(x);
        pre.push(z);
        x = y;
    }
    Ok(ForwardCache {
        inputs,
        pre,
        output: x,
        fingerprint: fingerprint(params),
    })
}

/// Reverse pass for `sum(upstream ⊙ output)`: returns the parameter
/// gradient (flat, same layout as `params`) and the input gradient.
pub fn mlp_backward(
    spec: &MlpSpec,
    params: &[f64],
    cache: &ForwardCache,
    upstream: &DMatrix<f64>,
) -> Result<(ParamVector, DMatrix<f64>)> {
    check_params(spec, params)?;
    if cache.fingerprint != fingerprint(params) || cache.pre.len() != spec.n_layers() {
        return Err(Error::InvalidArgument("stale forward cache: parameters changed since the forward pass".into()));
    }
    if upstream.shape() != cache.output.shape() {
        return Err(Error::DimMismatch {
            expected: cache.output.ncols(),
            got: upstream.ncols(),
            context: "MLP upstream gradient",
        });
    }
    let mut grad = ParamVector::zeros(params.len());
    let mut delta = upstream.clone();
    let mut y = &cache.output;
    for l in (0..spec.n_layers()).rev() {
        let act = spec.layer_activation(l);
        let z = &cache.pre[l];
        let dz = DMatrix::from_fn(z.nrows(), z.ncols(), |r, c| {
            delta[(r, c)] * act.derivative(z[(r, c)], y[(r, c)])
        });
        let (w0, b0, end) = spec.layer_range(l);
        let x = &cache.inputs[l];
        let dw = x.transpose() * &dz;
        // row-major copy into the flat layout
        let fan_out = spec.widths[l + 1];
        for r in 0..dw.nrows() {
            for c in 0..fan_out {
                grad[w0 + r * fan_out + c] = dw[(r, c)];
            }
        }
        for (j, col) in dz.column_iter().enumerate() {
            grad[b0 + j] = col.sum();
        }
        debug_assert_eq!(b0 + fan_out, end);
        let w = DMatrix::from_row_slice(spec.widths[l], fan_out, &params[w0..b0]);
        delta = dz * w.transpose();
        if l > 0 {
            y = &cache.inputs[l];
        }
    }
    Ok((grad, delta))
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self::with_betas(len, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(len: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            lr,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "adam: parameter length");
        assert_eq!(grad.len(), self.m.len(), "adam: gradient length");
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Adam step as a free function.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grad: &[f64]) {
    state.step(params, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, proptest};

    const LEAKY: Activation = Activation::LeakyRelu { slope: 0.2 };

    fn small_spec() -> MlpSpec {
        MlpSpec::new(vec![3, 4, 2], Activation::Tanh, Activation::Sigmoid).unwrap()
    }

    fn random_batch(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.5..1.5))
    }

    /// Loss sum(upstream ⊙ f(x; params)) for finite differences.
    fn weighted_output(spec: &MlpSpec, params: &[f64], x: &DMatrix<f64>, up: &DMatrix<f64>) -> f64 {
        mlp_forward(spec, params, x).unwrap().output().component_mul(up).sum()
    }

    #[test]
    fn zero_params_give_activation_of_zero() {
        for (act, expected) in [(LEAKY, 0.0), (Activation::Identity, 0.0), (Activation::Tanh, 0.0), (Activation::Sigmoid, 0.5)] {
            let spec = MlpSpec::new(vec![2, 5, 3], act, act).unwrap();
            let out = mlp_forward(&spec, &vec![0.0; spec.param_count()], &random_batch(4, 2, 1)).unwrap();
            assert!(out.output().iter().all(|v| *v == expected));
        }
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let spec = MlpSpec::new(vec![3, 3], Activation::Identity, Activation::Identity).unwrap();
        let layers = [Layer {
            weights: DMatrix::identity(3, 3),
            bias: vec![0.0; 3],
        }];
        let p = MlpParams::flatten(spec.clone(), &layers).unwrap();
        let x = random_batch(5, 3, 2);
        assert_eq!(mlp_forward(&spec, &p.flat, &x).unwrap().output(), &x);
    }

    #[test]
    fn leaky_relu_negative_branch() {
        assert_eq!(LEAKY.apply(-1.0), -0.2);
        assert_eq!(LEAKY.apply(3.0), 3.0);
    }

    #[test]
    fn identity_layer_backward_is_adjoint() {
        let spec = MlpSpec::new(vec![2, 2], Activation::Identity, Activation::Identity).unwrap();
        let p = MlpParams::flatten(
            spec.clone(),
            &[Layer {
                weights: DMatrix::identity(2, 2),
                bias: vec![0.0; 2],
            }],
        )
        .unwrap();
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let cache = mlp_forward(&spec, &p.flat, &x).unwrap();
        let up = DMatrix::from_element(2, 2, 1.0);
        let (g, gx) = mlp_backward(&spec, &p.flat, &cache, &up).unwrap();
        // grad_W[i][j] = sum_batch x[b][i]
        assert_eq!(&g[..4], &[4.0, 4.0, 6.0, 6.0]);
        assert_eq!(&g[4..], &[2.0, 2.0]);
        assert_eq!(gx, up);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let spec = small_spec();
        let p = mlp_init(&spec, 3);
        let x = random_batch(3, 3, 4);
        let cache = mlp_forward(&spec, &p.flat, &x).unwrap();
        let (g, gx) = mlp_backward(&spec, &p.flat, &cache, &DMatrix::zeros(3, 2)).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        assert!(gx.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        for spec in [
            small_spec(),
            MlpSpec::new(vec![3, 4, 2], LEAKY, Activation::Identity).unwrap(),
        ] {
            let p = mlp_init(&spec, 9);
            let x = random_batch(5, 3, 10);
            let up = random_batch(5, 2, 11);
            let cache = mlp_forward(&spec, &p.flat, &x).unwrap();
            let (g, gx) = mlp_backward(&spec, &p.flat, &cache, &up).unwrap();
            let h = 1e-4;
            let mut worst: f64 = 0.0;
            let mut work = p.flat.clone();
            for i in 0..work.len() {
                let orig = work[i];
                work[i] = orig + h;
                let fp = weighted_output(&spec, &work, &x, &up);
                work[i] = orig - h;
                let fm = weighted_output(&spec, &work, &x, &up);
                work[i] = orig;
                let fd = (fp - fm) / (2.0 * h);
                worst = worst.max((fd - g[i]).abs() / fd.abs().max(1e-2));
            }
            let mut xw = x.clone();
            for idx in 0..xw.len() {
                let orig = xw[idx];
                xw[idx] = orig + h;
                let fp = weighted_output(&spec, &p.flat, &xw, &up);
                xw[idx] = orig - h;
                let fm = weighted_output(&spec, &p.flat, &xw, &up);
                xw[idx] = orig;
                let fd = (fp - fm) / (2.0 * h);
                worst = worst.max((fd - gx[idx]).abs() / fd.abs().max(1e-2));
            }
            assert!(worst <= 1e-5, "worst relative error {worst}");
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let spec = small_spec();
        let p = mlp_init(&spec, 1);
        let cache = mlp_forward(&spec, &p.flat, &random_batch(2, 3, 0)).unwrap();
        let mut q = p.flat.clone();
        q[0] += 1.0;
        assert!(mlp_backward(&spec, &q, &cache, &DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let spec = small_spec();
        let p = mlp_init(&spec, 1);
        assert!(mlp_forward(&spec, &p.flat, &random_batch(2, 4, 0)).is_err());
        assert!(mlp_forward(&spec, &p.flat[1..], &random_batch(2, 3, 0)).is_err());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let spec = MlpSpec::new(vec![2, 16, 16, 1], LEAKY, Activation::Sigmoid).unwrap();
        let a = mlp_init(&spec, 42);
        let b = mlp_init(&spec, 42);
        assert_eq!(a.flat.as_slice(), b.flat.as_slice());
        assert_ne!(a.flat, mlp_init(&spec, 43).flat);
        for (l, layer) in a.unflatten().iter().enumerate() {
            assert!(layer.bias.iter().all(|v| *v == 0.0));
            let bound = glorot_bound(spec.widths[l], spec.widths[l + 1]);
            assert!(layer.weights.iter().all(|w| w.abs() <= bound));
        }
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![3], LEAKY, LEAKY).is_err());
        assert!(MlpSpec::new(vec![3, 2], Activation::LeakyRelu { slope: 1.5 }, LEAKY).is_err());
        assert_eq!(MlpSpec::new(vec![2, 256, 256, 2], LEAKY, Activation::Identity).unwrap().param_count(), 2 * 256 + 256 + 256 * 256 + 256 + 256 * 2 + 2);
    }

    #[test]
    fn adam_first_step_magnitude() {
        let mut s = AdamState::new(1, 1e-3);
        let mut p = [0.5];
        adam_step(&mut s, &mut p, &[1.0]);
        assert!((p[0] - (0.5 - 1e-3)).abs() < 1e-10);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut s = AdamState::new(2, 1e-2);
        let mut p = [0.3, -0.7];
        for _ in 0..10 {
            s.step(&mut p, &[0.0, 0.0]);
        }
        assert_eq!(p, [0.3, -0.7]);
    }

    #[test]
    fn adam_is_stateful() {
        let mut a = AdamState::new(1, 1e-2);
        let mut pa = [1.0];
        a.step(&mut pa, &[1.0]);
        a.step(&mut pa, &[0.1]);
        let mut b = AdamState::new(1, 2e-2);
        let mut pb = [1.0];
        b.step(&mut pb, &[0.1]);
        assert_ne!(pa[0], pb[0]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ckpt");
        let p = mlp_init(&small_spec(), 5);
        p.save(&path).unwrap();
        let back = MlpParams::load(&path).unwrap();
        assert_eq!(back.spec, p.spec);
        assert!(back.flat.iter().zip(p.flat.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    proptest! {
        #[test]
        fn flatten_unflatten_is_identity(seed in any::<u64>(), h in 1usize..6) {
            let spec = MlpSpec::new(vec![2, h, 3], LEAKY, Activation::Identity).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let flat: ParamVector = (0..spec.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p = MlpParams::new(spec.clone(), flat).unwrap();
            let back = MlpParams::flatten(spec, &p.unflatten()).unwrap();
            prop_assert!(back.flat.iter().zip(p.flat.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}

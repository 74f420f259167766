//! Linear softmax regression: parameters are a `dim x classes` weight matrix
//! (row-major) followed by `classes` biases.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxModel {
    pub dim: usize,
    pub classes: usize,
}

impl SoftmaxModel {
    pub fn new(dim: usize, classes: usize) -> Self {
        Self { dim, classes }
    }

    pub fn param_count(&self) -> usize {
        (self.dim + 1) * self.classes
    }

    fn bias(&self) -> usize {
        self.dim * self.classes
    }

    pub fn logits(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let c = self.classes;
        let mut z = params[self.bias()..self.bias() + c].to_vec();
        for (j, xj) in x.iter().enumerate() {
            let row = &params[j * c..(j + 1) * c];
            for k in 0..c {
                z[k] += xj * row[k];
            }
        }
        z
    }

    pub fn probs(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let mut z = self.logits(params, x);
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in &mut z {
            *v = (*v - max).exp();
            total += *v;
        }
        z.iter_mut().for_each(|v| *v /= total);
        z
    }

    /// Cross-entropy of label `y`.
    pub fn loss(&self, params: &[f64], x: &[f64], y: usize) -> f64 {
        let z = self.logits(params, x);
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        lse - z[y]
    }

    pub fn predict(&self, params: &[f64], x: &[f64]) -> usize {
        let z = self.logits(params, x);
        (0..self.classes)
            .max_by(|&a, &b| z[a].total_cmp(&z[b]))
            .expect("at least one class")
    }

    /// Adds `scale * grad loss` to `grad`; returns the loss.
    pub fn accumulate_grad(&self, params: &[f64], x: &[f64], y: usize, scale: f64, grad: &mut [f64]) -> f64 {
        let p = self.probs(params, x);
        let c = self.classes;
        let mut r = p.clone();
        r[y] -= 1.0;
        for (j, xj) in x.iter().enumerate() {
            let row = &mut grad[j * c..(j + 1) * c];
            for k in 0..c {
                row[k] += scale * xj * r[k];
            }
        }
        let b = self.bias();
        for k in 0..c {
            grad[b + k] += scale * r[k];
        }
        -p[y].max(f64::MIN_POSITIVE).ln()
    }

    /// `<grad loss, u>` for one sample.
    pub fn grad_dot(&self, params: &[f64], x: &[f64], y: usize, u: &[f64]) -> f64 {
        let mut r = self.probs(params, x);
        r[y] -= 1.0;
        let z = self.logits_of_direction(x, u);
        r.iter().zip(&z).map(|(a, b)| a * b).sum()
    }

    /// `x~^T U` where `U` is a direction in parameter space.
    fn logits_of_direction(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        self.logits(u, x)
    }

    /// Adds `scale * (Hessian of loss) v` to `out`.
    pub fn accumulate_hvp(&self, params: &[f64], x: &[f64], v: &[f64], scale: f64, out: &mut [f64]) {
        let p = self.probs(params, x);
        let z = self.logits_of_direction(x, v);
        let pz: f64 = p.iter().zip(&z).map(|(a, b)| a * b).sum();
        let c = self.classes;
        let s: Vec<f64> = (0..c).map(|k| scale * p[k] * (z[k] - pz)).collect();
        for (j, xj) in x.iter().enumerate() {
            let row = &mut out[j * c..(j + 1) * c];
            for k in 0..c {
                row[k] += xj * s[k];
            }
        }
        let b = self.bias();
        for k in 0..c {
            out[b + k] += s[k];
        }
    }

    pub fn accuracy(&self, params: &[f64], set: &LabeledSet) -> f64 {
        if set.is_empty() {
            return 0.0;
        }
        let hits = (0..set.len())
            .filter(|&i| self.predict(params, set.row(i)) == set.y[i])
            .count();
        hits as f64 / set.len() as f64
    }
}

/// Feature rows with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    /// Row-major `len x dim`.
    pub x: Vec<f64>,
    pub y: Vec<usize>,
    pub dim: usize,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.len(), self.dim, &self.x)
    }
}

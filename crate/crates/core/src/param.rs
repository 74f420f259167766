//! Flat parameter vectors.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

/// A flat vector of real parameters (outer `theta` or inner `omega`).
///
/// Arithmetic helpers assert equal lengths; mixing vectors of different
/// lengths is a programming error, not a recoverable condition.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(data: Vec<f64>) -> Self {
        Self(data)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn filled(len: usize, value: f64) -> Self {
        Self(vec![value; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &[f64]) {
        assert_eq!(self.len(), x.len(), "axpy length mismatch");
        for (s, xi) in self.0.iter_mut().zip(x) {
            *s += alpha * xi;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.0.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self(self.0.iter().map(|v| alpha * v).collect())
    }

    /// `self + alpha * x` as a new vector.
    pub fn plus_scaled(&self, alpha: f64, x: &[f64]) -> Self {
        let mut out = self.clone();
        out.axpy(alpha, x);
        out
    }

    pub fn sub(&self, other: &[f64]) -> Self {
        self.plus_scaled(-1.0, other)
    }

    pub fn bytes(&self) -> usize {
        self.0.len() * std::mem::size_of::<f64>()
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl From<&[f64]> for ParamVector {
    fn from(v: &[f64]) -> Self {
        Self(v.to_vec())
    }
}

impl<const N: usize> From<[f64; N]> for ParamVector {
    fn from(v: [f64; N]) -> Self {
        Self(v.to_vec())
    }
}

impl FromIterator<f64> for ParamVector {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}


pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot length mismatch");
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

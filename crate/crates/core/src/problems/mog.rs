//! Mixture-of-Gaussians data families for mode-collapse experiments.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seed of the fixed center draw for [`MogFamily::Random2d`].
pub const RANDOM2D_CENTER_SEED: u64 = 2024;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum MogFamily {
    Ring2d { k: usize, radius: f64 },
    Random2d { k: usize, seed: u64 },
    Grid2d { spacing: f64 },
    Cube3d { spacing: f64 },
}

impl MogFamily {
    pub fn ring() -> Self {
        MogFamily::Ring2d { k: 8, radius: 2.0 }
    }

    pub fn random() -> Self {
        MogFamily::Random2d {
            k: 10,
            seed: RANDOM2D_CENTER_SEED,
        }
    }

    pub fn grid() -> Self {
        MogFamily::Grid2d { spacing: 2.0 }
    }

    pub fn cube() -> Self {
        MogFamily::Cube3d { spacing: 2.0 }
    }

    pub fn dim(&self) -> usize {
        match self {
            MogFamily::Cube3d { .. } => 3,
            _ => 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MogFamily::Ring2d { .. } => "ring2d",
            MogFamily::Random2d { .. } => "random2d",
            MogFamily::Grid2d { .. } => "grid2d",
            MogFamily::Cube3d { .. } => "cube3d",
        }
    }

    /// Component centers, one row each.
    pub fn centers(&self) -> Vec<Vec<f64>> {
        match *self {
            MogFamily::Ring2d { k, radius } => (0..k)
                .map(|i| {
                    let a = 2.0 * PI * i as f64 / k as f64;
                    vec![radius * a.cos(), radius * a.sin()]
                })
                .collect(),
            MogFamily::Random2d { k, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..k)
                    .map(|_| vec![rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)])
                    .collect()
            }
            MogFamily::Grid2d { spacing } => {
                let coords = [-2.0, -1.0, 0.0, 1.0, 2.0];
                let mut out = Vec::with_capacity(25);
                for x in coords {
                    for y in coords {
                        out.push(vec![x * spacing, y * spacing]);
                    }
                }
                out
            }
            MogFamily::Cube3d { spacing } => {
                let coords = [-1.0, 0.0, 1.0];
                let mut out = Vec::with_capacity(27);
                for x in coords {
                    for y in coords {
                        for z in coords {
                            out.push(vec![x * spacing, y * spacing, z * spacing]);
                        }
                    }
                }
                out
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MogSpec {
    pub family: MogFamily,
    #[serde(default = "default_variance")]
    pub component_variance: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
}

fn default_variance() -> f64 {
    0.02
}

fn default_batch() -> usize {
    512
}

impl MogSpec {
    pub fn new(family: MogFamily) -> Self {
        Self {
            family,
            component_variance: default_variance(),
            batch: default_batch(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.component_variance > 0.0 && self.component_variance.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "component variance must be positive, got {}",
                self.component_variance
            )));
        }
        if self.batch == 0 {
            return Err(Error::InvalidArgument("batch must be positive".into()));
        }
        match self.family {
            MogFamily::Ring2d { k, radius } if k == 0 || !(radius > 0.0) => {
                Err(Error::InvalidArgument("ring needs k >= 1 and radius > 0".into()))
            }
            MogFamily::Random2d { k: 0, .. } => Err(Error::InvalidArgument("random2d needs k >= 1".into())),
            MogFamily::Grid2d { spacing } | MogFamily::Cube3d { spacing } if !(spacing > 0.0) => {
                Err(Error::InvalidArgument("spacing must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn dim(&self) -> usize {
        self.family.dim()
    }

    pub fn sigma(&self) -> f64 {
        self.component_variance.sqrt()
    }

    pub fn centers(&self) -> Vec<Vec<f64>> {
        self.family.centers()
    }

    /// Axis-aligned box containing every center, padded by `pad_sigmas` standard deviations.
    pub fn bounding_box(&self, pad_sigmas: f64) -> (f64, f64) {
        let centers = self.centers();
        let lo = centers.iter().flatten().copied().fold(f64::INFINITY, f64::min);
        let hi = centers.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
        let pad = pad_sigmas * self.sigma();
        (lo - pad, hi + pad)
    }

    /// `rows` samples: a uniformly chosen component plus isotropic Gaussian noise.
    pub fn sample(&self, seed: u64, rows: usize) -> DMatrix<f64> {
        let centers = self.centers();
        let sigma = self.sigma();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.dim();
        let mut out = DMatrix::zeros(rows, d);
        for r in 0..rows {
            let c = &centers[rng.random_range(0..centers.len())];
            for j in 0..d {
                let z: f64 = StandardNormal.sample(&mut rng);
                out[(r, j)] = c[j] + sigma * z;
            }
        }
        out
    }
}

/// Draws one batch of `spec.batch` samples and returns it with the centers.
pub fn mog_sampler(spec: &MogSpec, seed: u64) -> (DMatrix<f64>, Vec<Vec<f64>>) {
    (spec.sample(seed, spec.batch), spec.centers())
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::DEFAULT_FD_EPS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// Alternating gradient steps that ignore the response term.
    #[serde(rename = "ADI")]
    Adi,
    /// First-order gradient-response with the rank-one closed form.
    #[serde(rename = "FastGR")]
    FastGr,
    #[serde(rename = "ImplicitCG")]
    ImplicitCg,
    #[serde(rename = "Neumann")]
    Neumann,
    #[serde(rename = "RHG")]
    Rhg,
    #[serde(rename = "TRHG")]
    TRhg,
    #[serde(rename = "BDA")]
    Bda,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Adi,
        Variant::FastGr,
        Variant::ImplicitCg,
        Variant::Neumann,
        Variant::Rhg,
        Variant::TRhg,
        Variant::Bda,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Adi => "ADI",
            Variant::FastGr => "FastGR",
            Variant::ImplicitCg => "ImplicitCG",
            Variant::Neumann => "Neumann",
            Variant::Rhg => "RHG",
            Variant::TRhg => "TRHG",
            Variant::Bda => "BDA",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
    }

    /// Variants that differentiate through the unrolled inner trajectory.
    pub fn is_unrolled(self) -> bool {
        matches!(self, Variant::Rhg | Variant::TRhg | Variant::Bda)
    }

    pub fn uses_implicit_solve(self) -> bool {
        matches!(self, Variant::ImplicitCg | Variant::Neumann)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub variant: Variant,
    /// Inner learning rate.
    pub alpha: f64,
    /// Outer learning rate.
    pub beta: f64,
    /// Inner steps per outer iteration (the unroll length `K` for RHG/T-RHG/BDA).
    pub inner_steps: usize,
    pub outer_iters: usize,
    /// Reverse window for T-RHG; equal to `inner_steps` for full RHG.
    pub truncate: usize,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    pub neumann_terms: usize,
    /// Neumann step; `None` uses `alpha`.
    pub neumann_step: Option<f64>,
    pub bda_mu: f64,
    /// Stop when `|theta_k - theta_{k-1}| / |theta_k| <= stop_rel_tol`.
    /// A non-finite value disables the rule.
    pub stop_rel_tol: f64,
    /// Early exit of the inner loop for the implicit variants once
    /// `|grad_omega F_CL| <= inner_tol`; 0 always runs `inner_steps`.
    pub inner_tol: f64,
    pub outer_update: UpdateRule,
    pub inner_update: UpdateRule,
    pub fd_eps: f64,
    /// Append a trace record every this many iterations (the last iteration
    /// is always recorded).
    pub record_every: usize,
    pub seed: u64,
}

impl SolverConfig {
    pub fn new(variant: Variant) -> Self {
        let inner_steps = match variant {
            Variant::Adi | Variant::FastGr => 1,
            Variant::ImplicitCg | Variant::Neumann => 100,
            Variant::Rhg | Variant::TRhg | Variant::Bda => 50,
        };
        let truncate = match variant {
            Variant::TRhg => inner_steps / 2,
            _ => inner_steps,
        };
        Self {
            variant,
            alpha: 0.1,
            beta: 0.1,
            inner_steps,
            outer_iters: 1000,
            truncate,
            cg_tol: 1e-10,
            cg_max_iter: 100,
            neumann_terms: 20,
            neumann_step: None,
            bda_mu: 0.5,
            stop_rel_tol: 1e-5,
            inner_tol: 0.0,
            outer_update: UpdateRule::Sgd,
            inner_update: UpdateRule::Sgd,
            fd_eps: DEFAULT_FD_EPS,
            record_every: 1,
            seed: 0,
        }
    }

    /// Sets `inner_steps`, keeping `truncate` consistent with the variant.
    pub fn with_inner_steps(mut self, k: usize) -> Self {
        self.inner_steps = k;
        self.truncate = match self.variant {
            Variant::TRhg => (k / 2).max(1),
            _ => k,
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if self.inner_steps == 0 {
            return bad("inner_steps must be at least 1".into());
        }
        if self.variant.is_unrolled() && (self.truncate == 0 || self.truncate > self.inner_steps) {
            return bad(format!(
                "truncate must lie in [1, inner_steps={}], got {}",
                self.inner_steps, self.truncate
            ));
        }
        if self.stop_rel_tol.is_nan() || self.stop_rel_tol < 0.0 {
            return bad(format!("stop_rel_tol must be >= 0, got {}", self.stop_rel_tol));
        }
        if !(0.0..1.0).contains(&self.bda_mu) {
            return bad(format!("bda_mu must lie in [0, 1), got {}", self.bda_mu));
        }
        if let Some(s) = self.neumann_step {
            if !(s > 0.0) {
                return bad(format!("neumann_step must be positive, got {s}"));
            }
        }
        if !(self.fd_eps > 0.0) {
            return bad(format!("fd_eps must be positive, got {}", self.fd_eps));
        }
        if self.record_every == 0 {
            return bad("record_every must be at least 1".into());
        }
        if self.variant.is_unrolled() && self.inner_update == UpdateRule::Adam {
            return bad(format!(
                "{} differentiates through plain gradient descent; inner_update must be sgd",
                self.variant
            ));
        }
        Ok(())
    }

    pub fn neumann_step(&self) -> f64 {
        self.neumann_step.unwrap_or(self.alpha)
    }
}

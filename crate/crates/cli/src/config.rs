//! Experiment configuration files.
//!
//! A config is a TOML document; the grammar is documented in
//! `configs/GRAMMAR.md`. Every table rejects unknown keys.

use std::path::{Path, PathBuf};

use bilevel_gr::problems::gan::GanLoss;
use bilevel_gr::problems::hyperclean::HyperCleanSpec;
use bilevel_gr::problems::mog::{MogFamily, MogSpec};
use bilevel_gr::solvers::{SolverConfig, UpdateRule, Variant};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    ToyConvergence,
    ToyScaling,
    Mog,
    Hyperclean,
    Meta,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 5] = [
        ExperimentKind::ToyConvergence,
        ExperimentKind::ToyScaling,
        ExperimentKind::Mog,
        ExperimentKind::Hyperclean,
        ExperimentKind::Meta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::ToyConvergence => "toy_convergence",
            ExperimentKind::ToyScaling => "toy_scaling",
            ExperimentKind::Mog => "mog",
            ExperimentKind::Hyperclean => "hyperclean",
            ExperimentKind::Meta => "meta",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyProblem {
    #[serde(default = "one")]
    pub n: usize,
    #[serde(default = "two")]
    pub a: f64,
    #[serde(default = "two")]
    pub c: f64,
    #[serde(default = "three")]
    pub theta0: f64,
    #[serde(default = "three")]
    pub omega0: f64,
}

impl Default for ToyProblem {
    fn default() -> Self {
        Self {
            n: 1,
            a: 2.0,
            c: 2.0,
            theta0: 3.0,
            omega0: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyScalingProblem {
    #[serde(default = "default_dims")]
    pub dims: Vec<usize>,
    #[serde(default = "two")]
    pub a: f64,
    #[serde(default = "two")]
    pub c: f64,
    #[serde(default = "three")]
    pub theta0: f64,
    #[serde(default = "three")]
    pub omega0: f64,
    /// Divide every solver's `beta` by `n`. The outer gradient sums `n`
    /// inner coordinates, so a fixed step would diverge as `n` grows.
    #[serde(default = "yes")]
    pub beta_per_dim: bool,
}

impl Default for ToyScalingProblem {
    fn default() -> Self {
        Self {
            dims: default_dims(),
            a: 2.0,
            c: 2.0,
            theta0: 3.0,
            omega0: 3.0,
            beta_per_dim: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyName {
    Ring,
    Random,
    Grid,
    Cube,
}

impl FamilyName {
    pub fn family(self) -> MogFamily {
        match self {
            FamilyName::Ring => MogFamily::ring(),
            FamilyName::Random => MogFamily::random(),
            FamilyName::Grid => MogFamily::grid(),
            FamilyName::Cube => MogFamily::cube(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossName {
    VanillaBce,
    LeastSquares,
    Wasserstein,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MogProblem {
    #[serde(default = "ring")]
    pub family: FamilyName,
    #[serde(default = "vanilla")]
    pub loss: LossName,
    /// Weight clip for the Wasserstein loss.
    #[serde(default = "default_clip")]
    pub clip: f64,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_noise_dim")]
    pub noise_dim: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_variance")]
    pub component_variance: f64,
    /// Generated and real samples drawn for the final metrics.
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    #[serde(default = "default_js_bins")]
    pub js_bins: usize,
    #[serde(default = "default_capture")]
    pub capture_sigmas: f64,
    #[serde(default = "default_min_fraction")]
    pub min_fraction: f64,
}

impl Default for MogProblem {
    fn default() -> Self {
        toml::Table::new().try_into().expect("all fields defaulted")
    }
}

impl MogProblem {
    pub fn gan_loss(&self) -> GanLoss {
        match self.loss {
            LossName::VanillaBce => GanLoss::VanillaBce,
            LossName::LeastSquares => GanLoss::least_squares(),
            LossName::Wasserstein => GanLoss::Wasserstein { clip: self.clip },
        }
    }

    pub fn mog_spec(&self) -> MogSpec {
        MogSpec {
            family: self.family.family(),
            component_variance: self.component_variance,
            batch: self.batch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperCleanProblem {
    /// Initial value of every sample-weight logit.
    #[serde(default = "four")]
    pub theta_init: f64,
    #[serde(default = "half")]
    pub f1_threshold: f64,
    /// Dataset parameters; the dataset seed is `data.seed + run seed`.
    #[serde(default)]
    pub data: HyperCleanSpec,
}

impl Default for HyperCleanProblem {
    fn default() -> Self {
        Self {
            theta_init: 4.0,
            f1_threshold: 0.5,
            data: HyperCleanSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaProblem {
    #[serde(default = "default_tasks")]
    pub tasks: usize,
    #[serde(default = "three_usize")]
    pub ways: usize,
    #[serde(default = "five")]
    pub shots: usize,
    #[serde(default = "five")]
    pub val_shots: usize,
    #[serde(default = "one_f")]
    pub noise: f64,
}

impl Default for MetaProblem {
    fn default() -> Self {
        Self {
            tasks: default_tasks(),
            ways: 3,
            shots: 5,
            val_shots: 5,
            noise: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Problem {
    ToyConvergence(ToyProblem),
    ToyScaling(ToyScalingProblem),
    Mog(MogProblem),
    Hyperclean(HyperCleanProblem),
    Meta(MetaProblem),
}

/// One `[[solver]]` table: a variant plus overrides of its defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverBlock {
    pub variant: Option<Variant>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub inner_steps: Option<usize>,
    pub outer_iters: Option<usize>,
    pub truncate: Option<usize>,
    pub cg_tol: Option<f64>,
    pub cg_max_iter: Option<usize>,
    pub neumann_terms: Option<usize>,
    pub neumann_step: Option<f64>,
    pub bda_mu: Option<f64>,
    /// Absent disables the stopping rule.
    pub stop_rel_tol: Option<f64>,
    pub inner_tol: Option<f64>,
    pub outer_update: Option<UpdateRule>,
    pub inner_update: Option<UpdateRule>,
    pub fd_eps: Option<f64>,
    pub record_every: Option<usize>,
}

impl SolverBlock {
    /// Overlays this block on `base` (`[defaults]` already applied).
    fn merged(&self, base: &SolverBlock) -> SolverBlock {
        macro_rules! pick {
            ($($f:ident),*) => { SolverBlock { $($f: self.$f.or(base.$f)),* } };
        }
        pick!(
            variant,
            alpha,
            beta,
            inner_steps,
            outer_iters,
            truncate,
            cg_tol,
            cg_max_iter,
            neumann_terms,
            neumann_step,
            bda_mu,
            stop_rel_tol,
            inner_tol,
            outer_update,
            inner_update,
            fd_eps,
            record_every
        )
    }

    fn build(&self) -> CliResult<SolverConfig> {
        let variant = self
            .variant
            .ok_or_else(|| CliError::Config("every [[solver]] needs a `variant`".into()))?;
        let mut c = SolverConfig::new(variant);
        if let Some(k) = self.inner_steps {
            c = c.with_inner_steps(k);
        }
        c.stop_rel_tol = self.stop_rel_tol.unwrap_or(f64::INFINITY);
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(
            alpha,
            beta,
            outer_iters,
            truncate,
            cg_tol,
            cg_max_iter,
            neumann_terms,
            bda_mu,
            inner_tol,
            outer_update,
            inner_update,
            fd_eps,
            record_every
        );
        if self.neumann_step.is_some() {
            c.neumann_step = self.neumann_step;
        }
        c.validate()
            .map_err(|e| CliError::Config(format!("solver {variant}: {e}")))?;
        Ok(c)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    experiment: ExperimentKind,
    #[serde(default)]
    seed: u64,
    #[serde(default = "one")]
    repeats: usize,
    out_dir: Option<PathBuf>,
    #[serde(default)]
    allow_diverge: Vec<Variant>,
    #[serde(default = "yes")]
    record_wall_time: bool,
    #[serde(default)]
    problem: Option<toml::Table>,
    #[serde(default)]
    defaults: SolverBlock,
    #[serde(default)]
    solver: Vec<SolverBlock>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub repeats: usize,
    pub out_dir: PathBuf,
    /// Variants whose divergence is recorded without failing the run.
    pub allow_diverge: Vec<Variant>,
    /// When false every `wall_ms` is written as 0 so outputs are byte-stable.
    pub record_wall_time: bool,
    pub problem: Problem,
    pub solvers: Vec<SolverConfig>,
}

fn problem_from<T: serde::de::DeserializeOwned>(table: Option<toml::Table>) -> CliResult<T> {
    table
        .unwrap_or_default()
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(format!("[problem]: {}", e.message())))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> CliResult<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string().trim_end().to_string()))?;
        let problem = match raw.experiment {
            ExperimentKind::ToyConvergence => Problem::ToyConvergence(problem_from(raw.problem)?),
            ExperimentKind::ToyScaling => Problem::ToyScaling(problem_from(raw.problem)?),
            ExperimentKind::Mog => Problem::Mog(problem_from(raw.problem)?),
            ExperimentKind::Hyperclean => Problem::Hyperclean(problem_from(raw.problem)?),
            ExperimentKind::Meta => Problem::Meta(problem_from(raw.problem)?),
        };
        let solvers = raw
            .solver
            .iter()
            .map(|b| b.merged(&raw.defaults).build())
            .collect::<CliResult<Vec<_>>>()?;
        let config = Self {
            experiment: raw.experiment,
            seed: raw.seed,
            repeats: raw.repeats,
            out_dir: raw
                .out_dir
                .unwrap_or_else(|| PathBuf::from("out").join(raw.experiment.name())),
            allow_diverge: raw.allow_diverge,
            record_wall_time: raw.record_wall_time,
            problem,
            solvers,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.repeats == 0 {
            return bad("repeats must be at least 1".into());
        }
        if self.solvers.is_empty() {
            return bad("at least one [[solver]] is required".into());
        }
        match &self.problem {
            Problem::ToyConvergence(p) if p.n == 0 => bad("problem.n must be at least 1".into()),
            Problem::ToyScaling(p) if p.dims.is_empty() || p.dims.contains(&0) => {
                bad("problem.dims must be a non-empty list of positive sizes".into())
            }
            Problem::Mog(p) if p.eval_samples < 4 || p.js_bins < 2 || p.width == 0 || p.noise_dim == 0 => {
                bad("problem: eval_samples >= 4, js_bins >= 2, width and noise_dim positive".into())
            }
            Problem::Mog(p) => p.mog_spec().validate().map_err(|e| CliError::Config(format!("problem: {e}"))),
            Problem::Hyperclean(p) => p.data.validate().map_err(|e| CliError::Config(format!("problem.data: {e}"))),
            Problem::Meta(p) if p.tasks == 0 || p.ways < 2 || p.shots == 0 || p.val_shots == 0 => {
                bad("problem: tasks, shots, val_shots >= 1 and ways >= 2".into())
            }
            _ => Ok(()),
        }
    }

    /// Keeps only the listed variants; an empty filter keeps everything.
    pub fn filter_solvers(&mut self, keep: &[Variant]) -> CliResult<()> {
        if keep.is_empty() {
            return Ok(());
        }
        self.solvers.retain(|s| keep.contains(&s.variant));
        if self.solvers.is_empty() {
            return Err(CliError::Config("--solver filter removed every solver".into()));
        }
        Ok(())
    }
}

fn one() -> usize {
    1
}
fn three_usize() -> usize {
    3
}
fn five() -> usize {
    5
}
fn one_f() -> f64 {
    1.0
}
fn two() -> f64 {
    2.0
}
fn three() -> f64 {
    3.0
}
fn four() -> f64 {
    4.0
}
fn half() -> f64 {
    0.5
}
fn yes() -> bool {
    true
}
fn default_dims() -> Vec<usize> {
    vec![100, 1000]
}
fn ring() -> FamilyName {
    FamilyName::Ring
}
fn vanilla() -> LossName {
    LossName::VanillaBce
}
fn default_clip() -> f64 {
    0.01
}
fn default_width() -> usize {
    64
}
fn default_noise_dim() -> usize {
    16
}
fn default_batch() -> usize {
    512
}
fn default_variance() -> f64 {
    0.02
}
fn default_eval_samples() -> usize {
    2000
}
fn default_js_bins() -> usize {
    64
}
fn default_capture() -> f64 {
    3.0
}
fn default_min_fraction() -> f64 {
    0.01
}
fn default_tasks() -> usize {
    10
}

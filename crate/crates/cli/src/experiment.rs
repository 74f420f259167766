//! Runs a solver x problem x repeat matrix and writes its artifacts.
//!
//! Each cell is single-threaded; cells run on a pool capped by the caller.
//! Traces are written atomically per cell, then one summary is written
//! after every cell has finished, in config order regardless of scheduling.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use bilevel_gr::metrics::{f1_corruption, fid_gaussian, js_histogram, mode_count, HistGrid};
use bilevel_gr::nn::sigmoid;
use bilevel_gr::problems::gan::{GanOracle, GanProblemSpec};
use bilevel_gr::problems::hyperclean::{HyperCleanOracle, HyperCleanSpec};
use bilevel_gr::problems::meta::{MetaOracle, MetaTaskSpec};
use bilevel_gr::problems::toy::{toy_reference, ToyOracle, ToySpec};
use bilevel_gr::solvers::{run_solver, Reference, SolverConfig, SolverTrace, Status};
use bilevel_gr::BilevelOracle;
use rayon::prelude::*;

use crate::config::{ExperimentConfig, HyperCleanProblem, MetaProblem, MogProblem, Problem};
use crate::error::{CliError, CliResult, DivergenceRecord};
use crate::summary::{write_trace_csv, GroupSummary, Num, RunSummary, SolverSummary, Summary, TraceRow};

pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Worker threads; `None` uses the pool default.
    pub threads: Option<usize>,
    pub quiet: bool,
}

/// One problem instance shared by the solvers of a group.
struct Group {
    label: String,
    x: f64,
    toy: Option<(ToySpec, Reference)>,
}

struct Cell {
    group: usize,
    solver: usize,
    repeat: usize,
}

struct CellOutput {
    run: RunSummary,
    rows: Vec<TraceRow>,
    diverged: bool,
}

fn groups(config: &ExperimentConfig) -> Vec<Group> {
    let toy_group = |n: usize, a: f64, c: f64| {
        let spec = ToySpec::uniform(a, c, n);
        let r = toy_reference(&spec);
        let reference = Reference {
            theta: vec![r.theta].into(),
            value: r.value,
        };
        Group {
            label: format!("n{n}"),
            x: n as f64,
            toy: Some((spec, reference)),
        }
    };
    match &config.problem {
        Problem::ToyConvergence(p) => vec![toy_group(p.n, p.a, p.c)],
        Problem::ToyScaling(p) => p.dims.iter().map(|&n| toy_group(n, p.a, p.c)).collect(),
        Problem::Mog(p) => vec![Group {
            label: format!("{:?}", p.family).to_lowercase(),
            x: 0.0,
            toy: None,
        }],
        Problem::Hyperclean(p) => vec![Group {
            label: "hyperclean".into(),
            x: p.data.n_train as f64,
            toy: None,
        }],
        Problem::Meta(p) => vec![Group {
            label: "meta".into(),
            x: p.tasks as f64,
            toy: None,
        }],
    }
}

/// Seed of repeat `r`.
pub fn run_seed(config: &ExperimentConfig, repeat: usize) -> u64 {
    config.seed.wrapping_add(repeat as u64)
}

fn trace_path(group: &Group, solver: &SolverConfig, repeat: usize) -> String {
    format!("traces/{}/{}_r{repeat}.csv", group.label, solver.variant)
}

/// Runs the whole matrix, writes traces and `summary.json` under the
/// configured output directory and returns the summary. Divergence of a
/// mandatory run is reported after all artifacts are written.
pub fn run_experiment(config: &ExperimentConfig, options: &RunOptions) -> CliResult<Summary> {
    let out = &config.out_dir;
    std::fs::create_dir_all(out).map_err(CliError::io(out))?;
    let groups = groups(config);
    let mut cells = Vec::new();
    for g in 0..groups.len() {
        for s in 0..config.solvers.len() {
            for r in 0..config.repeats {
                cells.push(Cell {
                    group: g,
                    solver: s,
                    repeat: r,
                });
            }
        }
    }

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = options.threads {
        builder = builder.num_threads(t);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Config(format!("worker pool: {e}")))?;
    let outputs: Vec<CliResult<CellOutput>> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let group = &groups[cell.group];
                let solver = &config.solvers[cell.solver];
                let output = run_cell(config, group, solver, cell.repeat)?;
                let path = out.join(&output.run.csv);
                write_atomic(&path, &write_trace_csv(&output.rows)?)?;
                if !options.quiet {
                    eprintln!(
                        "[{}] {} repeat {}: {} after {} iterations",
                        group.label, solver.variant, cell.repeat, output.run.status, output.run.iterations
                    );
                }
                Ok(output)
            })
            .collect()
    });

    let mut diverged = Vec::new();
    let mut per_solver: BTreeMap<(usize, usize), Vec<RunSummary>> = BTreeMap::new();
    for (cell, output) in cells.iter().zip(outputs) {
        let output = output?;
        let solver = &config.solvers[cell.solver];
        if output.diverged && !config.allow_diverge.contains(&solver.variant) {
            diverged.push(DivergenceRecord {
                group: groups[cell.group].label.clone(),
                solver: solver.variant.to_string(),
                repeat: cell.repeat,
                seed: output.run.seed,
                iterations: output.run.iterations,
                diverged_at_inner_step: output.run.diverged_at,
            });
        }
        per_solver
            .entry((cell.group, cell.solver))
            .or_default()
            .push(output.run);
    }

    let groups = groups
        .iter()
        .enumerate()
        .map(|(gi, g)| GroupSummary {
            label: g.label.clone(),
            x: g.x,
            theta_star: g.toy.as_ref().map(|(_, r)| r.theta.to_vec()),
            phi_star: g.toy.as_ref().map(|(_, r)| Num(r.value)),
            solvers: config
                .solvers
                .iter()
                .enumerate()
                .map(|(si, s)| {
                    let runs = per_solver.remove(&(gi, si)).unwrap_or_default();
                    let cfg = serde_json::to_value(effective(config, g, s)).unwrap_or(serde_json::Value::Null);
                    SolverSummary::new(s.variant.to_string(), cfg, runs)
                })
                .collect(),
        })
        .collect();
    let summary = Summary {
        experiment: config.experiment.name().into(),
        seed: config.seed,
        repeats: config.repeats,
        record_wall_time: config.record_wall_time,
        groups,
        diverged: diverged.clone(),
    };
    let mut json = serde_json::to_vec_pretty(&summary).map_err(|e| CliError::Config(e.to_string()))?;
    json.push(b'\n');
    write_atomic(&out.join(SUMMARY_FILE), &json)?;
    if !diverged.is_empty() {
        return Err(CliError::Diverged(diverged));
    }
    Ok(summary)
}

/// Solver settings as actually run for `group`.
fn effective(config: &ExperimentConfig, group: &Group, solver: &SolverConfig) -> SolverConfig {
    let mut s = solver.clone();
    if let Problem::ToyScaling(p) = &config.problem {
        if p.beta_per_dim {
            s.beta /= group.x;
        }
    }
    s
}

fn run_cell(config: &ExperimentConfig, group: &Group, solver: &SolverConfig, repeat: usize) -> CliResult<CellOutput> {
    let seed = run_seed(config, repeat);
    let mut sc = effective(config, group, solver);
    sc.seed = seed;
    let (trace, metrics, phi_star) = match &config.problem {
        Problem::ToyConvergence(p) => {
            let (spec, reference) = group.toy.as_ref().expect("toy groups carry a reference");
            let t = solve_toy(spec, reference, &sc, p.theta0, p.omega0)?;
            (t, BTreeMap::new(), Some(reference.value))
        }
        Problem::ToyScaling(p) => {
            let (spec, reference) = group.toy.as_ref().expect("toy groups carry a reference");
            let t = solve_toy(spec, reference, &sc, p.theta0, p.omega0)?;
            (t, BTreeMap::new(), Some(reference.value))
        }
        Problem::Mog(p) => {
            let (t, m) = solve_mog(p, &sc, seed)?;
            (t, m, None)
        }
        Problem::Hyperclean(p) => {
            let (t, m) = solve_hyperclean(p, &sc, seed, config.record_wall_time)?;
            (t, m, None)
        }
        Problem::Meta(p) => {
            let (t, m) = solve_meta(p, &sc, seed)?;
            (t, m, None)
        }
    };
    let rows: Vec<TraceRow> = trace
        .records
        .iter()
        .map(|r| TraceRow::from_record(r, phi_star, config.record_wall_time))
        .collect();
    let final_values = rows.last().map(TraceRow::finals).unwrap_or_default();
    let run = RunSummary {
        repeat,
        seed,
        csv: trace_path(group, solver, repeat),
        status: trace.status.as_str().into(),
        iterations: trace.iterations,
        stop_iter: trace.stop_iter,
        diverged_at: trace.diverged_at,
        flags: trace.flags.clone(),
        final_values,
        metrics,
    };
    Ok(CellOutput {
        run,
        rows,
        diverged: trace.status == Status::Diverged,
    })
}

fn solve_toy(spec: &ToySpec, reference: &Reference, sc: &SolverConfig, theta0: f64, omega0: f64) -> CliResult<SolverTrace> {
    let oracle = ToyOracle::new(spec.clone());
    Ok(run_solver(&oracle, sc, &[theta0], &vec![omega0; spec.n()], Some(reference))?)
}

type Metrics = BTreeMap<String, Num>;

fn solve_mog(p: &MogProblem, sc: &SolverConfig, seed: u64) -> CliResult<(SolverTrace, Metrics)> {
    let mog = p.mog_spec();
    let spec = GanProblemSpec::standard(p.gan_loss(), mog.clone(), p.width, p.noise_dim, seed)?;
    let oracle = GanOracle::new(spec)?;
    let (theta0, omega0) = oracle.initial_point(seed);
    let trace = run_solver(&oracle, sc, &theta0, &omega0, None)?;
    let mut m = Metrics::new();
    if trace.theta.is_finite() {
        let eval_seed = seed.wrapping_add(0x5EED);
        let gen = oracle.generate(&trace.theta, eval_seed, p.eval_samples)?;
        let real = mog.sample(eval_seed.wrapping_add(1), p.eval_samples);
        let modes = mode_count(&gen, &mog.centers(), mog.sigma(), p.capture_sigmas, p.min_fraction);
        let (lo, hi) = mog.bounding_box(4.0);
        let js = js_histogram(&real, &gen, HistGrid::new(lo, hi, p.js_bins))?;
        let fid = fid_gaussian(&real, &gen)?;
        m.insert("mode_count".into(), Num(modes as f64));
        m.insert("js".into(), Num(js.value));
        m.insert("fid".into(), Num(fid.value));
    }
    Ok((trace, m))
}

fn solve_hyperclean(p: &HyperCleanProblem, sc: &SolverConfig, seed: u64, timed: bool) -> CliResult<(SolverTrace, Metrics)> {
    let data = HyperCleanSpec {
        seed: p.data.seed.wrapping_add(seed),
        ..p.data.clone()
    };
    let oracle = HyperCleanOracle::new(data)?;
    let dims = oracle.dims();
    let trace = run_solver(&oracle, sc, &vec![p.theta_init; dims.theta], &vec![0.0; dims.omega], None)?;
    let mut m = Metrics::new();
    let mask = oracle.corruption_mask();
    m.insert("f1".into(), Num(f1_corruption(&trace.theta, mask, p.f1_threshold)?));
    m.insert("test_accuracy".into(), Num(oracle.test_accuracy(&trace.omega)));
    let mean_weight = |want: bool| {
        let w: Vec<f64> = trace
            .theta
            .iter()
            .zip(mask)
            .filter(|(_, &c)| c == want)
            .map(|(t, _)| sigmoid(*t))
            .collect();
        w.iter().sum::<f64>() / w.len().max(1) as f64
    };
    m.insert("mean_weight_corrupted".into(), Num(mean_weight(true)));
    m.insert("mean_weight_clean".into(), Num(mean_weight(false)));
    let ms = if timed { trace.total_wall_ms() } else { 0.0 };
    m.insert("ms_per_iter".into(), Num(ms / trace.iterations.max(1) as f64));
    Ok((trace, m))
}

fn solve_meta(p: &MetaProblem, sc: &SolverConfig, seed: u64) -> CliResult<(SolverTrace, Metrics)> {
    let mut spec = MetaTaskSpec::standard(p.tasks, p.ways, p.shots, seed)?;
    spec.val_shots = p.val_shots;
    spec.noise = p.noise;
    let oracle = MetaOracle::new(spec)?;
    let (theta0, omega0) = oracle.initial_point(seed);
    let trace = run_solver(&oracle, sc, &theta0, &omega0, None)?;
    let mut m = Metrics::new();
    if trace.theta.is_finite() && trace.omega.is_finite() {
        m.insert("val_accuracy".into(), Num(oracle.val_accuracy(&trace.theta, &trace.omega)?));
    }
    Ok((trace, m))
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    let mut tmp = PathBuf::from(path);
    tmp.as_mut_os_string().push(".tmp");
    std::fs::write(&tmp, bytes).map_err(CliError::io(&tmp))?;
    std::fs::rename(&tmp, path).map_err(CliError::io(path))
}

//! End-to-end acceptance checks. Each test prints one PASS/FAIL line to
//! stderr (uncaptured) and then asserts the same condition.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use bilevel_gr::metrics::relative_error;
use bilevel_gr::problems::quadratic::QuadraticPair;
use bilevel_gr::selftest::run_selftest;
use bilevel_gr::solvers::{
    fast_gr_from_grads, implicit_cg_response, inner_descent, rank_one_pipeline, rhg_hypergradient, total_hypergradient,
};
use bilevel_gr::BilevelOracle;
use bilevel_gr_cli::{run_experiment, ExperimentConfig, RunOptions, Summary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Timing-sensitive criteria must not share the CPU with each other.
static SERIAL: Mutex<()> = Mutex::new(());

fn report(id: u32, name: &str, passed: bool, detail: &str, elapsed: Duration) {
    let tag = if passed { "PASS" } else { "FAIL" };
    let line = format!("[{tag}] criterion {id} {name}: {detail} ({:.1}s)\n", elapsed.as_secs_f64());
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn config(name: &str, out: &Path) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    let mut c = ExperimentConfig::load(&path).unwrap();
    c.out_dir = out.to_path_buf();
    c
}

fn run(c: &ExperimentConfig) -> Summary {
    let options = RunOptions {
        threads: Some(1),
        quiet: true,
    };
    run_experiment(c, &options).unwrap()
}

fn mean(s: &Summary, group: &str, solver: &str, key: &str) -> f64 {
    s.group(group)
        .and_then(|g| g.solver(solver))
        .and_then(|v| v.stat(key))
        .unwrap_or_else(|| panic!("missing {group}/{solver}/{key}"))
        .mean
        .0
}

#[test]
fn criterion_1_toy_convergence() {
    let _lock = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let s = run(&config("toy_convergence.toml", dir.path()));
    let elapsed = t.elapsed();
    let fast = mean(&s, "n1", "FastGR", "theta_rel_err");
    let adi = mean(&s, "n1", "ADI", "theta_rel_err");
    let iters = mean(&s, "n1", "FastGR", "iterations");
    let passed = fast <= 1e-3 && adi >= 10.0 * fast && iters <= 5000.0 && elapsed < Duration::from_secs(10);
    let detail = format!("FastGR rel err {fast:.2e} after {iters} iters (<= 1e-3), ADI {adi:.2e} (>= 10x)");
    report(1, "toy convergence", passed, &detail, elapsed);
    assert!(passed, "{detail}");
}

#[test]
fn criterion_2_hypergradient_correctness() {
    let _lock = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let oracle = QuadraticPair::new(5);
    let mut worst_grad: f64 = 0.0;
    for _ in 0..20 {
        let theta: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let exact: Vec<f64> = theta.iter().map(|v| 4.0 * v).collect();

        let omega = inner_descent(&oracle, &theta, &[0.0; 5], 0.25, 200, 0).unwrap();
        let cg = implicit_cg_response(&oracle, &theta, &omega, 1e-12, 100, 1e-6, 0).unwrap();
        let implicit = total_hypergradient(&oracle, &theta, &omega, &cg.g_r, 0);
        let rhg = rhg_hypergradient(&oracle, &theta, &[0.0; 5], 0.1, 200, 200, 1e-6, 0).unwrap().hypergrad;
        // Central differences of phi with a numerically solved inner problem.
        let phi = |th: &[f64]| {
            let w = inner_descent(&oracle, th, &[0.0; 5], 0.25, 200, 0).unwrap();
            oracle.f_ol(th, &w, 0)
        };
        let h = 1e-5;
        let fd: Vec<f64> = (0..5)
            .map(|i| {
                let (mut p, mut m) = (theta.clone(), theta.clone());
                p[i] += h;
                m[i] -= h;
                (phi(&p) - phi(&m)) / (2.0 * h)
            })
            .collect();
        for g in [&implicit[..], &rhg[..], &fd[..]] {
            worst_grad = worst_grad.max(relative_error(g, &exact).0);
        }
    }

    let mut worst_form: f64 = 0.0;
    for _ in 0..1000 {
        let (m, n) = (rng.random_range(1..8), rng.random_range(1..8));
        let mut draw = |k: usize| -> Vec<f64> { (0..k).map(|_| rng.random_range(-3.0..3.0)).collect() };
        let (g_th, g_ol, g_cl) = (draw(m), draw(n), draw(n));
        let closed = fast_gr_from_grads(&g_th, &g_ol, &g_cl).g_r;
        let pipeline = rank_one_pipeline(&g_th, &g_ol, &g_cl).g_r;
        worst_form = worst_form.max(relative_error(&closed, &pipeline).0);
    }
    let elapsed = t.elapsed();
    let passed = worst_grad <= 1e-3 && worst_form <= 1e-12 && elapsed < Duration::from_secs(30);
    let detail = format!(
        "CG/RHG/FD vs 4 theta max rel err {worst_grad:.2e} (<= 1e-3); closed form vs rank-one solve {worst_form:.2e} over 1000 draws (<= 1e-12)"
    );
    report(2, "hypergradient correctness", passed, &detail, elapsed);
    assert!(passed, "{detail}");
}

#[test]
fn criterion_3_scaling_order() {
    let _lock = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let s = run(&config("toy_scaling.toml", dir.path()));
    let elapsed = t.elapsed();
    let mut passed = elapsed < Duration::from_secs(600);
    let mut parts = Vec::new();
    for n in ["n100", "n1000"] {
        let wall = |v| mean(&s, n, v, "wall_s");
        let (f, ns, r) = (wall("FastGR"), wall("Neumann"), wall("RHG"));
        passed &= f < ns && ns < r;
        let g = s.group(n).unwrap();
        for v in &g.solvers {
            for run in &v.runs {
                passed &= run.status == "converged";
                let hvps = run.final_values["hvp_evals"].0;
                passed &= match v.solver.as_str() {
                    "FastGR" => hvps == 0.0,
                    _ => hvps >= run.iterations as f64,
                };
            }
        }
        parts.push(format!("{n}: FastGR {:.2}ms < Neumann {:.2}ms < RHG {:.2}ms", f * 1e3, ns * 1e3, r * 1e3));
    }
    let detail = format!("{}; FastGR 0 HVPs, others >= 1 per iteration", parts.join(", "));
    report(3, "scaling order", passed, &detail, elapsed);
    assert!(passed, "{detail}");
}

#[test]
fn criterion_4_mode_collapse() {
    let _lock = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let c = config("mog_ring.toml", dir.path());
    assert_eq!(c.repeats, 3);
    assert!(c.solvers.iter().all(|s| s.outer_iters <= 15_000));
    let s = run(&c);
    let elapsed = t.elapsed();
    let m = |v| mean(&s, "ring", v, "mode_count");
    let js = |v| mean(&s, "ring", v, "js");
    let (mf, ma, jf, ja) = (m("FastGR"), m("ADI"), js("FastGR"), js("ADI"));
    let per_seed = elapsed / 3;
    let passed = mf >= ma && mf >= 6.0 && jf <= ja && per_seed < Duration::from_secs(1800);
    let detail = format!("modes FastGR {mf:.2} vs ADI {ma:.2} (FastGR >= ADI, >= 6); JS FastGR {jf:.3} vs ADI {ja:.3}");
    report(4, "mode collapse", passed, &detail, elapsed);
    assert!(passed, "{detail}");
}

#[test]
fn criterion_5_hyperclean() {
    let _lock = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let s = run(&config("hyperclean.toml", dir.path()));
    let elapsed = t.elapsed();
    let f1 = |v| mean(&s, "hyperclean", v, "f1");
    let ms = |v| mean(&s, "hyperclean", v, "ms_per_iter");
    let (ff, fa) = (f1("FastGR"), f1("ADI"));
    let speedup = ms("RHG") / ms("FastGR");
    let passed = ff >= 0.85 && ff - fa >= 0.05 && speedup >= 3.0 && elapsed < Duration::from_secs(300);
    let detail = format!("F1 FastGR {ff:.3} (>= 0.85) vs ADI {fa:.3} (gap >= 0.05); per-iteration speedup over RHG {speedup:.1}x (>= 3x)");
    report(5, "hyper-cleaning", passed, &detail, elapsed);
    assert!(passed, "{detail}");
}

fn dir_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_6_selftest_and_determinism() {
    let _lock = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let st = run_selftest();
    let failed: Vec<&str> = st.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    let surfaced = st.notices.iter().any(|n| n.contains("omega"));

    let dir = tempfile::tempdir().unwrap();
    let mut identical = true;
    for name in ["toy_convergence.toml", "hyperclean.toml", "meta.toml"] {
        let mut outs = Vec::new();
        for k in 0..2 {
            let mut c = config(name, &dir.path().join(format!("{name}-{k}")));
            c.record_wall_time = false;
            run(&c);
            outs.push(dir_bytes(&c.out_dir));
        }
        identical &= !outs[0].is_empty() && outs[0] == outs[1];
    }
    let elapsed = t.elapsed();
    let passed = failed.is_empty() && surfaced && identical && elapsed < Duration::from_secs(120);
    let detail = format!(
        "{} checks, failed {failed:?}; quoted-optimum discrepancy surfaced: {surfaced}; repeated runs byte-identical: {identical}",
        st.checks.len()
    );
    report(6, "selftest and determinism", passed, &detail, elapsed);
    assert!(passed, "{detail}");
}

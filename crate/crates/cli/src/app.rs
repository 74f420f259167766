//! Argument parsing and subcommand dispatch.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use bilevel_gr::selftest::run_selftest;
use bilevel_gr::solvers::Variant;
use clap::{Parser, Subcommand};

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::error::{CliError, CliResult};
use crate::experiment::{run_experiment, RunOptions, SUMMARY_FILE};
use crate::plotdata::{emit_plotdata, PlotKind};
use crate::summary::Summary;

pub const THREADS_ENV: &str = "BILEVEL_GR_THREADS";

#[derive(Debug, Parser)]
#[command(name = "bilevel-gr", version, about = "Bilevel solver benchmarks")]
struct Cli {
    /// Suppress progress and report output on stderr/stdout.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        config: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Run only these solvers (repeatable or comma separated).
        #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
        solver: Vec<Variant>,
        /// Write 0 for every wall time so outputs are byte-reproducible.
        #[arg(long)]
        no_timing: bool,
    },
    /// Gradient, metric and reference checks.
    Selftest,
    /// Enumerate built-in experiments, solvers, data families and losses.
    List,
    /// Turn a summary into a long-format plot table.
    Plotdata {
        /// A summary.json or the directory holding it.
        summary: PathBuf,
        #[arg(long, value_enum)]
        kind: PlotKind,
        /// Output file; stdout when absent.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
        format!("unknown solver `{s}`; expected one of {}", names.join(", "))
    })
}

/// Worker cap from the environment; unset means the pool default.
pub fn threads_from_env() -> CliResult<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(CliError::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
    }
}

/// Parses `argv`, runs the subcommand and returns the process exit code:
/// 0 success, 1 configuration or usage error, 2 divergence of a mandatory
/// run, 3 selftest failure, 4 other runtime failures.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            report_error(&e);
            e.exit_code()
        }
    }
}

fn report_error(e: &CliError) {
    match e {
        CliError::Diverged(records) => {
            let record = serde_json::json!({ "error": "diverged", "runs": records });
            eprintln!("{record}");
        }
        CliError::SelfTest => {}
        other => eprintln!("error: {other}"),
    }
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Run {
            config,
            seed,
            out_dir,
            solver,
            no_timing,
        } => {
            let mut cfg = ExperimentConfig::load(config)?;
            if let Some(s) = seed {
                cfg.seed = *s;
            }
            if let Some(d) = out_dir {
                cfg.out_dir = d.clone();
            }
            if *no_timing {
                cfg.record_wall_time = false;
            }
            cfg.filter_solvers(solver)?;
            let options = RunOptions {
                threads: threads_from_env()?,
                quiet: cli.quiet,
            };
            run_experiment(&cfg, &options)?;
            if !cli.quiet {
                println!("{}", cfg.out_dir.join(SUMMARY_FILE).display());
            }
            Ok(())
        }
        Command::Selftest => {
            let summary = run_selftest();
            if !cli.quiet {
                for c in &summary.checks {
                    println!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
                }
                for n in &summary.notices {
                    println!("note {n}");
                }
            }
            if summary.passed() {
                Ok(())
            } else {
                if cli.quiet {
                    for c in summary.checks.iter().filter(|c| !c.passed) {
                        eprintln!("FAIL {}: {}", c.name, c.detail);
                    }
                }
                Err(CliError::SelfTest)
            }
        }
        Command::List => {
            let mut out = std::io::stdout().lock();
            let names = |v: Vec<&str>| v.join(" ");
            let _ = writeln!(out, "experiments: {}", names(ExperimentKind::ALL.iter().map(|e| e.name()).collect()));
            let _ = writeln!(out, "solvers: {}", names(Variant::ALL.iter().map(|v| v.name()).collect()));
            let _ = writeln!(out, "mog families: ring random grid cube");
            let _ = writeln!(out, "gan losses: vanilla_bce least_squares wasserstein");
            let _ = writeln!(out, "plot kinds: convergence scaling metric_bars");
            Ok(())
        }
        Command::Plotdata { summary, kind, out } => {
            let path = if summary.is_dir() {
                summary.join(SUMMARY_FILE)
            } else {
                summary.clone()
            };
            let base = path.parent().map(PathBuf::from).unwrap_or_default();
            let text = emit_plotdata(&Summary::load(&path)?, &base, *kind)?;
            match out {
                Some(p) => crate::experiment::write_atomic(p, text.as_bytes()),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
    }
}
